mod common {
    pub mod fixtures;
}

use std::fs;
use std::time::Instant;

use common::fixtures::*;
use deep_packet::pcap::{CaptureFrame, CaptureSource, LinkType};
use deep_packet::preprocess::{preprocess_capture, preprocess_frame, DiscardReason, DiscardStats};
use deep_packet::testing::packets;

/// Rewrites the checked-in corpus. Run with `--ignored` after changing the
/// fixture definitions.
#[test]
#[ignore]
fn regenerate_fixture_files() {
    let dir = fixture_dir();
    fs::create_dir_all(&dir).unwrap();
    for (stem, link, fixtures) in corpora() {
        fs::write(
            dir.join(format!("{stem}.pcap")),
            pcap_image(link, &fixtures),
        )
        .unwrap();
        fs::write(dir.join(format!("{stem}.vec")), golden_vectors(&fixtures)).unwrap();
    }
}

#[test]
fn corpus_has_enough_frames() {
    let total: usize = corpora().iter().map(|(_, _, f)| f.len()).sum();
    assert!(total >= 20, "{total} frames");
}

#[test]
fn checked_in_files_match_definitions() {
    for (stem, link, fixtures) in corpora() {
        let pcap = fs::read(fixture_dir().join(format!("{stem}.pcap"))).unwrap();
        assert_eq!(pcap, pcap_image(link, &fixtures), "{stem}.pcap");
        let vec = fs::read(fixture_dir().join(format!("{stem}.vec"))).unwrap();
        assert_eq!(vec, golden_vectors(&fixtures), "{stem}.vec");
    }
}

#[test]
fn pipeline_reproduces_golden_vectors() {
    for (stem, _, fixtures) in corpora() {
        let mut source = CaptureSource::open(fixture_dir().join(format!("{stem}.pcap"))).unwrap();
        let (vectors, stats) = preprocess_capture(&mut source).unwrap();
        let produced: Vec<u8> = vectors
            .iter()
            .flat_map(|v| v.bytes().iter().copied())
            .collect();
        let golden = fs::read(fixture_dir().join(format!("{stem}.vec"))).unwrap();
        assert_eq!(produced.len(), golden.len(), "{stem}");
        for (i, (p, g)) in produced
            .chunks(VECTOR_LEN)
            .zip(golden.chunks(VECTOR_LEN))
            .enumerate()
        {
            assert_eq!(p, g, "{stem}: kept vector {i}");
        }
        let mut expected = DiscardStats::default();
        for f in &fixtures {
            expected.record(match &f.expect {
                Expect::Kept(_) => Ok(()),
                Expect::Discarded(r) => Err(*r),
            });
        }
        assert_eq!(stats, expected, "{stem}");
    }
}

#[test]
fn each_fixture_gets_its_expected_outcome() {
    for (_, link, fixtures) in corpora() {
        for (i, f) in fixtures.iter().enumerate() {
            let frame = CaptureFrame {
                index: i as u64,
                ts_sec: 0,
                ts_usec: 0,
                link_type: link,
                original_length: f.frame.len() as u32,
                data: f.frame.clone(),
            };
            match (&f.expect, preprocess_frame(&frame)) {
                (Expect::Kept(v), Ok(got)) => assert_eq!(&got.bytes()[..], &v[..], "{}", f.name),
                (Expect::Discarded(r), Err(got)) => assert_eq!(*r, got, "{}", f.name),
                (_, got) => panic!("{}: unexpected outcome {got:?}", f.name),
            }
        }
    }
}

#[test]
fn three_packet_capture_stats() {
    let ip = |p: Vec<u8>| packets::ethernet(0x0800, &p);
    let frames = vec![
        ip(packets::ipv4_tcp(
            [10, 0, 0, 1],
            [10, 0, 0, 2],
            40000,
            443,
            packets::TCP_SYN,
            &[],
        )),
        ip(packets::ipv4_udp(
            [10, 0, 0, 1],
            [10, 0, 0, 2],
            40001,
            53,
            &[1, 2, 3, 4],
        )),
        ip(packets::ipv4_tcp(
            [10, 0, 0, 1],
            [10, 0, 0, 2],
            40000,
            443,
            packets::TCP_PSH | packets::TCP_ACK,
            b"hello",
        )),
    ];
    let image = packets::pcap_bytes(LinkType::Ethernet, &frames);
    let mut source = CaptureSource::from_reader(std::io::Cursor::new(image), "three.pcap").unwrap();
    let (vectors, stats) = preprocess_capture(&mut source).unwrap();
    assert_eq!(vectors.len(), 1);
    assert_eq!(stats.kept, 1);
    assert_eq!(stats.discarded(DiscardReason::HandshakeNoPayload), 1);
    assert_eq!(stats.discarded(DiscardReason::Dns), 1);
    assert_eq!(stats.total_discarded(), 2);
}

#[test]
fn fuzzed_frames_keep_invariants() {
    let started = Instant::now();
    let FuzzReport {
        kept,
        total,
        violations,
    } = fuzz_invariants(100_000, 2024);
    assert_eq!(violations, 0);
    assert!(
        kept > total / 10,
        "only {kept} of {total} fuzzed frames survived; fuzzing too destructive"
    );
    assert!(started.elapsed().as_secs() < 10);
}
