//! The hand-assembled capture corpus. Every frame is built from explicit
//! parts, and the expected vector is assembled from those same parts
//! (masked IPv4 header, transport header padded to 20 bytes for UDP,
//! payload, zero fill to 1500) without going through the parser.

#![allow(dead_code)]

use deep_packet::pcap::{CaptureFrame, LinkType};
use deep_packet::preprocess::{preprocess_frame, DiscardReason};
use deep_packet::testing::packets::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VECTOR_LEN: usize = 1500;

pub enum Expect {
    Kept(Vec<u8>),
    Discarded(DiscardReason),
}

pub struct Fixture {
    pub name: &'static str,
    pub frame: Vec<u8>,
    pub expect: Expect,
}

const A: [u8; 4] = [192, 168, 1, 20];
const B: [u8; 4] = [93, 184, 216, 34];

fn payload(len: usize, salt: u8) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt))
        .collect()
}

/// Expected vector from the raw pieces of a kept packet.
fn expected(ip_header: &[u8], transport_header: &[u8], udp: bool, body: &[u8]) -> Vec<u8> {
    let mut v = ip_header.to_vec();
    v[12..20].fill(0);
    v.extend_from_slice(transport_header);
    if udp {
        v.extend_from_slice(&[0; 12]);
    }
    v.extend_from_slice(body);
    v.resize(VECTOR_LEN, 0);
    v
}

struct Ip {
    options: Vec<u8>,
    protocol: u8,
    segment: Vec<u8>,
}

impl Ip {
    fn bytes(&self) -> Vec<u8> {
        ipv4_with_options(A, B, &self.options, self.protocol, &self.segment)
    }

    fn header(&self) -> Vec<u8> {
        self.bytes()[..20 + self.options.len()].to_vec()
    }
}

fn tcp(
    sport: u16,
    dport: u16,
    flags: u8,
    tcp_options: &[u8],
    ip_options: &[u8],
    body: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let th = tcp_header(sport, dport, flags, tcp_options);
    let mut segment = th.clone();
    segment.extend_from_slice(body);
    let ip = Ip {
        options: ip_options.to_vec(),
        protocol: 6,
        segment,
    };
    (ip.bytes(), expected(&ip.header(), &th, false, body))
}

fn udp(sport: u16, dport: u16, body: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let uh = udp_header(sport, dport, body.len());
    let mut segment = uh.clone();
    segment.extend_from_slice(body);
    let ip = Ip {
        options: vec![],
        protocol: 17,
        segment,
    };
    (ip.bytes(), expected(&ip.header(), &uh, true, body))
}

fn kept(name: &'static str, frame: Vec<u8>, vector: Vec<u8>) -> Fixture {
    Fixture {
        name,
        frame,
        expect: Expect::Kept(vector),
    }
}

fn dropped(name: &'static str, frame: Vec<u8>, reason: DiscardReason) -> Fixture {
    Fixture {
        name,
        frame,
        expect: Expect::Discarded(reason),
    }
}

const IPV4: u16 = 0x0800;

/// Ethernet-linked corpus.
pub fn ethernet_corpus() -> Vec<Fixture> {
    let mut out = Vec::new();

    let (ip, v) = tcp(51000, 443, TCP_PSH | TCP_ACK, &[], &[], &payload(100, 1));
    out.push(kept("tcp_psh_ack_100", ethernet(IPV4, &ip), v));

    let (ip, v) = udp(40000, 3478, &payload(50, 2));
    out.push(kept("udp_50", ethernet(IPV4, &ip), v));

    let (ip, v) = tcp(51001, 8080, TCP_ACK, &[], &[], &payload(7, 3));
    out.push(kept("vlan_tcp_ack_7", vlan_ethernet(10, IPV4, &ip), v));

    let (ip, v) = udp(5004, 5006, &payload(160, 4));
    out.push(kept("vlan_udp_160", vlan_ethernet(4000, IPV4, &ip), v));

    for (name, flags) in [
        ("tcp_syn", TCP_SYN),
        ("tcp_syn_ack", TCP_SYN | TCP_ACK),
        ("tcp_bare_ack", TCP_ACK),
        ("tcp_fin_ack", TCP_FIN | TCP_ACK),
        ("tcp_rst", TCP_RST),
    ] {
        let (ip, _) = tcp(51002, 443, flags, &[], &[], &[]);
        out.push(dropped(
            name,
            ethernet(IPV4, &ip),
            DiscardReason::HandshakeNoPayload,
        ));
    }

    // SYN carrying data (e.g. TCP Fast Open) is not an empty handshake segment
    let (ip, v) = tcp(51003, 443, TCP_SYN, &[], &[], &payload(30, 5));
    out.push(kept("tcp_syn_with_data", ethernet(IPV4, &ip), v));

    // no SYN/ACK/FIN/RST, empty payload: headers only
    let (ip, v) = tcp(51004, 443, TCP_PSH, &[], &[], &[]);
    out.push(kept("tcp_psh_empty", ethernet(IPV4, &ip), v));

    let (ip, _) = udp(53124, 53, &payload(33, 6));
    out.push(dropped(
        "dns_query",
        ethernet(IPV4, &ip),
        DiscardReason::Dns,
    ));
    let (ip, _) = udp(53, 53124, &payload(120, 7));
    out.push(dropped(
        "dns_response",
        ethernet(IPV4, &ip),
        DiscardReason::Dns,
    ));
    let (ip, _) = tcp(50000, 53, TCP_PSH | TCP_ACK, &[], &[], &payload(40, 8));
    out.push(dropped(
        "dns_over_tcp",
        ethernet(IPV4, &ip),
        DiscardReason::Dns,
    ));

    let icmp = ipv4(A, B, 1, &[8, 0, 0xf7, 0xff, 0, 1, 0, 1]);
    out.push(dropped(
        "icmp_echo",
        ethernet(IPV4, &icmp),
        DiscardReason::UnsupportedTransport,
    ));

    let mut fragment = udp(40001, 9000, &payload(64, 9)).0;
    fragment[6] = 0x00;
    fragment[7] = 0xB9; // offset 185 * 8 bytes
    out.push(dropped(
        "udp_later_fragment",
        ethernet(IPV4, &fragment),
        DiscardReason::MalformedHeader,
    ));

    let (mut first, v) = udp(40002, 9000, &payload(80, 10));
    first[6] = 0x20; // more-fragments, offset 0
    first[7] = 0x00;
    let mut v = v;
    v[6] = 0x20;
    out.push(kept("udp_first_fragment", ethernet(IPV4, &first), v));

    out.push(dropped(
        "ipv6",
        ethernet(0x86DD, &[0x60; 60]),
        DiscardReason::NonIp,
    ));
    out.push(dropped(
        "arp",
        ethernet(0x0806, &[0; 28]),
        DiscardReason::NonIp,
    ));

    let (ip, v) = tcp(
        51005,
        22,
        TCP_PSH | TCP_ACK,
        &[1, 1, 8, 10, 0, 0, 0, 1, 0, 0, 0, 2],
        &[0x94, 0x04, 0, 0],
        &payload(64, 11),
    );
    out.push(kept("ip_and_tcp_options", ethernet(IPV4, &ip), v));

    let (ip, v) = tcp(51006, 443, TCP_ACK, &[], &[], &payload(1600, 12));
    out.push(kept("tcp_jumbo_truncated", ethernet(IPV4, &ip), v));

    let (ip, v) = udp(40003, 9999, &payload(1452, 13));
    out.push(kept("udp_exactly_full", ethernet(IPV4, &ip), v));

    // 2-byte payload: the frame is padded to the 60-byte Ethernet minimum
    let (ip, v) = udp(40004, 7777, &[0xAB, 0xCD]);
    let mut padded = ethernet(IPV4, &ip);
    padded.resize(60, 0xEE);
    out.push(kept("udp_ethernet_padding", padded, v));

    let (ip, _) = tcp(51007, 443, TCP_ACK, &[], &[], &payload(10, 14));
    out.push(dropped(
        "truncated_ip_header",
        ethernet(IPV4, &ip[..12]),
        DiscardReason::MalformedHeader,
    ));

    out.push(dropped(
        "runt_frame",
        vec![0xFF; 10],
        DiscardReason::MalformedHeader,
    ));

    out
}

/// Raw-IP-linked corpus.
pub fn raw_ip_corpus() -> Vec<Fixture> {
    let mut out = Vec::new();
    let (ip, v) = udp(6000, 6001, &payload(200, 20));
    out.push(kept("raw_udp_200", ip, v));
    let (ip, v) = tcp(6002, 80, TCP_PSH | TCP_ACK, &[], &[], &payload(500, 21));
    out.push(kept("raw_tcp_500", ip, v));
    let (ip, _) = tcp(6003, 80, TCP_SYN, &[], &[], &[]);
    out.push(dropped(
        "raw_tcp_syn",
        ip,
        DiscardReason::HandshakeNoPayload,
    ));
    out.push(dropped("raw_ipv6", vec![0x60; 48], DiscardReason::NonIp));
    out
}

pub fn corpora() -> [(&'static str, LinkType, Vec<Fixture>); 2] {
    [
        ("corpus_ethernet", LinkType::Ethernet, ethernet_corpus()),
        ("corpus_rawip", LinkType::RawIp, raw_ip_corpus()),
    ]
}

/// Concatenated expected vectors of the kept frames, in capture order.
pub fn golden_vectors(fixtures: &[Fixture]) -> Vec<u8> {
    fixtures
        .iter()
        .filter_map(|f| match &f.expect {
            Expect::Kept(v) => Some(v.as_slice()),
            Expect::Discarded(_) => None,
        })
        .flatten()
        .copied()
        .collect()
}

pub fn pcap_image(link: LinkType, fixtures: &[Fixture]) -> Vec<u8> {
    let frames: Vec<Vec<u8>> = fixtures.iter().map(|f| f.frame.clone()).collect();
    pcap_bytes(link, &frames)
}

pub fn fixture_dir() -> std::path::PathBuf {
    // valid from both this crate and its siblings
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Random damage to a fixture frame, or pure noise.
fn fuzz_frame(r: &mut ChaCha8Rng, seeds: &[Vec<u8>]) -> Vec<u8> {
    if r.gen_bool(0.1) {
        let len = r.gen_range(0..200);
        return (0..len).map(|_| r.gen()).collect();
    }
    let mut f = seeds[r.gen_range(0..seeds.len())].clone();
    for _ in 0..r.gen_range(0..6) {
        match r.gen_range(0..4) {
            0 if !f.is_empty() => {
                let i = r.gen_range(0..f.len());
                f[i] = r.gen();
            }
            1 => {
                let keep = r.gen_range(0..=f.len());
                f.truncate(keep);
            }
            2 => f.extend((0..r.gen_range(0..40)).map(|_| r.gen::<u8>())),
            _ if f.len() > 18 => {
                // header fields where damage matters most
                let i = r.gen_range(14..f.len().min(60));
                f[i] = r.gen();
            }
            _ => {}
        }
    }
    f
}

pub struct FuzzReport {
    pub kept: usize,
    pub total: usize,
    /// Kept vectors breaking the length, masking or range invariants.
    pub violations: usize,
}

/// Preprocesses `count` damaged or random frames and checks every kept
/// vector.
pub fn fuzz_invariants(count: usize, seed: u64) -> FuzzReport {
    let seeds: Vec<Vec<u8>> = ethernet_corpus().into_iter().map(|f| f.frame).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut kept, mut violations) = (0, 0);
    for i in 0..count {
        let data = fuzz_frame(&mut r, &seeds);
        let frame = CaptureFrame {
            index: i as u64,
            ts_sec: 0,
            ts_usec: 0,
            link_type: if r.gen_bool(0.9) {
                LinkType::Ethernet
            } else {
                LinkType::RawIp
            },
            original_length: data.len() as u32,
            data,
        };
        if let Ok(v) = preprocess_frame(&frame) {
            kept += 1;
            let ok = v.bytes().len() == VECTOR_LEN
                && v.bytes()[12..20].iter().all(|&b| b == 0)
                && v.values().all(|x| (0.0..=1.0).contains(&x));
            violations += usize::from(!ok);
        }
    }
    FuzzReport {
        kept,
        total: count,
        violations,
    }
}
