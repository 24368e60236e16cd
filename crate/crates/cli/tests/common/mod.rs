#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use deep_packet::pcap::LinkType;
use deep_packet::testing::{packets, synthetic};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    /// Every diagnostic line, parsed.
    pub fn log(&self) -> Vec<serde_json::Value> {
        self.stderr
            .lines()
            .map(|l| {
                serde_json::from_str(l)
                    .unwrap_or_else(|e| panic!("log line {l:?} is not JSON: {e}"))
            })
            .collect()
    }
}

pub fn invoke(args: &[&str]) -> Output {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["deep-packet"];
    argv.extend_from_slice(args);
    let code = deep_packet_cli::run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// SYN without payload, a DNS query, and one data packet.
pub fn three_packet_pcap(path: &Path) {
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
    fs::write(path, packets::pcap_bytes(LinkType::Ethernet, &frames)).unwrap();
}

/// One synthetic capture per class, `<name>.pcap` in `dir`, plus a label
/// scheme mapping `<name>*` to the capitalized name.
pub fn synthetic_corpus(
    dir: &Path,
    names: &[&str],
    per_class: usize,
    seed: u64,
) -> (Vec<PathBuf>, PathBuf) {
    fs::create_dir_all(dir).unwrap();
    let mut scheme = String::new();
    let mut files = Vec::new();
    for (class, name) in names.iter().enumerate() {
        let path = dir.join(format!("{name}.pcap"));
        let frames = synthetic::class_frames(seed, class, per_class);
        fs::write(&path, packets::pcap_bytes(LinkType::Ethernet, &frames)).unwrap();
        files.push(path);
        let mut label = name.to_string();
        label[..1].make_ascii_uppercase();
        scheme.push_str(&format!("{name}*\t{label}\n"));
    }
    let scheme_path = dir.join("scheme.tsv");
    fs::write(&scheme_path, scheme).unwrap();
    (files, scheme_path)
}

/// A small CNN that trains in seconds on 1500-byte inputs.
pub const SMALL_CNN: &str = "\
cnn.c1_size = 4
cnn.c1_count = 4
cnn.c1_stride = 3
cnn.c2_size = 5
cnn.c2_count = 4
cnn.c2_stride = 3
cnn.fc_sizes = 32, 16, 8
batch_size = 32
learning_rate = 0.003
";

pub const SMALL_SAE: &str = "\
sae.encoder_sizes = 32, 16
batch_size = 32
";

/// Builds `dataset.dpk` with a recorded split from a synthetic corpus.
pub fn toy_dataset(dir: &Path, names: &[&str], per_class: usize) -> PathBuf {
    let (_, scheme) = synthetic_corpus(&dir.join("captures"), names, per_class, 7);
    let dataset = dir.join("dataset.dpk");
    let out = invoke(&[
        "make-dataset",
        "--pcap",
        path_str(&dir.join("captures")),
        "--scheme",
        path_str(&scheme),
        "--balance",
        "--split",
        "--out",
        path_str(&dataset),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    dataset
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}
