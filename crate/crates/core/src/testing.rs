//! Packet builders and synthetic corpora for fixtures, tests and demos.

pub mod packets {
    use crate::pcap::{LinkType, PcapWriter, RawRecord};

    pub const TCP_FIN: u8 = 0x01;
    pub const TCP_SYN: u8 = 0x02;
    pub const TCP_RST: u8 = 0x04;
    pub const TCP_PSH: u8 = 0x08;
    pub const TCP_ACK: u8 = 0x10;

    const SRC_MAC: [u8; 6] = [0x00, 0x1b, 0x21, 0x3a, 0x4c, 0x5d];
    const DST_MAC: [u8; 6] = [0x52, 0x54, 0x00, 0x12, 0x35, 0x02];

    pub fn ethernet(ethertype: u16, payload: &[u8]) -> Vec<u8> {
        let mut f = Vec::with_capacity(14 + payload.len());
        f.extend_from_slice(&DST_MAC);
        f.extend_from_slice(&SRC_MAC);
        f.extend_from_slice(&ethertype.to_be_bytes());
        f.extend_from_slice(payload);
        f
    }

    /// Ethernet frame carrying one 802.1Q tag.
    pub fn vlan_ethernet(vlan_id: u16, inner_type: u16, payload: &[u8]) -> Vec<u8> {
        let mut f = Vec::with_capacity(18 + payload.len());
        f.extend_from_slice(&DST_MAC);
        f.extend_from_slice(&SRC_MAC);
        f.extend_from_slice(&0x8100u16.to_be_bytes());
        f.extend_from_slice(&(vlan_id & 0x0FFF).to_be_bytes());
        f.extend_from_slice(&inner_type.to_be_bytes());
        f.extend_from_slice(payload);
        f
    }

    fn checksum(header: &[u8]) -> u16 {
        let mut sum: u32 = header
            .chunks(2)
            .map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)])))
            .sum();
        while sum > 0xFFFF {
            sum = (sum & 0xFFFF) + (sum >> 16);
        }
        !(sum as u16)
    }

    /// IPv4 packet with the given options (length must be a multiple of 4)
    /// wrapping an already-built transport segment.
    pub fn ipv4_with_options(
        src: [u8; 4],
        dst: [u8; 4],
        options: &[u8],
        protocol: u8,
        segment: &[u8],
    ) -> Vec<u8> {
        assert_eq!(options.len() % 4, 0, "IPv4 options must be 32-bit aligned");
        let header_len = 20 + options.len();
        let total = header_len + segment.len();
        let mut p = Vec::with_capacity(total);
        p.push(0x40 | (header_len / 4) as u8);
        p.push(0);
        p.extend_from_slice(&(total as u16).to_be_bytes());
        p.extend_from_slice(&0x1c46u16.to_be_bytes());
        p.extend_from_slice(&0x4000u16.to_be_bytes());
        p.push(64);
        p.push(protocol);
        p.extend_from_slice(&[0, 0]);
        p.extend_from_slice(&src);
        p.extend_from_slice(&dst);
        p.extend_from_slice(options);
        let c = checksum(&p[..header_len]);
        p[10..12].copy_from_slice(&c.to_be_bytes());
        p.extend_from_slice(segment);
        p
    }

    pub fn ipv4(src: [u8; 4], dst: [u8; 4], protocol: u8, segment: &[u8]) -> Vec<u8> {
        ipv4_with_options(src, dst, &[], protocol, segment)
    }

    pub fn udp_header(src_port: u16, dst_port: u16, payload_len: usize) -> Vec<u8> {
        let mut h = Vec::with_capacity(8);
        h.extend_from_slice(&src_port.to_be_bytes());
        h.extend_from_slice(&dst_port.to_be_bytes());
        h.extend_from_slice(&((8 + payload_len) as u16).to_be_bytes());
        h.extend_from_slice(&[0, 0]);
        h
    }

    pub fn tcp_header(src_port: u16, dst_port: u16, flags: u8, options: &[u8]) -> Vec<u8> {
        assert_eq!(options.len() % 4, 0, "TCP options must be 32-bit aligned");
        let len = 20 + options.len();
        let mut h = Vec::with_capacity(len);
        h.extend_from_slice(&src_port.to_be_bytes());
        h.extend_from_slice(&dst_port.to_be_bytes());
        h.extend_from_slice(&0x0102_0304u32.to_be_bytes());
        h.extend_from_slice(&0x0a0b_0c0du32.to_be_bytes());
        h.push(((len / 4) as u8) << 4);
        h.push(flags);
        h.extend_from_slice(&0xFAF0u16.to_be_bytes());
        h.extend_from_slice(&[0, 0, 0, 0]);
        h.extend_from_slice(options);
        h
    }

    pub fn ipv4_udp(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16, payload: &[u8]) -> Vec<u8> {
        let mut seg = udp_header(sport, dport, payload.len());
        seg.extend_from_slice(payload);
        ipv4(src, dst, 17, &seg)
    }

    pub fn ipv4_tcp(
        src: [u8; 4],
        dst: [u8; 4],
        sport: u16,
        dport: u16,
        flags: u8,
        payload: &[u8],
    ) -> Vec<u8> {
        ipv4_tcp_with_options(src, dst, sport, dport, flags, &[], payload)
    }

    pub fn ipv4_tcp_with_options(
        src: [u8; 4],
        dst: [u8; 4],
        sport: u16,
        dport: u16,
        flags: u8,
        options: &[u8],
        payload: &[u8],
    ) -> Vec<u8> {
        let mut seg = tcp_header(sport, dport, flags, options);
        seg.extend_from_slice(payload);
        ipv4(src, dst, 6, &seg)
    }

    /// Serializes frames as an in-memory little-endian pcap.
    pub fn pcap_bytes(link_type: LinkType, frames: &[Vec<u8>]) -> Vec<u8> {
        let mut w = PcapWriter::new(Vec::new(), link_type, false).expect("in-memory write");
        for (i, f) in frames.iter().enumerate() {
            w.write_record(&RawRecord {
                ts_sec: 1_500_000_000 + i as u32,
                ts_usec: 0,
                data: f.clone(),
            })
            .expect("in-memory write");
        }
        w.finish().expect("in-memory write")
    }
}

pub mod synthetic {
    //! Multi-class capture corpora where each class is identified by a byte
    //! motif at the start of the payload, surrounded by random filler.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::packets::*;

    pub const MOTIF_LEN: usize = 24;

    /// Deterministic motif for class `class` out of a corpus seeded by `seed`.
    pub fn motif(seed: u64, class: usize) -> [u8; MOTIF_LEN] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d_6f74_6966 ^ ((class as u64) << 32));
        let mut m = [0u8; MOTIF_LEN];
        rng.fill(&mut m[..]);
        m
    }

    /// Ethernet frames for one class: mostly payload-bearing TCP/UDP packets
    /// carrying the class motif, plus some handshake and DNS noise that the
    /// preprocessor must drop.
    pub fn class_frames(seed: u64, class: usize, data_packets: usize) -> Vec<Vec<u8>> {
        let motif = motif(seed, class);
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class as u64);
        let mut frames = Vec::with_capacity(data_packets + data_packets / 10);
        let mut made = 0;
        while made < data_packets {
            let src = [10, 0, rng.gen(), rng.gen()];
            let dst = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            let sport: u16 = rng.gen_range(1024..u16::MAX);
            let dport: u16 = rng.gen_range(1024..u16::MAX);
            match rng.gen_range(0..20) {
                0 => {
                    frames.push(ethernet(
                        0x0800,
                        &ipv4_tcp(src, dst, sport, dport, TCP_SYN, &[]),
                    ));
                    continue;
                }
                1 => {
                    let query: Vec<u8> = (0..rng.gen_range(20..60)).map(|_| rng.gen()).collect();
                    frames.push(ethernet(0x0800, &ipv4_udp(src, dst, sport, 53, &query)));
                    continue;
                }
                _ => {}
            }
            let len = rng.gen_range(MOTIF_LEN + 8..1400);
            let mut payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            payload[..MOTIF_LEN].copy_from_slice(&motif);
            let ip = if rng.gen_bool(0.5) {
                ipv4_tcp(src, dst, sport, dport, TCP_ACK | TCP_PSH, &payload)
            } else {
                ipv4_udp(src, dst, sport, dport, &payload)
            };
            frames.push(ethernet(0x0800, &ip));
            made += 1;
        }
        frames
    }
}

pub mod oracles {
    //! Slow, direct reference computations used to check the optimized
    //! implementations. Nothing here shares code with the paths it checks.

    /// Central finite-difference gradient of `f` at `x`.
    pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + step;
                let up = f(&probe);
                probe[i] = orig - step;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    /// `|a − b| / max(|a|, |b|, 1e-6)`; the floor keeps near-zero gradients
    /// from inflating the ratio.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Single-sample valid 1-D convolution by direct summation:
    /// `out[f, i] = (Σ_k Σ_a w[f, k, a] · x[k, i·stride + a]) + bias[f]`.
    #[allow(clippy::too_many_arguments)]
    pub fn naive_conv1d(
        x: &[f64],
        channels: usize,
        len: usize,
        w: &[f64],
        filters: usize,
        m: usize,
        bias: &[f64],
        stride: usize,
    ) -> Vec<f64> {
        let out_len = (len - m) / stride + 1;
        let mut out = vec![0.0; filters * out_len];
        for f in 0..filters {
            for i in 0..out_len {
                let mut s = 0.0;
                for k in 0..channels {
                    for a in 0..m {
                        s += w[f * channels * m + k * m + a] * x[k * len + i * stride + a];
                    }
                }
                out[f * out_len + i] = s + bias[f];
            }
        }
        out
    }

    /// One merge of a reference agglomerative clustering: cluster ids
    /// (leaves `0..n`, merged clusters `n..`) and the merge height.
    #[derive(Debug, Clone, PartialEq)]
    pub struct OracleMerge {
        pub a: usize,
        pub b: usize,
        pub height: f64,
    }

    /// Ward clustering by exhaustive search: at every step every pair of
    /// live clusters is scored by the growth of the within-cluster sum of
    /// squares, `|A||B| / (|A| + |B|) · ‖c_A − c_B‖²`, recomputed from the
    /// member rows. Height is `sqrt(2 · growth)`. Ties go to the smallest
    /// `(a, b)` id pair.
    pub fn brute_force_ward(rows: &[Vec<f64>]) -> Vec<OracleMerge> {
        let n = rows.len();
        let mut live: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
        let mut merges = Vec::new();
        let centroid = |members: &[usize]| -> Vec<f64> {
            let dim = rows[0].len();
            let mut c = vec![0.0; dim];
            for &m in members {
                for (ci, v) in c.iter_mut().zip(&rows[m]) {
                    *ci += v;
                }
            }
            c.iter().map(|v| v / members.len() as f64).collect()
        };
        let mut next_id = n;
        while live.len() > 1 {
            let mut best: Option<(f64, usize, usize, usize, usize)> = None;
            for i in 0..live.len() {
                for j in i + 1..live.len() {
                    let (ci, cj) = (centroid(&live[i].1), centroid(&live[j].1));
                    let (ni, nj) = (live[i].1.len() as f64, live[j].1.len() as f64);
                    let sq: f64 = ci.iter().zip(&cj).map(|(a, b)| (a - b) * (a - b)).sum();
                    let growth = ni * nj / (ni + nj) * sq;
                    let (a, b) = (live[i].0.min(live[j].0), live[i].0.max(live[j].0));
                    let better = match best {
                        None => true,
                        Some((g, ba, bb, _, _)) => growth < g || (growth == g && (a, b) < (ba, bb)),
                    };
                    if better {
                        best = Some((growth, a, b, i, j));
                    }
                }
            }
            let (growth, a, b, i, j) = best.unwrap();
            let mut members = live[i].1.clone();
            members.extend_from_slice(&live[j].1);
            live.remove(j);
            live.remove(i);
            live.push((next_id, members));
            next_id += 1;
            merges.push(OracleMerge {
                a,
                b,
                height: (2.0 * growth).sqrt(),
            });
        }
        merges
    }

    /// Ward clustering as R's `hclust(d, "ward.D")` does it on unsquared
    /// Euclidean distances: a full distance matrix updated with the Ward
    /// Lance–Williams coefficients, scanned exhaustively at every step.
    pub fn brute_force_ward_unsquared(rows: &[Vec<f64>]) -> Vec<OracleMerge> {
        let n = rows.len();
        let mut d = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                d[i][j] = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let mut size = vec![1usize; 2 * n];
        let mut live: Vec<usize> = (0..n).collect();
        let mut merges = Vec::new();
        for step in 0..n.saturating_sub(1) {
            let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
            for (x, &i) in live.iter().enumerate() {
                for &j in &live[x + 1..] {
                    let (a, b) = (i.min(j), i.max(j));
                    if d[a][b] < best.0 || (d[a][b] == best.0 && (a, b) < (best.1, best.2)) {
                        best = (d[a][b], a, b);
                    }
                }
            }
            let (h, a, b) = best;
            let new = n + step;
            live.retain(|&c| c != a && c != b);
            for &k in &live {
                let t = (size[a] + size[b] + size[k]) as f64;
                let v = ((size[a] + size[k]) as f64 * d[a.min(k)][a.max(k)]
                    + (size[b] + size[k]) as f64 * d[b.min(k)][b.max(k)]
                    - size[k] as f64 * h)
                    / t;
                d[k][new] = v;
                d[new][k] = v;
            }
            size[new] = size[a] + size[b];
            live.push(new);
            merges.push(OracleMerge { a, b, height: h });
        }
        merges
    }

    /// Per-class (recall, precision, F1) and support-weighted averages,
    /// recomputed by replaying every (actual, predicted) pair of the matrix.
    pub struct OracleMetrics {
        pub recall: Vec<f64>,
        pub precision: Vec<f64>,
        pub f1: Vec<f64>,
        pub weighted: (f64, f64, f64),
        pub accuracy: f64,
    }

    pub fn metrics_by_replay(counts: &[Vec<u64>]) -> OracleMetrics {
        let n = counts.len();
        let mut pairs = Vec::new();
        for (actual, row) in counts.iter().enumerate() {
            for (predicted, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    pairs.push((actual, predicted));
                }
            }
        }
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let mut recall = vec![0.0; n];
        let mut precision = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        let mut support = vec![0usize; n];
        for c in 0..n {
            let tp = pairs.iter().filter(|&&(a, p)| a == c && p == c).count();
            let fn_ = pairs.iter().filter(|&&(a, p)| a == c && p != c).count();
            let fp = pairs.iter().filter(|&&(a, p)| a != c && p == c).count();
            support[c] = tp + fn_;
            recall[c] = ratio(tp, tp + fn_);
            precision[c] = ratio(tp, tp + fp);
            f1[c] = if recall[c] + precision[c] == 0.0 {
                0.0
            } else {
                2.0 * recall[c] * precision[c] / (recall[c] + precision[c])
            };
        }
        let total: usize = support.iter().sum();
        let weigh = |v: &[f64]| {
            if total == 0 {
                0.0
            } else {
                v.iter()
                    .zip(&support)
                    .map(|(x, &s)| x * s as f64)
                    .sum::<f64>()
                    / total as f64
            }
        };
        let correct = pairs.iter().filter(|&&(a, p)| a == p).count();
        OracleMetrics {
            weighted: (weigh(&recall), weigh(&precision), weigh(&f1)),
            accuracy: ratio(correct, pairs.len()),
            recall,
            precision,
            f1,
        }
    }
}

pub mod gradcheck {
    //! Randomized gradient and convolution checks shared by the unit tests
    //! and the acceptance suite. Each case is fully determined by its seed.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::oracles::{naive_conv1d, numeric_gradient, relative_error};
    use crate::nn::{cross_entropy_loss, mse_loss, softmax, Layer, LayerSpec, Sequential, Tensor};

    pub const FD_STEP: f64 = 1e-5;
    pub const FD_TOLERANCE: f64 = 1e-4;

    /// Layer kinds in the order used by [`layer_gradient_error`].
    pub const LAYER_KINDS: [&str; 8] = [
        "dense",
        "conv1d",
        "maxpool",
        "relu",
        "dropout",
        "batchnorm",
        "flatten",
        "softmax",
    ];

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform(r: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-bound..bound)).collect()
    }

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn random_layer_case(kind: usize, r: &mut ChaCha8Rng) -> (LayerSpec, Vec<usize>) {
        let batch = r.gen_range(1..4);
        match kind {
            0 => {
                let (i, o) = (r.gen_range(1..7), r.gen_range(1..7));
                (
                    LayerSpec::Dense {
                        input: i,
                        output: o,
                    },
                    vec![batch, i],
                )
            }
            1 => {
                let (c, m, f, s) = (
                    r.gen_range(1..4),
                    r.gen_range(1..5),
                    r.gen_range(1..4),
                    r.gen_range(1..4),
                );
                let len = m + r.gen_range(0..10);
                (
                    LayerSpec::Conv1D {
                        in_channels: c,
                        filter_size: m,
                        filter_count: f,
                        stride: s,
                    },
                    vec![batch, c, len],
                )
            }
            2 => {
                let (size, stride) = (r.gen_range(1..4), r.gen_range(1..4));
                (
                    LayerSpec::MaxPool1D { size, stride },
                    vec![batch, r.gen_range(1..3), size + r.gen_range(0..8)],
                )
            }
            3 => (LayerSpec::ReLU, vec![batch, r.gen_range(1..10)]),
            4 => (
                LayerSpec::Dropout {
                    rate: r.gen_range(0.0..0.6),
                },
                vec![batch, r.gen_range(1..10)],
            ),
            5 => {
                let c = r.gen_range(1..4);
                let shape = if r.gen_bool(0.5) {
                    vec![batch + 1, c]
                } else {
                    vec![batch, c, r.gen_range(2..6)]
                };
                (LayerSpec::BatchNorm1D { channels: c }, shape)
            }
            6 => (
                LayerSpec::Flatten,
                vec![batch, r.gen_range(1..4), r.gen_range(1..5)],
            ),
            _ => (LayerSpec::Softmax, vec![batch, r.gen_range(1..8)]),
        }
    }

    /// Inputs away from ReLU's kink and without near-ties inside pooling
    /// windows, where finite differences would straddle a non-smooth point.
    fn safe_input(spec: &LayerSpec, n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        match spec {
            LayerSpec::MaxPool1D { .. } => {
                let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
                for i in (1..n).rev() {
                    levels.swap(i, r.gen_range(0..=i));
                }
                levels.iter().map(|v| v + r.gen_range(0.0..0.001)).collect()
            }
            LayerSpec::ReLU => (0..n)
                .map(|_| {
                    let v = r.gen_range(0.05..1.0);
                    if r.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
            _ => uniform(r, n, 1.0),
        }
    }

    /// Σ upstream ⊙ layer(x), with dropout masks drawn from a fixed seed.
    fn weighted_output(
        layer: &Layer<f64>,
        x: &[f64],
        shape: &[usize],
        upstream: &[f64],
        seed: u64,
    ) -> f64 {
        let mut l = layer.clone();
        let y = l
            .forward_train(&t64(shape.to_vec(), x.to_vec()), &mut rng(seed))
            .expect("forward");
        y.data().iter().zip(upstream).map(|(a, b)| a * b).sum()
    }

    /// Worst relative error between backprop and central differences over
    /// the input and parameter gradients of one random layer of `kind`.
    pub fn layer_gradient_error(kind: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let (spec, shape) = random_layer_case(kind, &mut r);
        let mut layer = Layer::<f64>::new(spec.clone(), &mut r).expect("valid spec");
        for p in layer.params_mut() {
            for v in p.value.data_mut() {
                *v += r.gen_range(-0.5..0.5);
            }
        }
        let n: usize = shape.iter().product();
        let x = safe_input(&spec, n, &mut r);
        let mut out_shape = vec![shape[0]];
        out_shape.extend(spec.output_shape(&shape[1..]).expect("valid geometry"));
        let upstream = uniform(&mut r, out_shape.iter().product(), 1.0);
        let drop_seed = r.gen();

        let mut analytic = layer.clone();
        analytic
            .forward_train(&t64(shape.clone(), x.clone()), &mut rng(drop_seed))
            .expect("forward");
        let dx = analytic
            .backward(&t64(out_shape, upstream.clone()))
            .expect("backward");

        let mut worst = 0.0f64;
        let numeric_dx = numeric_gradient(
            |xp| weighted_output(&layer, xp, &shape, &upstream, drop_seed),
            &x,
            FD_STEP,
        );
        for (a, b) in dx.data().iter().zip(&numeric_dx) {
            worst = worst.max(relative_error(*a, *b));
        }
        for (pi, param) in analytic.params().iter().enumerate() {
            let theta = layer.params()[pi].value.data().to_vec();
            let numeric = numeric_gradient(
                |tp| {
                    let mut probe = layer.clone();
                    probe.params_mut()[pi].value.data_mut().copy_from_slice(tp);
                    weighted_output(&probe, &x, &shape, &upstream, drop_seed)
                },
                &theta,
                FD_STEP,
            );
            for (a, b) in param.grad.data().iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *b));
            }
        }
        worst
    }

    /// Worst relative errors `(mse, cross_entropy)` for one random batch.
    /// The cross-entropy gradient is taken with respect to the logits fed
    /// through softmax.
    pub fn loss_gradient_errors(seed: u64) -> (f64, f64) {
        let mut r = rng(seed);
        let (batch, n) = (r.gen_range(1..5), r.gen_range(2..9));
        let shape = vec![batch, n];
        let pred = uniform(&mut r, batch * n, 2.0);
        let target = uniform(&mut r, batch * n, 2.0);
        let mse = |p: &[f64]| {
            mse_loss(
                &t64(shape.clone(), p.to_vec()),
                &t64(shape.clone(), target.clone()),
            )
            .expect("mse")
        };
        let (_, grad) = mse(&pred);
        let numeric = numeric_gradient(|p| mse(p).0, &pred, FD_STEP);
        let mse_err = grad
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);

        let logits = uniform(&mut r, batch * n, 3.0);
        let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..n)).collect();
        let ce = |z: &[f64]| {
            cross_entropy_loss(&softmax(&t64(shape.clone(), z.to_vec())), &labels).expect("ce")
        };
        let (_, grad) = ce(&logits);
        let numeric = numeric_gradient(|z| ce(z).0, &logits, FD_STEP);
        let ce_err = grad
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);
        (mse_err, ce_err)
    }

    /// Conv, pool, batch-norm and dropout in one tiny classifier over a
    /// single-channel input of length `len` (at least 5).
    pub fn small_cnn_specs(len: usize) -> Vec<LayerSpec> {
        let c1 = (len - 3) / 2 + 1;
        let pooled = (c1 - 2) / 2 + 1;
        vec![
            LayerSpec::Conv1D {
                in_channels: 1,
                filter_size: 3,
                filter_count: 2,
                stride: 2,
            },
            LayerSpec::ReLU,
            LayerSpec::MaxPool1D { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                input: 2 * pooled,
                output: 4,
            },
            LayerSpec::BatchNorm1D { channels: 4 },
            LayerSpec::ReLU,
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Dense {
                input: 4,
                output: 3,
            },
            LayerSpec::Softmax,
        ]
    }

    /// Input and first-layer weight gradients of a small CNN under
    /// cross-entropy, against central differences. Returns the worst
    /// relative error.
    pub fn network_gradient_error(seed: u64) -> f64 {
        let mut r = rng(seed);
        let len = r.gen_range(9..20);
        let net = Sequential::<f64>::new(vec![1, len], small_cnn_specs(len), &mut r)
            .expect("valid network");
        let batch = 3;
        let x = uniform(&mut r, batch * len, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..3)).collect();
        let drop_seed: u64 = r.gen();
        let loss = |net: &Sequential<f64>, x: &[f64]| {
            let mut n = net.clone();
            let p = n
                .forward_train(&t64(vec![batch, 1, len], x.to_vec()), &mut rng(drop_seed))
                .expect("forward");
            cross_entropy_loss(&p, &labels).expect("loss").0
        };
        let mut trained = net.clone();
        let p = trained
            .forward_train(&t64(vec![batch, 1, len], x.clone()), &mut rng(drop_seed))
            .expect("forward");
        let (_, g) = cross_entropy_loss(&p, &labels).expect("loss");
        let end = trained.layers().len() - 1;
        let dx = trained.backward_through(end, &g).expect("backward");

        let mut worst = 0.0f64;
        let numeric = numeric_gradient(|xp| loss(&net, xp), &x, FD_STEP);
        for (a, b) in dx.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *b));
        }
        let first_weights = net.layers()[0].params()[0].value.data().to_vec();
        let numeric = numeric_gradient(
            |w| {
                let mut probe = net.clone();
                probe.layers_mut()[0].params_mut()[0]
                    .value
                    .data_mut()
                    .copy_from_slice(w);
                loss(&probe, &x)
            },
            &first_weights,
            FD_STEP,
        );
        for (a, b) in trained.layers()[0].params()[0]
            .grad
            .data()
            .iter()
            .zip(&numeric)
        {
            worst = worst.max(relative_error(*a, *b));
        }
        worst
    }

    /// Outcome of one random convolution compared with [`naive_conv1d`].
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct ConvCase {
        /// The f64 layer reproduced the oracle bit for bit.
        pub exact_f64: bool,
        /// Worst `|y − oracle| / max(|oracle|, 1)` of the f32 layer.
        pub f32_error: f64,
    }

    /// A random convolution with input length ≤ 64, filter size ≤ 8 and
    /// stride ≤ 4, evaluated in both precisions.
    pub fn conv_oracle_case(seed: u64) -> ConvCase {
        let mut r = rng(seed);
        let (c, m, f, s) = (
            r.gen_range(1..4),
            r.gen_range(1..=8),
            r.gen_range(1..5),
            r.gen_range(1..=4),
        );
        let len = r.gen_range(m..=64);
        let batch = r.gen_range(1..3);
        let spec = LayerSpec::Conv1D {
            in_channels: c,
            filter_size: m,
            filter_count: f,
            stride: s,
        };
        let mut layer = Layer::<f64>::new(spec.clone(), &mut r).expect("valid spec");
        let bias = uniform(&mut r, f, 1.0);
        layer.params_mut()[1]
            .value
            .data_mut()
            .copy_from_slice(&bias);
        let w = layer.params()[0].value.data().to_vec();
        let x = uniform(&mut r, batch * c * len, 1.0);
        let out = layer
            .infer(&t64(vec![batch, c, len], x.clone()))
            .expect("forward");

        let mut narrow = Layer::<f32>::new(spec, &mut r).expect("valid spec");
        let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = bias.iter().map(|&v| v as f32).collect();
        narrow.params_mut()[0]
            .value
            .data_mut()
            .copy_from_slice(&w32);
        narrow.params_mut()[1]
            .value
            .data_mut()
            .copy_from_slice(&b32);
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let out32 = narrow
            .infer(&Tensor::new(vec![batch, c, len], x32.clone()).expect("shape"))
            .expect("forward");

        let per = out.len() / batch;
        let widen = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
        let (w_rounded, b_rounded) = (widen(&w32), widen(&b32));
        let mut case = ConvCase {
            exact_f64: true,
            f32_error: 0.0,
        };
        for b in 0..batch {
            let sample = b * c * len..(b + 1) * c * len;
            let expect = naive_conv1d(&x[sample.clone()], c, len, &w, f, m, &bias, s);
            case.exact_f64 &= out.data()[b * per..(b + 1) * per] == expect[..];
            let expect32 = naive_conv1d(
                &widen(&x32[sample]),
                c,
                len,
                &w_rounded,
                f,
                m,
                &b_rounded,
                s,
            );
            for (a, e) in out32.data()[b * per..(b + 1) * per].iter().zip(&expect32) {
                case.f32_error = case.f32_error.max((*a as f64 - e).abs() / e.abs().max(1.0));
            }
        }
        case
    }
}
