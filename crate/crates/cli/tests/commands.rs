mod common;

use std::fs;
use std::path::Path;

use common::*;
use deep_packet::dataset::LabeledDataset;
use deep_packet::eval::ConfusionMatrix;
use deep_packet::nn::{LayerSpec, ModelState, Sequential};
use deep_packet::testing::packets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

const THREE: [&str; 3] = ["alpha", "beta", "gamma"];

fn count_in_row(table: &str, row: &str, column: &str) -> u64 {
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    let col = header.iter().position(|h| *h == column).unwrap();
    let line = lines.find(|l| l.starts_with(row)).unwrap();
    let cells: Vec<&str> = line[row.len()..].split_whitespace().collect();
    cells[col - 1].parse().unwrap()
}

fn weighted_f1(metrics_csv: &str) -> f64 {
    let row = metrics_csv
        .lines()
        .find(|l| l.starts_with("__weighted_average__"))
        .unwrap();
    row.split(',').nth(3).unwrap().parse().unwrap()
}

#[test]
fn preprocess_reports_three_packet_accounting() {
    let dir = tempdir().unwrap();
    let pcap = dir.path().join("three.pcap");
    three_packet_pcap(&pcap);
    let out_dir = dir.path().join("vectors");
    let out = invoke(&[
        "preprocess",
        "--pcap",
        path_str(&pcap),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let row = pcap.display().to_string();
    assert_eq!(count_in_row(&out.stdout, &row, "kept"), 1);
    assert_eq!(count_in_row(&out.stdout, &row, "HandshakeNoPayload"), 1);
    assert_eq!(count_in_row(&out.stdout, &row, "DNS"), 1);
    assert_eq!(fs::read(out_dir.join("three.vec")).unwrap().len(), 1500);
}

#[test]
fn preprocess_matches_golden_vectors() {
    let dir = tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let out = invoke(&[
        "preprocess",
        "--pcap",
        path_str(&fixtures.join("corpus_ethernet.pcap")),
        path_str(&fixtures.join("corpus_rawip.pcap")),
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    for name in ["corpus_ethernet", "corpus_rawip"] {
        let produced = fs::read(dir.path().join(format!("{name}.vec"))).unwrap();
        let golden = fs::read(fixtures.join(format!("{name}.vec"))).unwrap();
        assert!(
            produced == golden,
            "{name} differs from the checked-in vectors"
        );
    }
    assert!(out.stdout.lines().any(|l| l.starts_with("total")));
}

#[test]
fn preprocess_empty_capture_keeps_nothing() {
    let dir = tempdir().unwrap();
    let pcap = dir.path().join("empty.pcap");
    fs::write(
        &pcap,
        packets::pcap_bytes(deep_packet::pcap::LinkType::Ethernet, &[]),
    )
    .unwrap();
    let out = invoke(&[
        "preprocess",
        "--pcap",
        path_str(&pcap),
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(
        count_in_row(&out.stdout, &pcap.display().to_string(), "kept"),
        0
    );
    assert!(fs::read(dir.path().join("empty.vec")).unwrap().is_empty());
}

#[test]
fn preprocess_missing_input_names_the_path() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("nowhere.pcap");
    let out = invoke(&[
        "preprocess",
        "--pcap",
        path_str(&missing),
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("nowhere.pcap"));
}

#[test]
fn preprocess_failure_removes_earlier_outputs() {
    let dir = tempdir().unwrap();
    let good = dir.path().join("good.pcap");
    three_packet_pcap(&good);
    let bad = dir.path().join("bad.pcap");
    fs::write(&bad, b"this is not a capture file at all").unwrap();
    let out_dir = dir.path().join("vectors");
    let out = invoke(&[
        "preprocess",
        "--pcap",
        path_str(&good),
        path_str(&bad),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.code, 1);
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 0);
}

#[test]
fn make_dataset_balances_classes() {
    let dir = tempdir().unwrap();
    let (files, scheme) = synthetic_corpus(dir.path(), &THREE, 40, 3);
    // Unequal classes: add a second capture for alpha.
    let extra = dir.path().join("alpha_more.pcap");
    fs::copy(&files[0], &extra).unwrap();
    let dataset = dir.path().join("d.dpk");
    let out = invoke(&[
        "make-dataset",
        "--pcap",
        path_str(dir.path()),
        "--scheme",
        path_str(&scheme),
        "--balance",
        "--out",
        path_str(&dataset),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(count_in_row(&out.stdout, "Alpha", "before"), 80);
    for class in ["Alpha", "Beta", "Gamma"] {
        assert_eq!(count_in_row(&out.stdout, class, "after"), 40);
    }
    let ds = LabeledDataset::load(&dataset).unwrap();
    assert_eq!(ds.class_counts(), vec![40, 40, 40]);
    assert!(!Path::new(&format!("{}.split", dataset.display())).exists());

    let looser = invoke(&[
        "make-dataset",
        "--pcap",
        path_str(dir.path()),
        "--scheme",
        path_str(&scheme),
        "--balance",
        "--balance-ratio",
        "1.5",
        "--out",
        path_str(&dataset),
    ]);
    assert_eq!(looser.code, 0, "{}", looser.stderr);
    assert_eq!(
        LabeledDataset::load(&dataset).unwrap().class_counts(),
        vec![60, 40, 40]
    );
    let bad = invoke(&[
        "make-dataset",
        "--pcap",
        path_str(dir.path()),
        "--balance",
        "--balance-ratio",
        "0.5",
        "--out",
        path_str(&dataset),
    ]);
    assert_eq!(bad.code, 1);
}

#[test]
fn make_dataset_with_default_app_scheme_lists_seventeen_classes() {
    let dir = tempdir().unwrap();
    let prefixes = [
        "aim_chat",
        "email",
        "facebook",
        "ftps",
        "gmail",
        "hangouts",
        "icq",
        "netflix",
        "scp",
        "sftp",
        "skype",
        "spotify",
        "torrent",
        "tor",
        "voipbuster",
        "vimeo",
        "youtube",
    ];
    let (_, _) = synthetic_corpus(dir.path(), &prefixes, 3, 5);
    let out = invoke(&[
        "make-dataset",
        "--pcap",
        path_str(dir.path()),
        "--task",
        "app",
        "--out",
        path_str(&dir.path().join("app.dpk")),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let rows: Vec<&str> = out
        .stdout
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("total"))
        .collect();
    assert_eq!(rows.len(), 17);
    assert!(
        rows.iter().all(|r| r.trim_end().ends_with(" 3")),
        "{}",
        out.stdout
    );
}

#[test]
fn unmatched_captures_are_reported_and_strict_fails() {
    let dir = tempdir().unwrap();
    let (files, scheme) = synthetic_corpus(dir.path(), &THREE, 5, 3);
    let stray = dir.path().join("zeta.pcap");
    fs::copy(&files[1], &stray).unwrap();
    let dataset = dir.path().join("d.dpk");
    let args = |strict: bool| {
        let mut a = vec![
            "make-dataset",
            "--pcap",
            path_str(dir.path()),
            "--scheme",
            path_str(&scheme),
        ];
        if strict {
            a.push("--strict");
        }
        a.extend(["--out", path_str(&dataset)]);
        a
    };
    let lenient = invoke(&args(false));
    assert_eq!(lenient.code, 0, "{}", lenient.stderr);
    assert!(lenient
        .log()
        .iter()
        .any(|l| l["event"] == "unmatched" && l["path"].as_str().unwrap().ends_with("zeta.pcap")));
    let strict = invoke(&args(true));
    assert_eq!(strict.code, 1);
}

#[test]
fn make_dataset_fails_on_an_empty_class() {
    let dir = tempdir().unwrap();
    let (_, _) = synthetic_corpus(dir.path(), &THREE, 5, 3);
    let scheme = write_config(
        dir.path(),
        "s.tsv",
        "alpha*\tAlpha\nbeta*\tBeta\nomega*\tOmega\n",
    );
    let dataset = dir.path().join("d.dpk");
    let out = invoke(&[
        "make-dataset",
        "--pcap",
        path_str(dir.path()),
        "--scheme",
        path_str(&scheme),
        "--out",
        path_str(&dataset),
    ]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("Omega"));
    assert!(!dataset.exists());
}

#[test]
fn cnn_training_writes_model_and_one_log_line_per_epoch() {
    let dir = tempdir().unwrap();
    let dataset = toy_dataset(dir.path(), &THREE, 60);
    let config = write_config(
        dir.path(),
        "cnn.cfg",
        &format!("{SMALL_CNN}cnn.epochs = 5\npatience = 50\n"),
    );
    let model = dir.path().join("cnn.model");
    let before = fs::read(&dataset).unwrap();
    let out = invoke(&[
        "train",
        "--model",
        "cnn",
        "--dataset",
        path_str(&dataset),
        "--config",
        path_str(&config),
        "--out",
        path_str(&model),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(ModelState::load(&model).is_ok());
    let log = fs::read_to_string(format!("{}.log", model.display())).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["phase"], "finetune");
        assert_eq!(l["epoch"], i + 1);
    }
    assert_eq!(
        fs::read(&dataset).unwrap(),
        before,
        "training modified its input"
    );
}

#[test]
fn sae_log_shows_pretraining_per_layer_then_finetuning() {
    let dir = tempdir().unwrap();
    let dataset = toy_dataset(dir.path(), &THREE, 30);
    let config = write_config(
        dir.path(),
        "sae.cfg",
        &format!("{SMALL_SAE}sae.pretrain_epochs = 2\nsae.finetune_epochs = 3\npatience = 50\n"),
    );
    let model = dir.path().join("sae.model");
    let out = invoke(&[
        "train",
        "--model",
        "sae",
        "--dataset",
        path_str(&dataset),
        "--config",
        path_str(&config),
        "--out",
        path_str(&model),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let log = fs::read_to_string(format!("{}.log", model.display())).unwrap();
    let phases: Vec<String> = log
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            match v["layer"].as_u64() {
                Some(k) => format!("pretrain{k}"),
                None => v["phase"].as_str().unwrap().to_string(),
            }
        })
        .collect();
    assert_eq!(
        phases,
        [
            "pretrain1",
            "pretrain1",
            "pretrain2",
            "pretrain2",
            "finetune",
            "finetune",
            "finetune"
        ]
    );
    assert!(out.stdout.contains("pretrain layer 2"));
}

#[test]
fn training_without_split_or_with_bad_config_fails_before_training() {
    let dir = tempdir().unwrap();
    let dataset = toy_dataset(dir.path(), &THREE, 10);
    let model = dir.path().join("m.model");
    let bad = write_config(dir.path(), "bad.cfg", "cnn.c1_size = 2000\n");
    let out = invoke(&[
        "train",
        "--model",
        "cnn",
        "--dataset",
        path_str(&dataset),
        "--config",
        path_str(&bad),
        "--out",
        path_str(&model),
    ]);
    assert_eq!(out.code, 1);
    assert!(!out.stderr.contains("\"epoch\""));
    let typo = write_config(dir.path(), "typo.cfg", "cnn.epochz = 3\n");
    let out = invoke(&[
        "train",
        "--model",
        "cnn",
        "--dataset",
        path_str(&dataset),
        "--config",
        path_str(&typo),
        "--out",
        path_str(&model),
    ]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("line 1"));

    fs::remove_file(format!("{}.split", dataset.display())).unwrap();
    let config = write_config(dir.path(), "cnn.cfg", SMALL_CNN);
    let out = invoke(&[
        "train",
        "--model",
        "cnn",
        "--dataset",
        path_str(&dataset),
        "--config",
        path_str(&config),
        "--out",
        path_str(&model),
    ]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("--split-seed"));
    assert!(!model.exists());
}

fn train_small_cnn(dir: &Path, dataset: &Path, epochs: usize) -> std::path::PathBuf {
    let config = write_config(
        dir,
        "cnn.cfg",
        &format!("{SMALL_CNN}cnn.epochs = {epochs}\n"),
    );
    let model = dir.join("cnn.model");
    let out = invoke(&[
        "train",
        "--model",
        "cnn",
        "--dataset",
        path_str(dataset),
        "--config",
        path_str(&config),
        "--out",
        path_str(&model),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    model
}

#[test]
fn evaluate_memorized_training_rows_scores_one() {
    let dir = tempdir().unwrap();
    let dataset = toy_dataset(dir.path(), &THREE, 60);
    let model = train_small_cnn(dir.path(), &dataset, 30);
    let report = dir.path().join("report");
    let out = invoke(&[
        "evaluate",
        "--model",
        path_str(&model),
        "--dataset",
        path_str(&dataset),
        "--rows",
        "train",
        "--out",
        path_str(&report),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let metrics = fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert_eq!(weighted_f1(&metrics), 1.0);
    for file in ["confusion.csv", "confusion_normalized.csv", "report.txt"] {
        assert!(report.join(file).exists());
    }
    assert!(out.stdout.contains("accuracy"));
}

#[test]
fn class_count_mismatch_is_a_user_error() {
    let dir = tempdir().unwrap();
    let dataset = toy_dataset(&dir.path().join("three"), &THREE, 20);
    let model = train_small_cnn(dir.path(), &dataset, 1);
    let other = toy_dataset(&dir.path().join("two"), &["alpha", "beta"], 20);
    let out = invoke(&[
        "evaluate",
        "--model",
        path_str(&model),
        "--dataset",
        path_str(&other),
    ]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("3 classes"));
}

#[test]
fn predict_emits_one_line_per_kept_packet() {
    let dir = tempdir().unwrap();
    let dataset = toy_dataset(dir.path(), &THREE, 20);
    let model = train_small_cnn(dir.path(), &dataset, 2);
    let pcap = dir.path().join("three.pcap");
    three_packet_pcap(&pcap);
    let out = invoke(&[
        "predict",
        "--model",
        path_str(&model),
        "--pcap",
        path_str(&pcap),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let lines: Vec<&str> = out.stdout.lines().collect();
    assert_eq!(lines.len(), 1);
    let fields: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(fields[0], "2");
    assert!(["Alpha", "Beta", "Gamma"].contains(&fields[1]));
    let confidence: f64 = fields[2].parse().unwrap();
    assert!((1.0 / 3.0..=1.0).contains(&confidence));
}

#[test]
fn non_finite_network_is_an_internal_error() {
    let dir = tempdir().unwrap();
    let specs = vec![
        LayerSpec::Dense {
            input: 1500,
            output: 2,
        },
        LayerSpec::Softmax,
    ];
    let mut net =
        Sequential::<f32>::new(vec![1500], specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    net.layers_mut()[0].params_mut()[0]
        .value
        .data_mut()
        .fill(f32::NAN);
    let model = dir.path().join("nan.model");
    ModelState {
        network: net,
        classes: vec!["a".into(), "b".into()],
    }
    .save(&model)
    .unwrap();
    let pcap = dir.path().join("three.pcap");
    three_packet_pcap(&pcap);
    let out = invoke(&[
        "predict",
        "--model",
        path_str(&model),
        "--pcap",
        path_str(&pcap),
    ]);
    assert_eq!(out.code, 2, "{}", out.stderr);
}

#[test]
fn grid_search_writes_a_ranked_leaderboard() {
    let dir = tempdir().unwrap();
    let dataset = toy_dataset(dir.path(), &THREE, 20);
    let config = write_config(
        dir.path(),
        "cnn.cfg",
        &format!("{SMALL_CNN}cnn.epochs = 2\n"),
    );
    let grid = write_config(
        dir.path(),
        "grid.txt",
        "c1_count = 2, 4\nc2_stride = 3, 600\n",
    );
    let board = dir.path().join("board.csv");
    let out = invoke(&[
        "grid-search",
        "--dataset",
        path_str(&dataset),
        "--config",
        path_str(&config),
        "--grid",
        path_str(&grid),
        "--out",
        path_str(&board),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let csv = fs::read_to_string(&board).unwrap();
    assert_eq!(csv, out.stdout);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("rank,objective"));
    assert!(lines[1].starts_with("1,"));
    // The 600-stride configurations cannot be built and rank last.
    assert!(
        lines[3].starts_with("3,NaN") && lines[4].starts_with("4,NaN"),
        "{csv}"
    );
    let log = out.log();
    let grid_event = log.iter().position(|l| l["event"] == "grid").unwrap();
    assert_eq!(log[grid_event]["configurations"], 4);
}

#[test]
fn cluster_confusion_cuts_seventeen_classes_into_seven_groups() {
    let dir = tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let names: Vec<String> = (0..17).map(|i| format!("app{i:02}")).collect();
    let counts: Vec<Vec<u64>> = (0..17)
        .map(|i| {
            (0..17)
                .map(|j| {
                    if i == j {
                        r.gen_range(50..100)
                    } else {
                        r.gen_range(0..15)
                    }
                })
                .collect()
        })
        .collect();
    let matrix = dir.path().join("confusion.csv");
    fs::write(
        &matrix,
        ConfusionMatrix::from_counts(names.clone(), counts)
            .unwrap()
            .to_csv(),
    )
    .unwrap();
    let out_dir = dir.path().join("clusters");
    let out = invoke(&[
        "cluster-confusion",
        "--matrix",
        path_str(&matrix),
        "--k",
        "7",
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let groups: Vec<&str> = out.stdout.lines().collect();
    assert_eq!(groups.len(), 7);
    let listed: usize = groups
        .iter()
        .map(|g| g.split_once(": ").unwrap().1.split(", ").count())
        .sum();
    assert_eq!(listed, 17);
    let csv = fs::read_to_string(out_dir.join("groups.csv")).unwrap();
    assert_eq!(csv.lines().count(), 18);
    assert_eq!(
        fs::read_to_string(out_dir.join("dendrogram.txt"))
            .unwrap()
            .lines()
            .count(),
        16
    );

    let out = invoke(&[
        "cluster-confusion",
        "--matrix",
        path_str(&matrix),
        "--k",
        "18",
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.code, 1);
}

#[test]
fn every_run_logs_seed_and_version() {
    let dir = tempdir().unwrap();
    let pcap = dir.path().join("three.pcap");
    three_packet_pcap(&pcap);
    let out = invoke(&[
        "--seed",
        "9",
        "preprocess",
        "--pcap",
        path_str(&pcap),
        "--out",
        path_str(dir.path()),
    ]);
    let log = out.log();
    assert_eq!(log[0]["event"], "start");
    assert_eq!(log[0]["seed"], 9);
    assert_eq!(log[0]["version"], deep_packet_cli::VERSION);
    assert_eq!(log.last().unwrap()["event"], "done");

    let failed = invoke(&[
        "predict",
        "--model",
        path_str(&dir.path().join("missing")),
        "--pcap",
        path_str(&pcap),
    ]);
    assert_eq!(failed.code, 1);
    let log = failed.log();
    assert_eq!(log[0]["seed"], 42);
    assert_eq!(log.last().unwrap()["level"], "error");
}
