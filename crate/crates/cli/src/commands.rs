use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use deep_packet::dataset::{
    build_dataset, split, undersample_with_ratio, LabelScheme, LabeledDataset, SplitDataset,
};
use deep_packet::eval::{self, cluster_confusion, NormalizedMatrix};
use deep_packet::models::{
    cnn_layers, grid_search, leaderboard_csv, train_cnn, train_sae, EpochRecord, GridSpec, Phase,
    TrainConfig, TrainRun,
};
use deep_packet::nn::ModelState;
use deep_packet::pcap::CaptureSource;
use deep_packet::preprocess::{preprocess_capture_with, DiscardReason, DiscardStats, VECTOR_LEN};
use serde_json::json;

use crate::output::{csv_field, table, temp_path, with_suffix, write_atomic, Logger};
use crate::{
    derive_seed, ClusterArgs, Command, EvaluateArgs, Failure, GridSearchArgs, MakeDatasetArgs,
    ModelKind, PredictArgs, PreprocessArgs, RowsArg, TrainArgs,
};

type Outcome = Result<(), Failure>;

pub(crate) fn dispatch(
    command: Command,
    seed: u64,
    out: &mut dyn Write,
    log: &mut Logger,
) -> Outcome {
    match command {
        Command::Preprocess(a) => preprocess(a, out, log),
        Command::MakeDataset(a) => make_dataset(a, seed, out, log),
        Command::Train(a) => train(a, seed, out, log),
        Command::Evaluate(a) => evaluate(a, out, log),
        Command::Predict(a) => predict(a, out, log),
        Command::GridSearch(a) => grid(a, seed, out, log),
        Command::ClusterConfusion(a) => cluster(a, out, log),
    }
}

fn io_fail(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::User(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(io_fail(path))
}

fn emit(out: &mut dyn Write, text: &str) -> Outcome {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::User(format!("cannot write output: {e}")))
}

fn stats_row(name: String, stats: &DiscardStats) -> Vec<String> {
    let mut row = vec![name, stats.kept.to_string()];
    row.extend(
        DiscardReason::ALL
            .iter()
            .map(|r| stats.discarded(*r).to_string()),
    );
    row
}

fn stats_table(rows: &[Vec<String>]) -> String {
    let mut header = vec!["capture", "kept"];
    header.extend(DiscardReason::ALL.iter().map(|r| r.name()));
    table(&header, rows)
}

// ---- preprocess ----

fn preprocess(args: PreprocessArgs, out: &mut dyn Write, log: &mut Logger) -> Outcome {
    let mut targets = Vec::with_capacity(args.pcap.len());
    let mut seen = HashSet::new();
    for pcap in &args.pcap {
        let stem = pcap
            .file_stem()
            .ok_or_else(|| Failure::user(format!("{}: not a file path", pcap.display())))?;
        if !seen.insert(stem.to_os_string()) {
            return Err(Failure::user(format!(
                "two inputs share the name {:?}; their vector files would collide",
                stem
            )));
        }
        let mut name = stem.to_os_string();
        name.push(".vec");
        targets.push((pcap.as_path(), args.out.join(name)));
    }
    fs::create_dir_all(&args.out).map_err(io_fail(&args.out))?;

    let mut written: Vec<&Path> = Vec::new();
    let mut rows = Vec::new();
    let mut total = DiscardStats::default();
    for (pcap, dest) in &targets {
        match vectorize_capture(pcap, dest) {
            Ok(stats) => {
                written.push(dest);
                log.info("capture", json!({ "path": pcap, "output": dest, "kept": stats.kept, "discarded": stats.total_discarded() }));
                total.merge(&stats);
                rows.push(stats_row(pcap.display().to_string(), &stats));
            }
            Err(e) => {
                for path in written {
                    let _ = fs::remove_file(path);
                }
                return Err(e);
            }
        }
    }
    if targets.len() > 1 {
        rows.push(stats_row("total".into(), &total));
    }
    emit(out, &stats_table(&rows))
}

/// Streams the kept vectors of one capture into `dest` as concatenated
/// 1500-byte records.
fn vectorize_capture(pcap: &Path, dest: &Path) -> Result<DiscardStats, Failure> {
    let mut source = CaptureSource::open(pcap)?;
    let tmp = temp_path(dest);
    let result = (|| {
        let mut writer = BufWriter::new(File::create(&tmp).map_err(io_fail(&tmp))?);
        let mut write_error = None;
        let stats = preprocess_capture_with(&mut source, |v| {
            if write_error.is_none() {
                write_error = writer.write_all(v.bytes()).err();
            }
        })?;
        if let Some(e) = write_error {
            return Err(io_fail(&tmp)(e));
        }
        writer.flush().map_err(io_fail(&tmp))?;
        drop(writer);
        fs::rename(&tmp, dest).map_err(io_fail(dest))?;
        Ok(stats)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

// ---- make-dataset ----

/// Files named directly, plus the `.pcap` files of named directories in
/// name order.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for input in inputs {
        let meta = fs::metadata(input).map_err(io_fail(input))?;
        if meta.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(io_fail(input))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && p.extension()
                            .is_some_and(|x| x.eq_ignore_ascii_case("pcap"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

/// Location and content of the split record kept next to a dataset.
struct SplitRecord {
    seed: u64,
    sizes: [usize; 3],
}

const PART_NAMES: [&str; 3] = ["train", "validation", "test"];

fn split_record_path(dataset: &Path) -> PathBuf {
    with_suffix(dataset, ".split")
}

impl SplitRecord {
    fn to_text(&self) -> String {
        let mut text = format!("seed = {}\n", self.seed);
        for (name, size) in PART_NAMES.iter().zip(self.sizes) {
            text.push_str(&format!("{name} = {size}\n"));
        }
        text
    }

    fn parse(text: &str, path: &Path) -> Result<Self, Failure> {
        let bad = |what: &str| Failure::user(format!("{}: {what}", path.display()));
        let mut seed = None;
        let mut sizes = [None; 3];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key = value"))?;
            let value: u64 = value
                .trim()
                .parse()
                .map_err(|_| bad("value is not an integer"))?;
            match key.trim() {
                "seed" => seed = Some(value),
                k => {
                    let i = PART_NAMES
                        .iter()
                        .position(|p| *p == k)
                        .ok_or_else(|| bad("unknown key"))?;
                    sizes[i] = Some(value as usize);
                }
            }
        }
        match (seed, sizes) {
            (Some(seed), [Some(a), Some(b), Some(c)]) => Ok(Self {
                seed,
                sizes: [a, b, c],
            }),
            _ => Err(bad("incomplete split record")),
        }
    }
}

fn make_dataset(
    args: MakeDatasetArgs,
    seed: u64,
    out: &mut dyn Write,
    log: &mut Logger,
) -> Outcome {
    if !(args.balance_ratio >= 1.0 && args.balance_ratio.is_finite()) {
        return Err(Failure::user(
            "--balance-ratio must be a finite number of at least 1",
        ));
    }
    let scheme = match &args.scheme {
        Some(path) => LabelScheme::parse(args.task.into(), &read_text(path)?)?,
        None => args.task.into_scheme(),
    };
    let files = expand_inputs(&args.pcap)?;
    let mut captures = Vec::new();
    let mut unmatched = Vec::new();
    for file in files {
        match scheme.label(&file) {
            Some(class) => captures.push((file, class)),
            None => {
                log.warn("unmatched", json!({ "path": file }));
                unmatched.push(file);
            }
        }
    }
    if args.strict && !unmatched.is_empty() {
        return Err(Failure::user(format!(
            "{} capture(s) match no label rule",
            unmatched.len()
        )));
    }

    let (full, summaries) = build_dataset(&captures, scheme.classes())?;
    for s in &summaries {
        log.info(
            "capture",
            json!({ "path": s.path, "class": scheme.classes()[s.class], "kept": s.stats.kept, "discarded": s.stats.total_discarded() }),
        );
    }
    let before = full.class_counts();
    let empty: Vec<&str> = scheme
        .classes()
        .iter()
        .zip(&before)
        .filter(|(_, &n)| n == 0)
        .map(|(c, _)| c.as_str())
        .collect();
    let dataset = if !empty.is_empty() || !args.balance {
        full
    } else {
        undersample_with_ratio(&full, derive_seed(seed, "undersample"), args.balance_ratio)?
    };
    let after = dataset.class_counts();

    let header: Vec<&str> = if args.balance {
        vec!["class", "before", "after"]
    } else {
        vec!["class", "packets"]
    };
    let mut rows: Vec<Vec<String>> = scheme
        .classes()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut row = vec![c.clone(), before[i].to_string()];
            if args.balance {
                row.push(after[i].to_string());
            }
            row
        })
        .collect();
    let mut total = vec![
        "total".to_string(),
        before.iter().sum::<usize>().to_string(),
    ];
    if args.balance {
        total.push(after.iter().sum::<usize>().to_string());
    }
    rows.push(total);
    emit(out, &table(&header, &rows))?;

    if !empty.is_empty() {
        return Err(Failure::user(format!(
            "no packets for class(es): {}",
            empty.join(", ")
        )));
    }

    write_atomic(&args.out, &dataset.to_bytes()).map_err(io_fail(&args.out))?;
    let record_path = split_record_path(&args.out);
    if args.split {
        let split_seed = derive_seed(seed, "split");
        let parts = split(&dataset, split_seed);
        let record = SplitRecord {
            seed: split_seed,
            sizes: parts.parts().map(<[usize]>::len),
        };
        write_atomic(&record_path, record.to_text().as_bytes()).map_err(io_fail(&record_path))?;
        let line: Vec<String> = PART_NAMES
            .iter()
            .zip(record.sizes)
            .map(|(n, s)| format!("{n} {s}"))
            .collect();
        emit(out, &format!("split: {}\n", line.join(", ")))?;
    } else if record_path.exists() {
        // A stale record would describe a different dataset.
        fs::remove_file(&record_path).map_err(io_fail(&record_path))?;
    }
    log.info(
        "dataset",
        json!({ "path": args.out, "rows": dataset.len(), "classes": dataset.classes().len() }),
    );
    Ok(())
}

impl crate::TaskArg {
    fn into_scheme(self) -> LabelScheme {
        deep_packet::dataset::Task::from(self).default_scheme()
    }
}

/// The split named by `--split-seed`, else the one recorded by
/// `make-dataset --split`.
fn resolve_split(
    dataset_path: &Path,
    ds: &LabeledDataset,
    flag: Option<u64>,
) -> Result<SplitDataset, Failure> {
    if let Some(seed) = flag {
        return Ok(split(ds, seed));
    }
    let record_path = split_record_path(dataset_path);
    if !record_path.exists() {
        return Err(Failure::user(format!(
            "{} has no split record; rebuild it with --split or pass --split-seed",
            dataset_path.display()
        )));
    }
    let record = SplitRecord::parse(&read_text(&record_path)?, &record_path)?;
    let parts = split(ds, record.seed);
    if parts.parts().map(<[usize]>::len) != record.sizes {
        return Err(Failure::user(format!(
            "{} does not match the dataset it sits next to",
            record_path.display()
        )));
    }
    Ok(parts)
}

// ---- train ----

fn load_config(ds: &LabeledDataset, path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::for_classes(ds.classes());
    if let Some(path) = path {
        cfg.apply(&read_text(path)?)?;
    }
    cfg.sae.n_classes = ds.classes().len();
    cfg.cnn.n_classes = ds.classes().len();
    Ok(cfg)
}

fn epoch_json(r: &EpochRecord) -> serde_json::Value {
    let (phase, layer) = match r.phase {
        Phase::Pretrain(k) => ("pretrain", Some(k + 1)),
        Phase::Finetune => ("finetune", None),
    };
    let mut v = json!({
        "phase": phase,
        "epoch": r.epoch,
        "train_loss": r.train_loss,
        "validation_loss": r.validation_loss,
        "improved": r.improved,
    });
    if let Some(layer) = layer {
        v["layer"] = layer.into();
    }
    v
}

fn run_summary(run: &TrainRun) -> String {
    let phase = match run.phase {
        Phase::Pretrain(k) => format!("pretrain layer {}", k + 1),
        Phase::Finetune => "finetune".to_string(),
    };
    match (run.best_epoch, run.best_validation_loss) {
        (Some(epoch), Some(loss)) => format!(
            "{phase}: {} epoch(s), best validation loss {loss:.6} at epoch {epoch}\n",
            run.stop_epoch
        ),
        _ => format!("{phase}: {} epoch(s)\n", run.stop_epoch),
    }
}

fn train(args: TrainArgs, seed: u64, out: &mut dyn Write, log: &mut Logger) -> Outcome {
    let ds = LabeledDataset::load(&args.dataset)?;
    let cfg = load_config(&ds, args.config.as_deref())?;
    match args.model {
        ModelKind::Sae => cfg.sae.validate()?,
        ModelKind::Cnn => {
            cnn_layers(&cfg.cnn)?;
        }
    }
    let input_len = match args.model {
        ModelKind::Sae => cfg.sae.input_len,
        ModelKind::Cnn => cfg.cnn.input_len,
    };
    if ds.dim() != input_len {
        return Err(Failure::user(format!(
            "dataset rows have {} bytes, the configured model expects {input_len}",
            ds.dim()
        )));
    }
    let parts = resolve_split(&args.dataset, &ds, args.split_seed)?;
    let train_seed = derive_seed(seed, "train");
    log.info(
        "training",
        json!({ "model": format!("{:?}", args.model).to_lowercase(), "train_seed": train_seed, "rows": parts.parts().map(<[usize]>::len) }),
    );

    let mut epoch_log = String::new();
    let mut observer = |r: &EpochRecord| {
        let line = epoch_json(r);
        epoch_log.push_str(&line.to_string());
        epoch_log.push('\n');
        log.info("epoch", line);
    };
    let (network, runs) = match args.model {
        ModelKind::Sae => train_sae(&cfg.sae, &cfg.optim, &ds, &parts, train_seed, &mut observer)?,
        ModelKind::Cnn => {
            let (net, run) =
                train_cnn(&cfg.cnn, &cfg.optim, &ds, &parts, train_seed, &mut observer)?;
            (net, vec![run])
        }
    };
    let parameters = network.parameter_count();
    let model = ModelState {
        network,
        classes: ds.classes().to_vec(),
    };
    let image = model.to_bytes()?;
    write_atomic(&args.out, &image).map_err(io_fail(&args.out))?;
    let log_path = args.log.unwrap_or_else(|| with_suffix(&args.out, ".log"));
    write_atomic(&log_path, epoch_log.as_bytes()).map_err(io_fail(&log_path))?;

    let mut text: String = runs.iter().map(run_summary).collect();
    text.push_str(&format!(
        "wrote {} ({parameters} parameters)\n",
        args.out.display()
    ));
    emit(out, &text)
}

// ---- evaluate ----

fn load_model(path: &Path) -> Result<ModelState, Failure> {
    ModelState::load(path).map_err(|e| Failure::from(e).prefixed(path))
}

impl Failure {
    fn prefixed(self, path: &Path) -> Self {
        match self {
            Failure::User(m) => Failure::User(format!("{}: {m}", path.display())),
            Failure::Internal(m) => Failure::Internal(format!("{}: {m}", path.display())),
        }
    }
}

fn check_input_len(model: &ModelState, len: usize) -> Outcome {
    let expected: usize = model.network.input_shape().iter().product();
    if expected != len {
        return Err(Failure::user(format!(
            "model expects {expected}-byte inputs, got {len}"
        )));
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs, out: &mut dyn Write, log: &mut Logger) -> Outcome {
    let model = load_model(&args.model)?;
    let ds = LabeledDataset::load(&args.dataset)?;
    if model.classes.len() != ds.classes().len() {
        return Err(eval::EvalError::ClassCountMismatch {
            model: model.classes.len(),
            dataset: ds.classes().len(),
        }
        .into());
    }
    if model.classes != ds.classes() {
        log.warn(
            "class-names-differ",
            json!({ "model": model.classes, "dataset": ds.classes() }),
        );
    }
    check_input_len(&model, ds.dim())?;

    let has_split = args.split_seed.is_some() || split_record_path(&args.dataset).exists();
    let which = args.rows.unwrap_or(if has_split {
        RowsArg::Test
    } else {
        RowsArg::All
    });
    let rows: Vec<usize> = match which {
        RowsArg::All => (0..ds.len()).collect(),
        part => {
            let parts = resolve_split(&args.dataset, &ds, args.split_seed)?;
            match part {
                RowsArg::Train => parts.train,
                RowsArg::Validation => parts.validation,
                _ => parts.test,
            }
        }
    };
    log.info(
        "scoring",
        json!({ "rows": format!("{which:?}").to_lowercase(), "count": rows.len() }),
    );
    if rows.is_empty() {
        return Err(Failure::user("no rows to evaluate"));
    }
    let cm = eval::confusion_on(&model.network, &ds, &rows)?;
    let report = match &args.out {
        Some(dir) => {
            let (report, files) = eval::write_report(dir, &cm)?;
            log.info("report", json!({ "metrics": files.metrics_csv, "confusion": files.confusion_csv, "normalized": files.normalized_csv, "table": files.table }));
            report
        }
        None => eval::metrics(&cm),
    };
    emit(out, &report.to_table())
}

// ---- predict ----

fn predict(args: PredictArgs, out: &mut dyn Write, log: &mut Logger) -> Outcome {
    let model = load_model(&args.model)?;
    check_input_len(&model, VECTOR_LEN)?;
    let mut source = CaptureSource::open(&args.pcap)?;
    let mut packets = LabeledDataset::with_dim(model.classes.clone(), VECTOR_LEN);
    let mut indices = Vec::new();
    let mut push_error = None;
    let stats = preprocess_capture_with(&mut source, |v| {
        indices.push(v.source.as_ref().map_or(indices.len() as u64, |s| s.record));
        if let Err(e) = packets.push(v.bytes(), 0) {
            push_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = push_error {
        return Err(e.into());
    }
    log.info(
        "capture",
        json!({ "path": args.pcap, "kept": stats.kept, "discarded": stats.total_discarded() }),
    );
    let rows: Vec<usize> = (0..packets.len()).collect();
    let predictions = eval::predict_rows(&model.network, &packets, &rows)?;
    let mut text = String::new();
    for (index, (class, confidence)) in indices.iter().zip(predictions) {
        let name = model.classes.get(class).ok_or_else(|| {
            Failure::Internal(format!(
                "model produced class {class} of {}",
                model.classes.len()
            ))
        })?;
        text.push_str(&format!("{index},{},{confidence:.6}\n", csv_field(name)));
    }
    emit(out, &text)
}

// ---- grid-search ----

fn grid(args: GridSearchArgs, seed: u64, out: &mut dyn Write, log: &mut Logger) -> Outcome {
    let ds = LabeledDataset::load(&args.dataset)?;
    let cfg = load_config(&ds, args.config.as_deref())?;
    let spec = GridSpec::parse(&read_text(&args.grid)?, &cfg.cnn)?;
    spec.validate()?;
    if ds.dim() != cfg.cnn.input_len {
        return Err(Failure::user(format!(
            "dataset rows have {} bytes, the configured model expects {}",
            ds.dim(),
            cfg.cnn.input_len
        )));
    }
    let parts = resolve_split(&args.dataset, &ds, args.split_seed)?;
    log.info("grid", json!({ "configurations": spec.size(), "objective": format!("{:?}", args.objective).to_lowercase() }));
    let entries = grid_search(
        &spec,
        &cfg,
        &ds,
        &parts,
        args.objective.into(),
        derive_seed(seed, "train"),
    )?;
    for e in entries.iter().filter(|e| e.failure.is_some()) {
        log.warn("configuration-failed", json!({ "c1": [e.c1.size, e.c1.count, e.c1.stride], "c2": [e.c2.size, e.c2.count, e.c2.stride], "reason": e.failure }));
    }
    let csv = leaderboard_csv(&entries);
    write_atomic(&args.out, csv.as_bytes()).map_err(io_fail(&args.out))?;
    emit(out, &csv)
}

// ---- cluster-confusion ----

fn cluster(args: ClusterArgs, out: &mut dyn Write, log: &mut Logger) -> Outcome {
    let text = read_text(&args.matrix)?;
    let matrix = NormalizedMatrix::from_csv(&text)
        .map_err(|e| Failure::user(format!("{}: {e}", args.matrix.display())))?;
    let rows: Vec<Vec<f64>> = matrix
        .rows
        .iter()
        .map(|row| {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter().map(|v| v / sum).collect()
            } else {
                row.clone()
            }
        })
        .collect();
    if rows.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Failure::user(format!(
            "{}: entries must be finite and non-negative",
            args.matrix.display()
        )));
    }
    let (tree, groups) = cluster_confusion(&rows, args.k, args.ward_variant.into())?;

    fs::create_dir_all(&args.out).map_err(io_fail(&args.out))?;
    let dendrogram = args.out.join("dendrogram.txt");
    write_atomic(&dendrogram, tree.to_text().as_bytes()).map_err(io_fail(&dendrogram))?;
    let mut csv = String::from("class,group\n");
    for (name, g) in matrix.classes.iter().zip(&groups) {
        csv.push_str(&format!("{},{}\n", csv_field(name), g + 1));
    }
    let groups_path = args.out.join("groups.csv");
    write_atomic(&groups_path, csv.as_bytes()).map_err(io_fail(&groups_path))?;
    log.info(
        "clusters",
        json!({ "k": args.k, "dendrogram": dendrogram, "groups": groups_path }),
    );

    let mut listing = String::new();
    for g in 0..args.k {
        let members: Vec<&str> = matrix
            .classes
            .iter()
            .zip(&groups)
            .filter(|(_, &x)| x == g)
            .map(|(c, _)| c.as_str())
            .collect();
        listing.push_str(&format!("group {}: {}\n", g + 1, members.join(", ")));
    }
    emit(out, &listing)
}
