//! Confusion matrices, per-class recall/precision/F1 with support-weighted
//! averages, row normalization and Ward clustering of confusion rows.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::nn::{ModelState, NnError, Sequential, Tensor};

/// Rows per inference batch.
const PREDICT_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model has {model} classes, dataset has {dataset}")]
    ClassCountMismatch { model: usize, dataset: usize },
    #[error("cannot cut {n} leaves into {k} clusters")]
    InvalidK { k: usize, n: usize },
    #[error("matrix is not square ({rows} rows, row {row} has {len} columns)")]
    NotSquare { rows: usize, row: usize, len: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Scales raw byte rows to `[0, 1]` and stacks them into one batch with the
/// given per-sample shape.
pub fn input_batch(
    ds: &LabeledDataset,
    rows: &[usize],
    sample_shape: &[usize],
) -> Result<Tensor<f32>, NnError> {
    let mut data = Vec::with_capacity(rows.len() * ds.dim());
    for &r in rows {
        data.extend(ds.row(r).iter().map(|&b| f32::from(b) / 255.0));
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(sample_shape);
    Tensor::new(shape, data)
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> (usize, f32) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// `(class, confidence)` for each of `rows`, in order.
pub fn predict_rows(
    network: &Sequential<f32>,
    ds: &LabeledDataset,
    rows: &[usize],
) -> Result<Vec<(usize, f32)>, NnError> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(PREDICT_BATCH) {
        let probs = network.infer(&input_batch(ds, chunk, network.input_shape())?)?;
        let n = probs.shape()[1];
        out.extend(probs.data().chunks(n).map(argmax));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    /// `counts[actual][predicted]`
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        check_square(&counts)?;
        if counts.len() != classes.len() {
            return Err(EvalError::ClassCountMismatch {
                model: counts.len(),
                dataset: classes.len(),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn record(&mut self, actual: usize, predicted: usize) {
        self.counts[actual][predicted] += 1;
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// CSV with a header row of predicted classes and a leading column of
    /// actual classes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(&csv_field(name));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_square<T>(rows: &[Vec<T>]) -> Result<(), EvalError> {
    match rows.iter().position(|r| r.len() != rows.len()) {
        Some(row) => Err(EvalError::NotSquare {
            rows: rows.len(),
            row,
            len: rows[row].len(),
        }),
        None => Ok(()),
    }
}

/// Confusion matrix of `model` on every row of `test`.
pub fn confusion(model: &ModelState, test: &LabeledDataset) -> Result<ConfusionMatrix, EvalError> {
    let rows: Vec<usize> = (0..test.len()).collect();
    confusion_on(&model.network, test, &rows)
}

/// Confusion matrix of `network` on a subset of rows.
pub fn confusion_on(
    network: &Sequential<f32>,
    ds: &LabeledDataset,
    rows: &[usize],
) -> Result<ConfusionMatrix, EvalError> {
    let outputs = network.output_shape().iter().product::<usize>();
    if outputs != ds.classes().len() {
        return Err(EvalError::ClassCountMismatch {
            model: outputs,
            dataset: ds.classes().len(),
        });
    }
    let mut cm = ConfusionMatrix::new(ds.classes().to_vec());
    for (&r, (predicted, _)) in rows.iter().zip(predict_rows(network, ds, rows)?) {
        cm.record(ds.label(r), predicted);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub support: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the metric was reported as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub weighted_recall: f64,
    pub weighted_precision: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let n = cm.n_classes();
    let counts = cm.counts();
    let col_sums: Vec<u64> = (0..n).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let classes: Vec<ClassMetrics> = (0..n)
        .map(|i| {
            let tp = counts[i][i];
            let support: u64 = counts[i].iter().sum();
            let recall = ratio(tp, support);
            let precision = ratio(tp, col_sums[i]);
            let f1 = match (recall, precision) {
                (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ClassMetrics {
                class: cm.classes()[i].clone(),
                tp,
                fp: col_sums[i] - tp,
                fn_: support - tp,
                support,
                recall: recall.unwrap_or(0.0),
                precision: precision.unwrap_or(0.0),
                f1: f1.unwrap_or(0.0),
                undefined: recall.is_none() || precision.is_none(),
            }
        })
        .collect();
    let total = cm.total();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        }
    };
    let correct: u64 = (0..n).map(|i| counts[i][i]).sum();
    MetricsReport {
        weighted_recall: weighted(|c| c.recall),
        weighted_precision: weighted(|c| c.precision),
        weighted_f1: weighted(|c| c.f1),
        accuracy: ratio(correct, total).unwrap_or(0.0),
        total,
        classes,
    }
}

impl MetricsReport {
    /// `class,recall,precision,f1,support` rows plus the weighted average.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,recall,precision,f1,support\n");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&c.class),
                c.recall,
                c.precision,
                c.f1,
                c.support
            );
        }
        let _ = writeln!(
            out,
            "__weighted_average__,{},{},{},{}",
            self.weighted_recall, self.weighted_precision, self.weighted_f1, self.total
        );
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(0)
            .max(12);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>9}  {:>7}  {:>8}\n",
            "class", "recall", "precision", "f1", "support"
        );
        for c in &self.classes {
            let mark = if c.undefined { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>9.4}  {:>7.4}  {:>8}{mark}",
                c.class, c.recall, c.precision, c.f1, c.support
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.4}  {:>9.4}  {:>7.4}  {:>8}",
            "wtd. average",
            self.weighted_recall,
            self.weighted_precision,
            self.weighted_f1,
            self.total
        );
        let _ = writeln!(out, "accuracy: {:.4}", self.accuracy);
        if self.classes.iter().any(|c| c.undefined) {
            out.push_str("* zero denominator; metric reported as 0\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMatrix {
    pub classes: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Rows that had no samples and were left as zeros.
    pub empty_rows: Vec<usize>,
}

pub fn row_normalize(cm: &ConfusionMatrix) -> NormalizedMatrix {
    let mut empty_rows = Vec::new();
    let rows = cm
        .counts()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let sum: u64 = row.iter().sum();
            if sum == 0 {
                empty_rows.push(i);
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&v| v as f64 / sum as f64).collect()
            }
        })
        .collect();
    NormalizedMatrix {
        classes: cm.classes().to_vec(),
        rows,
        empty_rows,
    }
}

impl NormalizedMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.rows) {
            out.push_str(&csv_field(name));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`NormalizedMatrix::to_csv`] (or any square CSV
    /// of reals with a header row and a leading name column).
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty matrix file")?;
        let classes: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let values = line
                .split(',')
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| format!("row {}: bad number {v:?}", i + 1))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(values);
        }
        if rows.len() != classes.len() || rows.iter().any(|r| r.len() != classes.len()) {
            return Err(format!("expected a {0}x{0} matrix", classes.len()));
        }
        Ok(Self {
            classes,
            empty_rows: Vec::new(),
            rows,
        })
    }
}

/// How Ward's recurrence is applied to the Euclidean distances between rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WardVariant {
    /// The recurrence runs on squared distances, so each merge is the one
    /// with the smallest increase in within-cluster sum of squares. Heights
    /// are reported on the distance scale: `sqrt(2·|A||B|/(|A|+|B|))·‖c_A − c_B‖`.
    #[default]
    Squared,
    /// The recurrence runs on the plain distances, as R's
    /// `hclust(dist(x), "ward.D")` does.
    Unsquared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

/// Agglomerative merge list in the usual linkage encoding: leaves are
/// `0..n`, the cluster created by merge `i` is `n + i`, and each merge lists
/// the smaller id first.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Leaves in the left-to-right order of the drawn tree.
    pub fn leaf_order(&self) -> Vec<usize> {
        let n = self.leaves;
        if n == 0 {
            return Vec::new();
        }
        let mut order = Vec::with_capacity(n);
        let root = if self.merges.is_empty() {
            0
        } else {
            n + self.merges.len() - 1
        };
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            if node < n {
                order.push(node);
            } else {
                let m = &self.merges[node - n];
                stack.push(m.b);
                stack.push(m.a);
            }
        }
        order
    }

    /// Group id (0..k) for every leaf after undoing the last `k − 1` merges.
    /// Groups are numbered in order of their lowest leaf.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>, EvalError> {
        let n = self.leaves;
        if k == 0 || k > n {
            return Err(EvalError::InvalidK { k, n });
        }
        let mut parent: Vec<usize> = (0..n + self.merges.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (i, m) in self.merges.iter().take(n - k).enumerate() {
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            parent[ra] = n + i;
            parent[rb] = n + i;
        }
        let mut ids = std::collections::HashMap::new();
        Ok((0..n)
            .map(|leaf| {
                let root = find(&mut parent, leaf);
                let next = ids.len();
                *ids.entry(root).or_insert(next)
            })
            .collect())
    }

    /// One merge per line: `a b height`.
    pub fn to_text(&self) -> String {
        self.merges.iter().fold(String::new(), |mut out, m| {
            let _ = writeln!(out, "{} {} {}", m.a, m.b, m.height);
            out
        })
    }
}

/// Ward agglomerative clustering of `rows` under Euclidean distance.
///
/// Among equally close pairs the one with the smallest `(a, b)` cluster ids
/// merges first.
pub fn ward_linkage(rows: &[Vec<f64>], variant: WardVariant) -> Dendrogram {
    let n = rows.len();
    let mut d = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = match variant {
                WardVariant::Squared => sq,
                WardVariant::Unsquared => sq.sqrt(),
            };
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    // slot -> (cluster id, size); merged clusters reuse the lower slot
    let mut slots: Vec<Option<(usize, usize)>> = (0..n).map(|i| Some((i, 1))).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for i in 0..n {
            let Some((id_i, _)) = slots[i] else { continue };
            for j in i + 1..n {
                let Some((id_j, _)) = slots[j] else { continue };
                let key = (id_i.min(id_j), id_i.max(id_j));
                let better = match best {
                    None => true,
                    Some((bd, bkey, _, _)) => d[i][j] < bd || (d[i][j] == bd && key < bkey),
                };
                if better {
                    best = Some((d[i][j], key, i, j));
                }
            }
        }
        let (dij, (a, b), i, j) = best.expect("at least two live clusters");
        let (ni, nj) = (slots[i].unwrap().1, slots[j].unwrap().1);
        for k in 0..n {
            if k == i || k == j {
                continue;
            }
            let Some((_, nk)) = slots[k] else { continue };
            let total = (ni + nj + nk) as f64;
            let v =
                ((ni + nk) as f64 * d[i][k] + (nj + nk) as f64 * d[j][k] - nk as f64 * dij) / total;
            d[i][k] = v;
            d[k][i] = v;
        }
        slots[i] = Some((n + step, ni + nj));
        slots[j] = None;
        let height = match variant {
            WardVariant::Squared => dij.max(0.0).sqrt(),
            WardVariant::Unsquared => dij,
        };
        merges.push(Merge {
            a,
            b,
            height,
            size: ni + nj,
        });
    }
    Dendrogram { leaves: n, merges }
}

/// Clusters the rows of a row-normalized confusion matrix and cuts the tree
/// into `k` groups.
pub fn cluster_confusion(
    normalized: &[Vec<f64>],
    k: usize,
    variant: WardVariant,
) -> Result<(Dendrogram, Vec<usize>), EvalError> {
    check_square(normalized)?;
    if k == 0 || k > normalized.len() {
        return Err(EvalError::InvalidK {
            k,
            n: normalized.len(),
        });
    }
    let tree = ward_linkage(normalized, variant);
    let groups = tree.cut(k)?;
    Ok((tree, groups))
}

/// Paths of the files written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub confusion_csv: PathBuf,
    pub normalized_csv: PathBuf,
    pub table: PathBuf,
}

/// Writes `metrics.csv`, `confusion.csv`, `confusion_normalized.csv` and
/// `report.txt` into `dir`.
pub fn write_report(
    dir: &Path,
    cm: &ConfusionMatrix,
) -> Result<(MetricsReport, ReportFiles), EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    let report = metrics(cm);
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = ReportFiles {
        metrics_csv: dir.join("metrics.csv"),
        confusion_csv: dir.join("confusion.csv"),
        normalized_csv: dir.join("confusion_normalized.csv"),
        table: dir.join("report.txt"),
    };
    for (path, text) in [
        (&files.metrics_csv, report.to_csv()),
        (&files.confusion_csv, cm.to_csv()),
        (&files.normalized_csv, row_normalize(cm).to_csv()),
        (&files.table, report.to_table()),
    ] {
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok((report, files))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testing::oracles::{
        brute_force_ward, brute_force_ward_unsquared, metrics_by_replay,
    };

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn matrix(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(names(counts.len()), counts).unwrap()
    }

    fn random_counts(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u64>> {
        let sparse = r.gen_bool(0.3);
        (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if sparse && r.gen_bool(0.6) {
                            0
                        } else {
                            r.gen_range(0..40)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn equal_tp_fp_fn_example() {
        // class 0: TP 2, FN 1, FP 1
        let m = metrics(&matrix(vec![vec![2, 1], vec![1, 5]]));
        let c = &m.classes[0];
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
        assert!((c.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_matrix_scores_one() {
        let m = metrics(&matrix(vec![
            vec![10, 0, 0],
            vec![0, 10, 0],
            vec![0, 0, 10],
        ]));
        assert!(m
            .classes
            .iter()
            .all(|c| c.recall == 1.0 && c.precision == 1.0 && c.f1 == 1.0));
        assert_eq!((m.weighted_f1, m.accuracy), (1.0, 1.0));
    }

    #[test]
    fn absent_class_is_flagged() {
        let m = metrics(&matrix(vec![vec![3, 0], vec![0, 0]]));
        assert!(m.classes[1].undefined && !m.classes[0].undefined);
        assert_eq!(
            (m.classes[1].recall, m.classes[1].precision, m.classes[1].f1),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(m.weighted_f1, 1.0);
    }

    #[test]
    fn metrics_match_replay_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = r.gen_range(1..9);
            let counts = random_counts(&mut r, n);
            let got = metrics(&matrix(counts.clone()));
            let want = metrics_by_replay(&counts);
            for (i, c) in got.classes.iter().enumerate() {
                assert!((c.recall - want.recall[i]).abs() <= 1e-12);
                assert!((c.precision - want.precision[i]).abs() <= 1e-12);
                assert!((c.f1 - want.f1[i]).abs() <= 1e-12);
            }
            assert!((got.weighted_recall - want.weighted.0).abs() <= 1e-12);
            assert!((got.weighted_precision - want.weighted.1).abs() <= 1e-12);
            assert!((got.weighted_f1 - want.weighted.2).abs() <= 1e-12);
            assert!((got.accuracy - want.accuracy).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weighted_recall_is_accuracy(cells in prop::collection::vec(0u64..50, 1..=64)) {
            let n = (cells.len() as f64).sqrt() as usize;
            let counts: Vec<Vec<u64>> = cells[..n * n].chunks(n).map(<[u64]>::to_vec).collect();
            let m = metrics(&matrix(counts));
            prop_assert!((m.weighted_recall - m.accuracy).abs() <= 1e-12);
        }

        #[test]
        fn class_permutation_permutes_metrics(seed in any::<u64>(), n in 2usize..7) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let counts = random_counts(&mut r, n);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() { perm.swap(i, r.gen_range(0..=i)); }
            let permuted: Vec<Vec<u64>> = perm.iter().map(|&i| perm.iter().map(|&j| counts[i][j]).collect()).collect();
            let classes = names(n);
            let a = metrics(&ConfusionMatrix::from_counts(classes.clone(), counts).unwrap());
            let b = metrics(&ConfusionMatrix::from_counts(perm.iter().map(|&i| classes[i].clone()).collect(), permuted).unwrap());
            for (pos, &i) in perm.iter().enumerate() {
                prop_assert_eq!(&a.classes[i], &b.classes[pos]);
            }
            prop_assert!((a.weighted_f1 - b.weighted_f1).abs() <= 1e-12);
        }
    }

    #[test]
    fn row_normalization() {
        let nm = row_normalize(&matrix(vec![vec![2, 2], vec![0, 0]]));
        assert_eq!(nm.rows, vec![vec![0.5, 0.5], vec![0.0, 0.0]]);
        assert_eq!(nm.empty_rows, vec![1]);
        let id = row_normalize(&matrix(vec![vec![4, 0], vec![0, 9]]));
        assert_eq!(id.rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let nm = row_normalize(&matrix(random_counts(&mut r, 7)));
        for row in &nm.rows {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() <= 1e-12);
        }
        assert_eq!(
            NormalizedMatrix::from_csv(&nm.to_csv()).unwrap().rows,
            nm.rows
        );
    }

    #[test]
    fn identical_rows_merge_first_at_zero() {
        let rows = vec![
            vec![0.0, 1.0],
            vec![0.9, 0.1],
            vec![0.9, 0.1],
            vec![0.3, 0.5],
        ];
        let tree = ward_linkage(&rows, WardVariant::Squared);
        assert_eq!(
            (tree.merges[0].a, tree.merges[0].b, tree.merges[0].height),
            (1, 2, 0.0)
        );
    }

    #[test]
    fn separated_pairs_are_recovered() {
        let rows = vec![
            vec![0.9, 0.1, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
            vec![0.8, 0.2, 0.0, 0.0],
            vec![0.0, 0.1, 0.4, 0.5],
        ];
        let (_, groups) = cluster_confusion(&rows, 2, WardVariant::Squared).unwrap();
        assert_eq!(groups, vec![0, 1, 0, 1]);
        assert!(matches!(
            cluster_confusion(&rows, 5, WardVariant::Squared),
            Err(EvalError::InvalidK { .. })
        ));
        assert!(matches!(
            cluster_confusion(&rows, 0, WardVariant::Squared),
            Err(EvalError::InvalidK { .. })
        ));
    }

    fn check_against_oracle(rows: &[Vec<f64>], variant: WardVariant) {
        let tree = ward_linkage(rows, variant);
        let oracle = match variant {
            WardVariant::Squared => brute_force_ward(rows),
            WardVariant::Unsquared => brute_force_ward_unsquared(rows),
        };
        assert_eq!(tree.merges.len(), oracle.len());
        for (m, o) in tree.merges.iter().zip(&oracle) {
            assert_eq!((m.a, m.b), (o.a, o.b));
            assert!(
                (m.height - o.height).abs() <= 1e-9 * o.height.max(1.0),
                "{} vs {}",
                m.height,
                o.height
            );
        }
        for w in tree.merges.windows(2) {
            assert!(w[1].height >= w[0].height - 1e-12);
        }
    }

    #[test]
    fn ward_matches_brute_force_oracles() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        for n in 1..=10 {
            for _ in 0..40 {
                let raw = random_counts(&mut r, n);
                let rows = row_normalize(&matrix(raw)).rows;
                check_against_oracle(&rows, WardVariant::Squared);
                check_against_oracle(&rows, WardVariant::Unsquared);
                let dense: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| r.gen::<f64>()).collect())
                    .collect();
                check_against_oracle(&dense, WardVariant::Squared);
                check_against_oracle(&dense, WardVariant::Unsquared);
            }
        }
    }

    #[test]
    fn cut_and_leaf_order() {
        let rows: Vec<Vec<f64>> = [0.0, 0.1, 5.0, 5.2, 20.0]
            .iter()
            .map(|&v| vec![v])
            .collect();
        let tree = ward_linkage(&rows, WardVariant::Squared);
        assert_eq!(tree.cut(1).unwrap(), vec![0; 5]);
        assert_eq!(tree.cut(5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(tree.cut(3).unwrap(), vec![0, 0, 1, 1, 2]);
        let mut order = tree.leaf_order();
        assert_eq!(order.len(), 5);
        order.sort();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
        assert_eq!(tree.to_text().lines().count(), 4);
        let first = tree.to_text().lines().next().unwrap().to_string();
        assert!(first.starts_with("0 1 "), "{first}");
    }

    #[test]
    fn seventeen_classes_cut_into_seven() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let rows = row_normalize(&matrix(random_counts(&mut r, 17))).rows;
        let (_, groups) = cluster_confusion(&rows, 7, WardVariant::Squared).unwrap();
        let distinct: std::collections::BTreeSet<_> = groups.iter().collect();
        assert_eq!(distinct.len(), 7);
    }

    #[test]
    fn report_layout() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for n in [17, 12] {
            let m = metrics(&matrix(random_counts(&mut r, n)));
            let csv = m.to_csv();
            assert_eq!(csv.lines().count(), n + 2);
            assert_eq!(
                csv.lines().next(),
                Some("class,recall,precision,f1,support")
            );
            assert!(csv
                .lines()
                .last()
                .unwrap()
                .starts_with("__weighted_average__,"));
        }
        let dir = tempfile::tempdir().unwrap();
        let empty = ConfusionMatrix::new(names(3));
        assert!(matches!(
            write_report(dir.path(), &empty),
            Err(EvalError::EmptyTestSet)
        ));
        let (_, files) = write_report(dir.path(), &matrix(vec![vec![1, 0], vec![1, 1]])).unwrap();
        let confusion = fs::read_to_string(files.confusion_csv).unwrap();
        assert_eq!(confusion, "actual\\predicted,c0,c1\nc0,1,0\nc1,1,1\n");
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), (1, 0.4));
        assert_eq!(argmax(&[0.5, 0.5]).0, 0);
    }
}
