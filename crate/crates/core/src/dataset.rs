//! Labeled packet datasets: labeling captures by file name, aggregating
//! their vectors, balancing by under-sampling, stratified splitting and a
//! checksummed on-disk format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "DPKT" | u16 version=1 | u16 class_count
//!        | class_count x (u16 byte length, UTF-8 name)
//!        | u32 dim | u64 row_count
//!        | row_count x (dim bytes, u16 label)
//!        | u64 CRC-64/XZ of everything before it
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::checksum::{crc64, verify_trailer, ByteReader};
use crate::pcap::{CaptureSource, PcapError};
use crate::preprocess::{preprocess_capture, DiscardStats, VECTOR_LEN};

const DATASET_MAGIC: &[u8; 4] = b"DPKT";
const DATASET_VERSION: u16 = 1;

/// Fractions of rows assigned to train, validation and test.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.64, 0.16, 0.20];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Capture(#[from] PcapError),
    #[error("{path}: not a dataset file")]
    BadMagic { path: PathBuf },
    #[error("{path}: format version {found}, expected {expected}")]
    FormatVersionMismatch {
        path: PathBuf,
        found: u16,
        expected: u16,
    },
    #[error("{path}: checksum mismatch (file truncated or corrupt)")]
    ChecksumMismatch { path: PathBuf },
    #[error("{path}: truncated record")]
    TruncatedRecord { path: PathBuf },
    #[error("class {0:?} has no rows")]
    EmptyClass(String),
    #[error("invalid label scheme: {0}")]
    InvalidScheme(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("row has {found} bytes, expected {expected}")]
    DimMismatch { found: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    AppIdentification,
    TrafficCharacterization,
}

impl Task {
    pub fn default_scheme(self) -> LabelScheme {
        match self {
            Task::AppIdentification => LabelScheme::app_identification(),
            Task::TrafficCharacterization => LabelScheme::traffic_characterization(),
        }
    }
}

/// Maps capture file names to classes: the first matching glob wins.
/// Matching is case-insensitive against the file name only.
#[derive(Debug, Clone)]
pub struct LabelScheme {
    pub task: Task,
    classes: Vec<String>,
    rules: Vec<(glob::Pattern, usize)>,
}

const APP_ID_RULES: &[(&str, &str)] = &[
    ("aim*", "AIM chat"),
    ("email*", "Email"),
    ("facebook*", "Facebook"),
    ("ftps*", "FTPS"),
    ("gmail*", "Gmail"),
    ("hangout*", "Hangouts"),
    ("icq*", "ICQ"),
    ("netflix*", "Netflix"),
    ("scp*", "SCP"),
    ("sftp*", "SFTP"),
    ("skype*", "Skype"),
    ("spotify*", "Spotify"),
    ("torrent*", "Torrent"),
    ("tor*", "Tor"),
    ("voipbuster*", "Voipbuster"),
    ("vimeo*", "Vimeo"),
    ("youtube*", "YouTube"),
];

const TRAFFIC_CHAR_CLASSES: &[&str] = &[
    "Chat",
    "Email",
    "File Transfer",
    "Streaming",
    "Torrent",
    "VoIP",
    "VPN: Chat",
    "VPN: File Transfer",
    "VPN: Email",
    "VPN: Streaming",
    "VPN: Torrent",
    "VPN: VoIP",
];

const TRAFFIC_CHAR_RULES: &[(&str, &str)] = &[
    ("vpn_*chat*", "VPN: Chat"),
    ("vpn_*audio*", "VPN: VoIP"),
    ("vpn_voipbuster*", "VPN: VoIP"),
    ("vpn_*email*", "VPN: Email"),
    ("vpn_*file*", "VPN: File Transfer"),
    ("vpn_ftps*", "VPN: File Transfer"),
    ("vpn_sftp*", "VPN: File Transfer"),
    ("vpn_scp*", "VPN: File Transfer"),
    ("vpn_netflix*", "VPN: Streaming"),
    ("vpn_spotify*", "VPN: Streaming"),
    ("vpn_vimeo*", "VPN: Streaming"),
    ("vpn_youtube*", "VPN: Streaming"),
    ("vpn_*torrent*", "VPN: Torrent"),
    ("*chat*", "Chat"),
    ("*audio*", "VoIP"),
    ("voipbuster*", "VoIP"),
    ("email*", "Email"),
    ("*file*", "File Transfer"),
    ("ftps*", "File Transfer"),
    ("sftp*", "File Transfer"),
    ("scp*", "File Transfer"),
    ("netflix*", "Streaming"),
    ("spotify*", "Streaming"),
    ("vimeo*", "Streaming"),
    ("youtube*", "Streaming"),
    ("*torrent*", "Torrent"),
];

impl LabelScheme {
    pub fn new(
        task: Task,
        classes: Vec<String>,
        rules: Vec<(String, usize)>,
    ) -> Result<Self, DatasetError> {
        for (i, name) in classes.iter().enumerate() {
            if classes[..i].contains(name) {
                return Err(DatasetError::InvalidScheme(format!(
                    "duplicate class {name:?}"
                )));
            }
        }
        if classes.len() > usize::from(u16::MAX) {
            return Err(DatasetError::InvalidScheme("too many classes".into()));
        }
        let rules = rules
            .into_iter()
            .map(|(glob, class)| {
                if class >= classes.len() {
                    return Err(DatasetError::InvalidScheme(format!(
                        "rule {glob:?} targets class {class}, only {} classes",
                        classes.len()
                    )));
                }
                let pattern = glob::Pattern::new(&glob.to_lowercase())
                    .map_err(|e| DatasetError::InvalidScheme(format!("glob {glob:?}: {e}")))?;
                Ok((pattern, class))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            task,
            classes,
            rules,
        })
    }

    fn from_table(task: Task, classes: &[&str], rules: &[(&str, &str)]) -> Self {
        let classes: Vec<String> = classes.iter().map(|s| s.to_string()).collect();
        let rules = rules
            .iter()
            .map(|(g, c)| {
                let idx = classes.iter().position(|x| x == c).expect("class listed");
                (g.to_string(), idx)
            })
            .collect();
        Self::new(task, classes, rules).expect("built-in scheme is valid")
    }

    /// The 17 application classes.
    pub fn app_identification() -> Self {
        let classes: Vec<&str> = APP_ID_RULES.iter().map(|(_, c)| *c).collect();
        Self::from_table(Task::AppIdentification, &classes, APP_ID_RULES)
    }

    /// The 12 traffic categories, VPN and non-VPN.
    pub fn traffic_characterization() -> Self {
        Self::from_table(
            Task::TrafficCharacterization,
            TRAFFIC_CHAR_CLASSES,
            TRAFFIC_CHAR_RULES,
        )
    }

    /// Parses `glob<TAB>class_name` lines. Classes are numbered in order of
    /// first appearance; blank lines and `#` comments are ignored.
    pub fn parse(task: Task, text: &str) -> Result<Self, DatasetError> {
        let mut classes: Vec<String> = Vec::new();
        let mut rules = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let (glob, class) = trimmed.split_once('\t').ok_or_else(|| {
                DatasetError::InvalidScheme(format!("line {}: expected glob<TAB>class", lineno + 1))
            })?;
            let class = class.trim();
            if glob.is_empty() || class.is_empty() {
                return Err(DatasetError::InvalidScheme(format!(
                    "line {}: empty glob or class",
                    lineno + 1
                )));
            }
            let idx = match classes.iter().position(|c| c == class) {
                Some(i) => i,
                None => {
                    classes.push(class.to_string());
                    classes.len() - 1
                }
            };
            rules.push((glob.to_string(), idx));
        }
        Self::new(task, classes, rules)
    }

    /// Serializes to the text form accepted by [`LabelScheme::parse`].
    /// Classes without rules are lost, so only round-trips for schemes where
    /// every class has a rule and first appearances follow class order.
    pub fn to_config_text(&self) -> String {
        self.rules
            .iter()
            .map(|(p, c)| format!("{}\t{}\n", p.as_str(), self.classes[*c]))
            .collect()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Class of the capture at `path`, or `None` when no rule matches.
    pub fn label(&self, path: &Path) -> Option<usize> {
        let name = path.file_name()?.to_string_lossy().to_lowercase();
        self.rules
            .iter()
            .find(|(p, _)| p.matches(&name))
            .map(|&(_, c)| c)
    }
}

/// Rows of raw vector bytes with class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    classes: Vec<String>,
    dim: usize,
    data: Vec<u8>,
    labels: Vec<u16>,
}

impl LabeledDataset {
    pub fn new(classes: Vec<String>) -> Self {
        Self::with_dim(classes, VECTOR_LEN)
    }

    pub fn with_dim(classes: Vec<String>, dim: usize) -> Self {
        Self {
            classes,
            dim,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[u8], label: usize) -> Result<(), DatasetError> {
        if row.len() != self.dim {
            return Err(DatasetError::DimMismatch {
                found: row.len(),
                expected: self.dim,
            });
        }
        if label >= self.classes.len() {
            return Err(DatasetError::LabelOutOfRange {
                label,
                classes: self.classes.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.labels.push(label as u16);
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| usize::from(l))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the given rows, in the given order, into a new dataset.
    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        let mut out = LabeledDataset::with_dim(self.classes.clone(), self.dim);
        out.data.reserve(rows.len() * self.dim);
        for &r in rows {
            out.data.extend_from_slice(self.row(r));
            out.labels.push(self.labels[r]);
        }
        out
    }

    /// Row indices grouped by class, ascending within each class.
    fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes.len()];
        for (i, l) in self.labels().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() + 2 * self.labels.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u16).to_le_bytes());
        for name in &self.classes {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        for (i, &label) in self.labels.iter().enumerate() {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(&label.to_le_bytes());
        }
        let crc = crc64(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(image: &[u8], path: &Path) -> Result<Self, DatasetError> {
        let truncated = || DatasetError::TruncatedRecord {
            path: path.to_path_buf(),
        };
        if image.len() < 8 {
            return Err(truncated());
        }
        if &image[..4] != DATASET_MAGIC {
            return Err(DatasetError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = u16::from_le_bytes([image[4], image[5]]);
        if version != DATASET_VERSION {
            return Err(DatasetError::FormatVersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let body = verify_trailer(image).ok_or_else(|| DatasetError::ChecksumMismatch {
            path: path.to_path_buf(),
        })?;
        let mut r = ByteReader::new(&body[6..]);
        let class_count = r.u16().ok_or_else(truncated)?;
        let mut classes = Vec::with_capacity(usize::from(class_count));
        for _ in 0..class_count {
            let len = r.u16().ok_or_else(truncated)?;
            let bytes = r.take(usize::from(len)).ok_or_else(truncated)?;
            let name = String::from_utf8(bytes.to_vec())
                .map_err(|_| DatasetError::InvalidScheme("class name is not UTF-8".into()))?;
            classes.push(name);
        }
        let dim = r.u32().ok_or_else(truncated)? as usize;
        let rows = r.u64().ok_or_else(truncated)?;
        let row_len = dim.checked_add(2).ok_or_else(truncated)?;
        if (r.remaining() as u64) != rows.saturating_mul(row_len as u64) {
            return Err(truncated());
        }
        let rows = rows as usize;
        let mut ds = LabeledDataset::with_dim(classes, dim);
        ds.data.reserve(rows * dim);
        ds.labels.reserve(rows);
        for _ in 0..rows {
            let row = r.take(dim).ok_or_else(truncated)?;
            let label = r.u16().ok_or_else(truncated)?;
            if usize::from(label) >= ds.classes.len() {
                return Err(DatasetError::LabelOutOfRange {
                    label: usize::from(label),
                    classes: ds.classes.len(),
                });
            }
            ds.data.extend_from_slice(row);
            ds.labels.push(label);
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let image = fs::read(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&image, path)
    }
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    ds.save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset, DatasetError> {
    LabeledDataset::load(path)
}

/// Per-file outcome of [`build_dataset`].
#[derive(Debug, Clone)]
pub struct CaptureSummary {
    pub path: PathBuf,
    pub class: usize,
    pub stats: DiscardStats,
}

/// Preprocesses each capture (in parallel) and appends its vectors in input
/// order, labeled with the paired class.
pub fn build_dataset(
    captures: &[(PathBuf, usize)],
    classes: &[String],
) -> Result<(LabeledDataset, Vec<CaptureSummary>), DatasetError> {
    for (_, class) in captures {
        if *class >= classes.len() {
            return Err(DatasetError::LabelOutOfRange {
                label: *class,
                classes: classes.len(),
            });
        }
    }
    let processed: Vec<Result<_, DatasetError>> = captures
        .par_iter()
        .map(|(path, _)| {
            let mut source = CaptureSource::open(path)?;
            Ok(preprocess_capture(&mut source)?)
        })
        .collect();
    let mut ds = LabeledDataset::new(classes.to_vec());
    let mut summaries = Vec::with_capacity(captures.len());
    for ((path, class), result) in captures.iter().zip(processed) {
        let (vectors, stats) = result?;
        for v in &vectors {
            ds.push(v.bytes(), *class)?;
        }
        summaries.push(CaptureSummary {
            path: path.clone(),
            class: *class,
            stats,
        });
    }
    Ok((ds, summaries))
}

/// Randomly drops rows of larger classes until every class has exactly the
/// minimum class count. Retained rows keep their relative order.
pub fn undersample(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset, DatasetError> {
    undersample_with_ratio(ds, seed, 1.0)
}

/// Like [`undersample`], but caps each class at `floor(min_count * balance_ratio)`
/// rows instead of exactly the minimum. `balance_ratio` must be ≥ 1.
pub fn undersample_with_ratio(
    ds: &LabeledDataset,
    seed: u64,
    balance_ratio: f64,
) -> Result<LabeledDataset, DatasetError> {
    assert!(balance_ratio >= 1.0, "balance_ratio must be at least 1");
    let by_class = ds.rows_by_class();
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(DatasetError::EmptyClass(ds.classes[empty].clone()));
    }
    let min = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let cap = ((min as f64) * balance_ratio).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; ds.len()];
    for rows in &by_class {
        if rows.len() <= cap {
            rows.iter().for_each(|&r| keep[r] = true);
        } else {
            for i in index::sample(&mut rng, rows.len(), cap) {
                keep[rows[i]] = true;
            }
        }
    }
    let kept: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(ds.subset(&kept))
}

/// Disjoint train/validation/test row indices into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitDataset {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn materialize(&self, ds: &LabeledDataset) -> [LabeledDataset; 3] {
        [
            ds.subset(&self.train),
            ds.subset(&self.validation),
            ds.subset(&self.test),
        ]
    }
}

/// Stratified seeded split into 64/16/20 parts. Every class's part sizes
/// and every part's total are within one row of the exact fractions.
pub fn split(ds: &LabeledDataset, seed: u64) -> SplitDataset {
    let by_class = ds.rows_by_class();
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let alloc = allocate_parts(&counts, &SPLIT_FRACTIONS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (mut rows, sizes) in by_class.into_iter().zip(alloc) {
        rows.shuffle(&mut rng);
        let mut start = 0;
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&rows[start..start + size]);
            start += size;
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    let [train, validation, test] = parts;
    SplitDataset {
        train,
        validation,
        test,
    }
}

/// Integer allocation of each class count over the fractions: every cell is
/// the floor or floor+1 of its exact share, rows sum to the class count and
/// column totals are within one of their exact share.
fn allocate_parts(counts: &[usize], fractions: &[f64; 3]) -> Vec<[usize; 3]> {
    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(counts.len());
    let mut residual_rows = Vec::with_capacity(counts.len());
    let mut column_residual = [0.0f64; 3];
    for &n in counts {
        let mut cell = [0usize; 3];
        for p in 0..3 {
            let exact = n as f64 * fractions[p];
            cell[p] = exact.floor() as usize;
            column_residual[p] += exact - exact.floor();
        }
        let r = n - cell.iter().sum::<usize>();
        alloc.push(cell);
        residual_rows.push(r);
    }
    // Column demands: largest-remainder rounding of the residual totals.
    let total: usize = residual_rows.iter().sum();
    let mut demand = [0usize; 3];
    for p in 0..3 {
        demand[p] = column_residual[p].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = column_residual[a] - column_residual[a].floor();
        let fb = column_residual[b] - column_residual[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut short = total.saturating_sub(demand.iter().sum());
    for &p in order.iter().cycle() {
        if short == 0 {
            break;
        }
        demand[p] += 1;
        short -= 1;
    }
    // Hand out each class's leftover rows to the parts with the largest
    // remaining demand, classes with more leftovers first.
    let mut class_order: Vec<usize> = (0..counts.len()).collect();
    class_order.sort_by(|&a, &b| residual_rows[b].cmp(&residual_rows[a]).then(a.cmp(&b)));
    for c in class_order {
        let mut parts = [0usize, 1, 2];
        parts.sort_by(|&a, &b| demand[b].cmp(&demand[a]).then(a.cmp(&b)));
        for &p in parts.iter().take(residual_rows[c]) {
            alloc[c][p] += 1;
            demand[p] = demand[p].saturating_sub(1);
        }
    }
    alloc
}
