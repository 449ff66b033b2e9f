//! Architecture records: JSONL persistence, train/eval splits, synthetic
//! labels and sub-space statistics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cellgraph::{CellGraph, Op};
use crate::costmodel::{self, CostError, Skeleton};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("the store is empty")]
    EmptyStore,
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

/// One labelled architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchRecord {
    /// [`cell_id`] of `cell`.
    pub id: String,
    pub cell: CellGraph,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
    pub source: Source,
}

impl ArchRecord {
    pub fn new(cell: CellGraph, val_acc: f64, test_acc: Option<f64>, source: Source) -> Self {
        ArchRecord { id: cell_id(&cell), cell, val_acc, test_acc, source }
    }
}

fn digest(cell: &CellGraph) -> [u8; 32] {
    Sha256::digest(cell.to_string().as_bytes()).into()
}

/// Hex of the first 8 bytes of SHA-256 over the canonical cell text.
pub fn cell_id(cell: &CellGraph) -> String {
    digest(cell)[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    n: usize,
    adj: Vec<String>,
    ops: Vec<Op>,
    val_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_acc: Option<f64>,
    source: Source,
}

impl From<&ArchRecord> for RecordLine {
    fn from(r: &ArchRecord) -> Self {
        RecordLine {
            id: r.id.clone(),
            n: r.cell.n(),
            adj: r.cell.adjacency_rows(),
            ops: r.cell.ops().to_vec(),
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            source: r.source,
        }
    }
}

fn accuracy_ok(a: f64) -> bool {
    (0.0..=1.0).contains(&a)
}

fn parse_line(text: &str) -> Result<ArchRecord, String> {
    let line: RecordLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if line.adj.len() != line.n || line.ops.len() != line.n {
        return Err(format!("n = {} but {} adjacency rows and {} ops", line.n, line.adj.len(), line.ops.len()));
    }
    let adj: Vec<Vec<u8>> = line
        .adj
        .iter()
        .map(|row| {
            row.chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(format!("adjacency character {other:?}")),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let cell = CellGraph::validate(&adj, &line.ops).map_err(|e| e.to_string())?;
    if !accuracy_ok(line.val_acc) {
        return Err(format!("val_acc {} outside [0, 1]", line.val_acc));
    }
    if let Some(t) = line.test_acc.filter(|t| !accuracy_ok(*t)) {
        return Err(format!("test_acc {t} outside [0, 1]"));
    }
    Ok(ArchRecord::new(cell, line.val_acc, line.test_acc, line.source))
}

/// Reads one record per non-empty line. Cells are canonicalized and ids
/// recomputed; a canonical cell appearing twice is a schema error.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<ArchRecord>, StoreError> {
    let path = path.as_ref();
    let io_err = |source| StoreError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line).map_err(|msg| StoreError::Schema { line: idx + 1, msg })?;
        if !seen.insert(record.id.clone()) {
            return Err(StoreError::Schema { line: idx + 1, msg: format!("duplicate cell {}", record.id) });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_jsonl(records: &[ArchRecord], path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let io_err = |source| StoreError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let text = serde_json::to_string(&RecordLine::from(r)).expect("record serializes");
        writeln!(w, "{text}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Deterministic stand-in for measured accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub base: f64,
    /// Per IO-distance step beyond 1.
    pub dist_penalty: f64,
    /// Per CONV3X3 node.
    pub conv3_bonus: f64,
    /// Per MAXPOOL3X3 node.
    pub pool_penalty: f64,
    pub noise_amp: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            base: 0.92,
            dist_penalty: 0.012,
            conv3_bonus: 0.004,
            pool_penalty: 0.002,
            noise_amp: 0.005,
            clamp_lo: 0.5,
            clamp_hi: 0.95,
        }
    }
}

/// Noise in `[-amp, amp)` from the top 52 bits of the first 8 digest bytes.
fn hash_noise(cell: &CellGraph, amp: f64) -> f64 {
    let bytes: [u8; 8] = digest(cell)[..8].try_into().expect("8 bytes");
    let unit = (u64::from_be_bytes(bytes) >> 12) as f64 / (1u64 << 52) as f64;
    amp * (2.0 * unit - 1.0)
}

pub fn surrogate_label(cell: &CellGraph, cfg: &SurrogateConfig) -> f64 {
    let census = cell.op_census();
    let raw = cfg.base - cfg.dist_penalty * (cell.io_distance() as f64 - 1.0) + cfg.conv3_bonus * census.conv3x3 as f64
        - cfg.pool_penalty * census.maxpool3x3 as f64
        + hash_noise(cell, cfg.noise_amp);
    raw.clamp(cfg.clamp_lo, cfg.clamp_hi)
}

/// Records labelled by [`surrogate_label`].
pub fn synthetic_records(cells: impl IntoIterator<Item = CellGraph>, cfg: &SurrogateConfig) -> Vec<ArchRecord> {
    cells
        .into_iter()
        .map(|cell| {
            let y = surrogate_label(&cell, cfg);
            ArchRecord::new(cell, y, None, Source::Synthetic)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    #[default]
    Random,
    ByParams,
    ByFlops,
}

impl std::str::FromStr for SplitStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SplitStrategy::Random),
            "by_params" | "by-params" => Ok(SplitStrategy::ByParams),
            "by_flops" | "by-flops" => Ok(SplitStrategy::ByFlops),
            other => Err(format!("unknown split strategy {other:?}")),
        }
    }
}

/// Indices of the training and evaluation parts.
///
/// The training part has `round(fraction · N)` records, clamped to
/// `1..=N−1`. `Random` takes a seeded shuffle prefix; the sorted strategies
/// order records by total network params or FLOPs and take evenly strided
/// positions. Evaluation indices are ascending.
pub fn split_indices(
    records: &[ArchRecord],
    fraction: f64,
    strategy: SplitStrategy,
    seed: u64,
    skeleton: &Skeleton,
) -> Result<(Vec<usize>, Vec<usize>), StoreError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(StoreError::BadFraction(fraction));
    }
    let n = records.len();
    if n == 0 {
        return Err(StoreError::EmptyStore);
    }
    let m = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train: Vec<usize> = match strategy {
        SplitStrategy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(m);
            idx
        }
        SplitStrategy::ByParams | SplitStrategy::ByFlops => {
            let mut keyed = Vec::with_capacity(n);
            for (i, r) in records.iter().enumerate() {
                let (flops, params) = costmodel::network_totals(&r.cell, skeleton)?;
                let key = if strategy == SplitStrategy::ByParams { params } else { flops };
                keyed.push((key, i));
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| records[a.1].id.cmp(&records[b.1].id)));
            (0..m).map(|k| keyed[k * n / m].1).collect()
        }
    };
    let in_train: HashSet<usize> = train.iter().copied().collect();
    let eval = (0..n).filter(|i| !in_train.contains(i)).collect();
    Ok((train, eval))
}

pub fn split(
    records: &[ArchRecord],
    fraction: f64,
    strategy: SplitStrategy,
    seed: u64,
    skeleton: &Skeleton,
) -> Result<(Vec<ArchRecord>, Vec<ArchRecord>), StoreError> {
    let (train, eval) = split_indices(records, fraction, strategy, seed, skeleton)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| records[i].clone()).collect();
    Ok((pick(train), pick(eval)))
}

/// Statistics of one (uses CONV3X3, IO distance) group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceRow {
    pub has_conv3: bool,
    pub io_distance: usize,
    pub count: usize,
    pub best_acc: Option<f64>,
    pub mean_acc: Option<f64>,
}

/// Twelve rows: CONV3X3 yes then no, each with IO distance 1 to 6.
pub fn analyze_subspaces(records: &[ArchRecord]) -> Result<Vec<SubspaceRow>, StoreError> {
    if records.is_empty() {
        return Err(StoreError::EmptyStore);
    }
    let mut acc: Vec<(usize, f64, f64)> = vec![(0, f64::NEG_INFINITY, 0.0); 12];
    for r in records {
        let has_conv3 = r.cell.op_census().conv3x3 > 0;
        let d = r.cell.io_distance();
        let slot = if has_conv3 { 0 } else { 6 } + (d - 1);
        let e = &mut acc[slot];
        e.0 += 1;
        e.1 = e.1.max(r.val_acc);
        e.2 += r.val_acc;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(slot, (count, best, sum))| SubspaceRow {
            has_conv3: slot < 6,
            io_distance: slot % 6 + 1,
            count,
            best_acc: (count > 0).then_some(best),
            mean_acc: (count > 0).then(|| sum / count as f64),
        })
        .collect())
}

/// Plain-text rendering with accuracies in percent.
pub fn subspace_table(rows: &[SubspaceRow]) -> String {
    let mut out = format!("{:<6}{:>10}{:>10}{:>12}{:>12}\n", "3x3", "distance", "#model", "best acc", "average acc");
    let pct = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6}{:>10}{:>10}{:>12}{:>12}",
            if r.has_conv3 { "yes" } else { "no" },
            r.io_distance,
            r.count,
            pct(r.best_acc),
            pct(r.mean_acc)
        );
    }
    out
}
