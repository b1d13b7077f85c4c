//! Synthetic data, non-i.i.d. partitioning and flat-file ingestion.

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{Dataset, SampleLayout, Targets};
use crate::error::{Error, Result};

/// Attempts per sample before distinctness rejection gives up.
const MAX_REJECTIONS: usize = 1000;

/// Regression images with `‖x_i‖_F = q^(−1/2)`, pairwise-distinct inputs and targets
/// uniform in `[−C, C]`.
pub fn gen_synthetic(n: usize, channels: usize, pixels: usize, q: usize, label_bound: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || channels == 0 || pixels == 0 || q == 0 {
        return Err(Error::config("n, channels, pixels and patch width must be at least 1"));
    }
    if !(label_bound > 0.0 && label_bound.is_finite()) {
        return Err(Error::config_key("label_bound", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = channels * pixels;
    let target_norm = 1.0 / (q as f64).sqrt();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let mut rejected = 0;
    while rows.len() < n {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let row: Vec<f64> = if norm > 0.0 { raw.iter().map(|v| v * target_norm / norm).collect() } else { raw };
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let new_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || (new_norm - target_norm).abs() > 1e-12 || !seen.insert(key) {
            rejected += 1;
            if rejected > MAX_REJECTIONS * n {
                return Err(Error::Generation(format!("could not draw {n} distinct normalized samples")));
            }
            continue;
        }
        rows.push(row);
    }
    let features = Array2::from_shape_vec((n, dim), rows.concat()).map_err(|e| Error::dim(e.to_string()))?;
    let values = (0..n).map(|_| rng.random_range(-label_bound..=label_bound)).collect();
    Dataset::new(
        features,
        SampleLayout::Image { channels, pixels },
        Targets::Regression { values, bound: Some(label_bound) },
    )
}

/// Gaussian blobs for classification: sample `i` has label `i mod classes`. Centers and
/// noise are scaled by `1/√features`, so `E‖x‖² ≈ 1 + spread²` whatever the width.
pub fn gen_blobs(n: usize, features: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || features == 0 || classes == 0 {
        return Err(Error::config("n, features and classes must be at least 1"));
    }
    let per_dim = 1.0 / (features as f64).sqrt();
    let noise = Normal::new(0.0, spread * per_dim).map_err(|_| Error::config_key("spread", "must be non-negative"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Array2::from_shape_fn((classes, features), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        per_dim * z
    });
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = Array2::from_shape_fn((n, features), |(i, j)| centers[(labels[i], j)] + noise.sample(&mut rng));
    Dataset::new(x, SampleLayout::Flat, Targets::Classes { labels, num_classes: classes })
}

/// Converts integer-valued regression targets into class labels.
pub fn to_classification(data: Dataset) -> Result<Dataset> {
    let Targets::Regression { values, .. } = &data.targets else {
        return Ok(data);
    };
    let mut labels = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::Parse { row: i + 1, column: 1, msg: format!("label {v} is not a class index") });
        }
        labels.push(v as usize);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(data.features, data.layout, Targets::Classes { labels, num_classes })
}

/// Dominant categories of a shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardBias {
    pub dominant: Vec<usize>,
    pub beta: f64,
}

/// Client shards: `shards[k]` are the sample indices of shard `k` (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct ShardPlan {
    pub shards: Vec<Vec<usize>>,
    pub bias: Vec<ShardBias>,
}

impl ShardPlan {
    /// True when the shards are disjoint and cover `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.shards.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Category of every sample: its class, or for regression its target quantile band
/// (`bands` equal-count bands by rank).
fn categories(data: &Dataset, bands: usize) -> (Vec<usize>, usize) {
    match &data.targets {
        Targets::Classes { labels, num_classes } => (labels.clone(), *num_classes),
        Targets::Regression { values, .. } => {
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
            let mut cat = vec![0; values.len()];
            let n = values.len().max(1);
            for (rank, &i) in order.iter().enumerate() {
                cat[i] = rank * bands / n;
            }
            (cat, bands)
        }
    }
}

/// Splits the dataset into one shard per client. Each capacity level owns dominant
/// categories (round-robin); a shard takes `round(β·size)` samples from its level's
/// dominant pool first, then fills up uniformly from what is left.
pub fn partition_noniid(data: &Dataset, client_levels: &[usize], levels: usize, beta: f64, seed: u64) -> Result<ShardPlan> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config_key("bias", format!("{beta} is outside [0, 1]")));
    }
    if levels == 0 || client_levels.iter().any(|&l| l == 0 || l > levels) {
        return Err(Error::config_key("levels", "client levels must lie in 1..=levels"));
    }
    let clients = client_levels.len();
    let n = data.len();
    if clients == 0 || n < clients {
        return Err(Error::config(format!("{n} samples cannot fill {clients} shards")));
    }
    let (cat, num_cats) = categories(data, levels);
    if num_cats < levels {
        log::info!("{levels} levels share {num_cats} dominant categories round-robin");
    }
    let dominant: Vec<Vec<usize>> = (0..levels)
        .map(|k| {
            if num_cats >= levels {
                (0..num_cats).filter(|c| c % levels == k).collect()
            } else {
                vec![k % num_cats]
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = vec![false; n];
    let sizes: Vec<usize> = (0..clients).map(|k| n / clients + usize::from(k < n % clients)).collect();
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (k, &level) in client_levels.iter().enumerate() {
        let want = (beta * sizes[k] as f64).round() as usize;
        let doms = &dominant[level - 1];
        let mut pool: Vec<usize> = (0..n).filter(|&i| !assigned[i] && doms.contains(&cat[i])).collect();
        pool.shuffle(&mut rng);
        for &i in pool.iter().take(want) {
            assigned[i] = true;
            shards[k].push(i);
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !assigned[i]).collect();
    rest.shuffle(&mut rng);
    let mut it = rest.into_iter();
    for (k, shard) in shards.iter_mut().enumerate() {
        while shard.len() < sizes[k] {
            shard.push(it.next().expect("sizes sum to n"));
        }
        shard.sort_unstable();
    }
    let bias = client_levels
        .iter()
        .map(|&l| ShardBias { dominant: dominant[l - 1].clone(), beta })
        .collect();
    Ok(ShardPlan { shards, bias })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    /// Comma-separated text with a `label,f0,f1,…` header.
    Csv,
    /// `n` and `dim` as little-endian `u64`, then row-major `f64` features, then labels.
    Binary,
}

impl std::str::FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" | "text" => Ok(MatrixFormat::Csv),
            "bin" | "binary" => Ok(MatrixFormat::Binary),
            other => Err(Error::config_key("ingest_format", format!("unknown format `{other}`"))),
        }
    }
}

fn labels_of(data: &Dataset) -> Vec<f64> {
    match &data.targets {
        Targets::Regression { values, .. } => values.clone(),
        Targets::Classes { labels, .. } => labels.iter().map(|&l| l as f64).collect(),
    }
}

pub fn write_csv<W: Write>(mut out: W, data: &Dataset) -> Result<()> {
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..data.dim()).map(|j| format!("f{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (row, label) in data.features.outer_iter().zip(labels_of(data)) {
        let mut line = format!("{label:?}");
        for v in row {
            line.push(',');
            line.push_str(&format!("{v:?}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(mut out: W, data: &Dataset) -> Result<()> {
    out.write_all(&(data.len() as u64).to_le_bytes())?;
    out.write_all(&(data.dim() as u64).to_le_bytes())?;
    for v in data.features.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in labels_of(data) {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn finite(v: f64, row: usize, column: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Parse { row, column, msg: format!("non-finite value {v}") })
    }
}

/// Rows and columns in errors are 1-based; the label is column 1.
pub fn parse_csv<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse { row: 0, column: 0, msg: "empty file".into() })?;
    let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if names.len() < 2 || names[0] != "label" {
        return Err(Error::Parse { row: 0, column: 1, msg: "header must start with `label` and name at least one feature".into() });
    }
    for (j, name) in names[1..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse { row: 0, column: j + 2, msg: format!("expected feature name f{j}, found `{name}`") });
        }
    }
    let dim = names.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut row = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                row,
                column: fields.len().min(dim + 1) + 1,
                msg: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Parse { row, column: j + 1, msg: format!("cannot parse `{f}`") })?;
            let v = finite(v, row, j + 1)?;
            if j == 0 {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let x = Array2::from_shape_vec((labels.len(), dim), features).map_err(|e| Error::dim(e.to_string()))?;
    Dataset::new(x, SampleLayout::Flat, Targets::Regression { values: labels, bound: None })
}

pub fn parse_binary<R: Read>(mut input: R) -> Result<Dataset> {
    let mut b = [0u8; 8];
    let mut read_u64 = |input: &mut R, what: &str| -> Result<usize> {
        input
            .read_exact(&mut b)
            .map_err(|_| Error::Parse { row: 0, column: 0, msg: format!("truncated header ({what})") })?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Parse { row: 0, column: 0, msg: format!("{what} too large") })
    };
    let n = read_u64(&mut input, "n")?;
    let dim = read_u64(&mut input, "dim")?;
    if dim == 0 {
        return Err(Error::Parse { row: 0, column: 0, msg: "dim must be at least 1".into() });
    }
    let mut read_f64 = |row: usize, column: usize| -> Result<f64> {
        let mut b = [0u8; 8];
        input
            .read_exact(&mut b)
            .map_err(|_| Error::Parse { row, column, msg: "file ends early".into() })?;
        finite(f64::from_le_bytes(b), row, column)
    };
    let mut features = Vec::with_capacity(n.saturating_mul(dim).min(1 << 24));
    for i in 0..n {
        for j in 0..dim {
            features.push(read_f64(i + 1, j + 2)?);
        }
    }
    let labels = (0..n).map(|i| read_f64(i + 1, 1)).collect::<Result<Vec<_>>>()?;
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Parse { row: n + 1, column: 0, msg: "trailing bytes after labels".into() });
    }
    let x = Array2::from_shape_vec((n, dim), features).map_err(|e| Error::dim(e.to_string()))?;
    Dataset::new(x, SampleLayout::Flat, Targets::Regression { values: labels, bound: None })
}

pub fn ingest_matrix(path: &Path, format: MatrixFormat) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    match format {
        MatrixFormat::Csv => parse_csv(std::io::BufReader::new(f)),
        MatrixFormat::Binary => parse_binary(std::io::BufReader::new(f)),
    }
}

pub fn write_matrix(path: &Path, data: &Dataset, format: MatrixFormat) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        MatrixFormat::Csv => write_csv(f, data),
        MatrixFormat::Binary => write_binary(f, data),
    }
}
