//! Run configuration: flat `key = value` text with `#` comments and `[section]` headers.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::MatrixFormat;
use crate::error::{ConfigIssue, Error, Result};
use crate::nn::MlpLoss;
use crate::sim::SimConfig;
use crate::strategies::{parse_mask_mode, StrategyKind, StrategySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Event-driven federated simulation.
    Sim,
    /// Kernel convergence run on the CNN.
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Gaussian class blobs (MLP).
    Blobs,
    /// Normalized regression images (CNN).
    Synthetic,
    /// A matrix file, see `path` and `format`.
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub model: ModelKind,
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub format: MatrixFormat,
    pub samples: usize,
    pub channels: usize,
    pub pixels: usize,
    pub patch_width: usize,
    pub label_bound: f64,
    pub features: usize,
    pub classes: usize,
    pub spread: f64,
    pub test_fraction: f64,
    /// Non-i.i.d. bias β.
    pub bias: f64,
    pub hidden: usize,
    pub filters: usize,
    pub kappa: f64,
    pub loss: MlpLoss,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Mlp,
            source: DataSource::Blobs,
            path: None,
            format: MatrixFormat::Csv,
            samples: 2080,
            channels: 2,
            pixels: 4,
            patch_width: 2,
            label_bound: 1.0,
            features: 16,
            classes: 8,
            spread: 1.0,
            test_fraction: 0.2,
            bias: 0.8,
            hidden: 32,
            filters: 64,
            kappa: 1.0,
            loss: MlpLoss::Mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheorySettings {
    pub subnetworks: u32,
    pub merges: usize,
    /// `None` uses `λ₀ / (4n²)`.
    pub learning_rate: Option<f64>,
    pub staleness_bound: u64,
    pub record_every: usize,
    pub drift_radius: Option<f64>,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self { subnetworks: 2, merges: 2000, learning_rate: None, staleness_bound: 4, record_every: 1, drift_radius: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub out_dir: PathBuf,
    pub sim: SimConfig,
    pub strategy: StrategySpec,
    pub data: DataConfig,
    pub theory: TheorySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut strategy = StrategySpec::new(StrategyKind::AsyncDrop);
        strategy.mu = 0.01;
        Self {
            mode: RunMode::Sim,
            out_dir: PathBuf::from("out"),
            sim: SimConfig::default(),
            strategy,
            data: DataConfig::default(),
            theory: TheorySettings::default(),
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("run", &["mode", "out_dir", "seed"]),
    (
        "sim",
        &[
            "num_clients",
            "active_clients",
            "levels",
            "speed_ratio",
            "compute_delay",
            "comm_delay",
            "max_updates",
            "epochs",
            "staleness_bound",
            "eval_every",
        ],
    ),
    (
        "strategy",
        &["strategy", "keep_rate", "alpha", "learning_rate", "local_iters", "mu", "buffer_size", "mask_mode", "batch_size"],
    ),
    (
        "data",
        &[
            "model",
            "source",
            "path",
            "format",
            "samples",
            "channels",
            "pixels",
            "patch_width",
            "label_bound",
            "features",
            "classes",
            "spread",
            "test_fraction",
            "bias",
        ],
    ),
    ("model", &["hidden", "filters", "kappa", "loss"]),
    ("theory", &["subnetworks", "merges", "theory_learning_rate", "theory_staleness_bound", "record_every", "drift_radius"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn opt_num<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
    match v {
        "none" | "auto" | "" => Ok(None),
        _ => num(v).map(Some),
    }
}

fn opt_str<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| none.to_string())
}

/// Rust's shortest round-trip float rendering.
fn f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "mode" => {
                self.mode = match v {
                    "sim" => RunMode::Sim,
                    "theory" => RunMode::Theory,
                    _ => return Err(format!("unknown mode `{v}` (sim or theory)")),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.sim.seed = num(v)?,
            "num_clients" => self.sim.num_clients = num(v)?,
            "active_clients" => self.sim.active_clients = num(v)?,
            "levels" => self.sim.levels = num(v)?,
            "speed_ratio" => self.sim.speed_ratio = num(v)?,
            "compute_delay" => self.sim.compute_delay = num(v)?,
            "comm_delay" => self.sim.comm_delay = num(v)?,
            "max_updates" => self.sim.max_updates = num(v)?,
            "epochs" => self.sim.epochs = opt_num(v)?,
            "staleness_bound" => self.sim.staleness_bound = opt_num(v)?,
            "eval_every" => self.sim.eval_every = opt_num(v)?,
            "strategy" => self.strategy.kind = v.parse::<StrategyKind>().map_err(|_| format!("unknown strategy `{v}`"))?,
            "keep_rate" => self.strategy.keep_rate = num(v)?,
            "alpha" => self.strategy.alpha = num(v)?,
            "learning_rate" => self.strategy.learning_rate = num(v)?,
            "local_iters" => self.strategy.local_iters = num(v)?,
            "mu" => self.strategy.mu = num(v)?,
            "buffer_size" => self.strategy.buffer_size = num(v)?,
            "mask_mode" => {
                self.strategy.mask_mode = match v {
                    "default" => None,
                    _ => Some(parse_mask_mode(v).map_err(|_| format!("unknown mask mode `{v}`"))?),
                }
            }
            "batch_size" => self.strategy.batch_size = opt_num(v)?,
            "model" => {
                self.data.model = match v {
                    "mlp" => ModelKind::Mlp,
                    "cnn" => ModelKind::Cnn,
                    _ => return Err(format!("unknown model `{v}` (mlp or cnn)")),
                }
            }
            "source" => {
                self.data.source = match v {
                    "blobs" => DataSource::Blobs,
                    "synthetic" => DataSource::Synthetic,
                    "file" => DataSource::File,
                    _ => return Err(format!("unknown source `{v}` (blobs, synthetic or file)")),
                }
            }
            "path" => self.data.path = (v != "none" && !v.is_empty()).then(|| PathBuf::from(v)),
            "format" => self.data.format = v.parse().map_err(|_| format!("unknown format `{v}` (csv or binary)"))?,
            "samples" => self.data.samples = num(v)?,
            "channels" => self.data.channels = num(v)?,
            "pixels" => self.data.pixels = num(v)?,
            "patch_width" => self.data.patch_width = num(v)?,
            "label_bound" => self.data.label_bound = num(v)?,
            "features" => self.data.features = num(v)?,
            "classes" => self.data.classes = num(v)?,
            "spread" => self.data.spread = num(v)?,
            "test_fraction" => self.data.test_fraction = num(v)?,
            "bias" => self.data.bias = num(v)?,
            "hidden" => self.data.hidden = num(v)?,
            "filters" => self.data.filters = num(v)?,
            "kappa" => self.data.kappa = num(v)?,
            "loss" => {
                self.data.loss = match v {
                    "mse" => MlpLoss::Mse,
                    "cross-entropy" | "xent" => MlpLoss::SoftmaxCrossEntropy,
                    _ => return Err(format!("unknown loss `{v}` (mse or cross-entropy)")),
                }
            }
            "subnetworks" => self.theory.subnetworks = num(v)?,
            "merges" => self.theory.merges = num(v)?,
            "theory_learning_rate" => self.theory.learning_rate = opt_num(v)?,
            "theory_staleness_bound" => self.theory.staleness_bound = num(v)?,
            "record_every" => self.theory.record_every = num(v)?,
            "drift_radius" => self.theory.drift_radius = opt_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "mode" => match self.mode {
                RunMode::Sim => "sim".into(),
                RunMode::Theory => "theory".into(),
            },
            "out_dir" => self.out_dir.display().to_string(),
            "seed" => self.sim.seed.to_string(),
            "num_clients" => self.sim.num_clients.to_string(),
            "active_clients" => self.sim.active_clients.to_string(),
            "levels" => self.sim.levels.to_string(),
            "speed_ratio" => f(self.sim.speed_ratio),
            "compute_delay" => f(self.sim.compute_delay),
            "comm_delay" => f(self.sim.comm_delay),
            "max_updates" => self.sim.max_updates.to_string(),
            "epochs" => opt_str(&self.sim.epochs.map(f), "none"),
            "staleness_bound" => opt_str(&self.sim.staleness_bound, "none"),
            "eval_every" => opt_str(&self.sim.eval_every, "none"),
            "strategy" => self.strategy.kind.to_string(),
            "keep_rate" => f(self.strategy.keep_rate),
            "alpha" => f(self.strategy.alpha),
            "learning_rate" => f(self.strategy.learning_rate),
            "local_iters" => self.strategy.local_iters.to_string(),
            "mu" => f(self.strategy.mu),
            "buffer_size" => self.strategy.buffer_size.to_string(),
            "mask_mode" => opt_str(&self.strategy.mask_mode.map(|m| m.as_str()), "default"),
            "batch_size" => opt_str(&self.strategy.batch_size, "none"),
            "model" => match self.data.model {
                ModelKind::Mlp => "mlp".into(),
                ModelKind::Cnn => "cnn".into(),
            },
            "source" => match self.data.source {
                DataSource::Blobs => "blobs".into(),
                DataSource::Synthetic => "synthetic".into(),
                DataSource::File => "file".into(),
            },
            "path" => opt_str(&self.data.path.as_ref().map(|p| p.display().to_string()), "none"),
            "format" => match self.data.format {
                MatrixFormat::Csv => "csv".into(),
                MatrixFormat::Binary => "binary".into(),
            },
            "samples" => self.data.samples.to_string(),
            "channels" => self.data.channels.to_string(),
            "pixels" => self.data.pixels.to_string(),
            "patch_width" => self.data.patch_width.to_string(),
            "label_bound" => f(self.data.label_bound),
            "features" => self.data.features.to_string(),
            "classes" => self.data.classes.to_string(),
            "spread" => f(self.data.spread),
            "test_fraction" => f(self.data.test_fraction),
            "bias" => f(self.data.bias),
            "hidden" => self.data.hidden.to_string(),
            "filters" => self.data.filters.to_string(),
            "kappa" => f(self.data.kappa),
            "loss" => match self.data.loss {
                MlpLoss::Mse => "mse".into(),
                MlpLoss::SoftmaxCrossEntropy => "cross-entropy".into(),
            },
            "subnetworks" => self.theory.subnetworks.to_string(),
            "merges" => self.theory.merges.to_string(),
            "theory_learning_rate" => opt_str(&self.theory.learning_rate.map(f), "auto"),
            "theory_staleness_bound" => self.theory.staleness_bound.to_string(),
            "record_every" => self.theory.record_every.to_string(),
            "drift_radius" => opt_str(&self.theory.drift_radius.map(f), "none"),
            _ => unreachable!("every listed key has a value"),
        }
    }

    /// Range checks; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.strategy.validate()?;
        let d = &self.data;
        let positive = [
            ("samples", d.samples),
            ("channels", d.channels),
            ("pixels", d.pixels),
            ("patch_width", d.patch_width),
            ("features", d.features),
            ("classes", d.classes),
            ("hidden", d.hidden),
            ("filters", d.filters),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config_key(k, "must be at least 1"));
        }
        if d.patch_width > d.pixels {
            return Err(Error::config_key("patch_width", "cannot exceed pixels"));
        }
        if !(d.label_bound > 0.0) {
            return Err(Error::config_key("label_bound", "must be positive"));
        }
        if !(d.spread >= 0.0) {
            return Err(Error::config_key("spread", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::config_key("test_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&d.bias) {
            return Err(Error::config_key("bias", "must lie in [0, 1]"));
        }
        if !(d.kappa >= 0.0 && d.kappa.is_finite()) {
            return Err(Error::config_key("kappa", "must be non-negative"));
        }
        match (d.source, d.model) {
            (DataSource::File, _) => match &d.path {
                Some(p) if p.exists() => {}
                Some(p) => return Err(Error::config_key("path", format!("{} does not exist", p.display()))),
                None => return Err(Error::config_key("path", "required when source = file")),
            },
            (DataSource::Blobs, ModelKind::Cnn) => {
                return Err(Error::config_key("source", "the CNN trains on synthetic regression images"))
            }
            (DataSource::Synthetic, ModelKind::Mlp) => {
                return Err(Error::config_key("source", "the MLP trains on class labels (blobs or file)"))
            }
            _ => {}
        }
        if self.mode == RunMode::Theory {
            let t = &self.theory;
            if t.subnetworks == 0 {
                return Err(Error::config_key("subnetworks", "must be at least 1"));
            }
            if t.merges == 0 {
                return Err(Error::config_key("merges", "must be at least 1"));
            }
            if t.record_every == 0 {
                return Err(Error::config_key("record_every", "must be at least 1"));
            }
            if t.learning_rate.is_some_and(|r| !(r > 0.0)) {
                return Err(Error::config_key("theory_learning_rate", "must be positive"));
            }
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let issue = |key: Option<&str>, line: usize, msg: String| {
            Error::Config(ConfigIssue { key: key.map(str::to_string), line: Some(line), msg })
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| issue(None, line_no, format!("malformed section header `{line}`")))?
                    .trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(issue(None, line_no, format!("unknown section `{name}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| issue(None, line_no, format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            match (section_of(key), &section) {
                (None, _) => return Err(issue(Some(key), line_no, "unknown key".into())),
                (Some(s), Some(cur)) if s != cur => {
                    return Err(issue(Some(key), line_no, format!("belongs in [{s}], not [{cur}]")))
                }
                _ => {}
            }
            cfg.set(key, value).map_err(|msg| issue(Some(key), line_no, msg))?;
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(mut c) => {
                c.line = c.key.as_deref().and_then(|k| find_line(text, k));
                Error::Config(c)
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Every key with its effective value, grouped by section.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in SECTIONS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for key in *keys {
                let _ = writeln!(out, "{key} = {}", self.value_of(key));
            }
        }
        out
    }
}

fn find_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| l.split('#').next().and_then(|s| s.split_once('=')).is_some_and(|(k, _)| k.trim() == key))
        .map(|i| i + 1)
}

/// Every recognised key.
pub fn all_keys() -> impl Iterator<Item = &'static str> {
    SECTIONS.iter().flat_map(|(_, keys)| keys.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_protocol_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.sim.num_clients, 104);
        assert_eq!(cfg.sim.active_clients, 8);
        assert_eq!(cfg.sim.levels, 8);
        assert_eq!(cfg.sim.speed_ratio, 5.0);
        assert_eq!(cfg.strategy.local_iters, 50);
        assert_eq!(cfg.strategy.keep_rate, 0.75);
        assert_eq!(cfg.strategy.buffer_size, 4);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn range_error_names_key_and_line() {
        let err = RunConfig::parse("# comment\n[strategy]\nkeep_rate = 1.5\n").unwrap_err();
        match err {
            Error::Config(c) => {
                assert_eq!(c.key.as_deref(), Some("keep_rate"));
                assert_eq!(c.line, Some(3));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_and_wrong_section() {
        let err = RunConfig::parse("\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus") && err.to_string().contains("line 2"));
        let err = RunConfig::parse("[sim]\nkeep_rate = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("keep_rate"));
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("alpha 3\n").is_err());
    }

    #[test]
    fn sectionless_keys_and_comments() {
        let cfg = RunConfig::parse("strategy = fedbuff  # buffered\nbuffer_size=2\nepochs = 3.5\n").unwrap();
        assert_eq!(cfg.strategy.kind, StrategyKind::FedBuff);
        assert_eq!(cfg.strategy.buffer_size, 2);
        assert_eq!(cfg.sim.epochs, Some(3.5));
    }

    #[test]
    fn emit_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("strategy", "hetero-asyncdrop").unwrap();
        cfg.set("mask_mode", "layerwise").unwrap();
        cfg.set("learning_rate", "0.1").unwrap();
        cfg.set("staleness_bound", "4").unwrap();
        cfg.set("theory_learning_rate", "0.003").unwrap();
        let text = cfg.emit();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().emit()).unwrap(), RunConfig::default());
    }

    #[test]
    fn missing_file_path_is_rejected() {
        let err = RunConfig::parse("source = file\npath = /definitely/not/here.csv\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("path"));
    }
}
