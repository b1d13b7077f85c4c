//! Drives a configured run end to end and writes its artifacts.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint;
use crate::config::{DataSource, ModelKind, RunConfig, RunMode};
use crate::data::{gen_blobs, gen_synthetic, ingest_matrix, partition_noniid, to_classification};
use crate::dataset::{Dataset, SampleLayout};
use crate::error::{Error, Result};
use crate::masking::{mask_moment_stats, theta};
use crate::metrics::{write_metrics, MetricsRecord};
use crate::nn::{CnnModel, MlpModel, PatchedDataset};
use crate::params::ModelParams;
use crate::sim::{build_clients, mix_seed, run};
use crate::strategies::{CnnTask, MlpTask, Task};
use crate::theory::{
    format_report, initial_losses, initial_mse_check, ntk_infty, sign_agreement, theory_run, TheoryRunConfig,
    MIN_INITIALIZATIONS,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "final.adrp";
pub const CONFIG_ECHO_FILE: &str = "effective.conf";
pub const THEORY_REPORT_FILE: &str = "theory_report.txt";

/// A ready-to-simulate task and one shard of training indices per client.
pub struct BuiltTask {
    pub task: Box<dyn Task>,
    pub shards: Vec<Vec<usize>>,
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let seed = mix_seed(cfg.sim.seed, 10);
    match d.source {
        DataSource::Blobs => gen_blobs(d.samples, d.features, d.classes, d.spread, seed),
        DataSource::Synthetic => gen_synthetic(d.samples, d.channels, d.pixels, d.patch_width, d.label_bound, seed),
        DataSource::File => {
            let path = d.path.as_deref().ok_or_else(|| Error::config_key("path", "required when source = file"))?;
            let raw = ingest_matrix(path, d.format)?;
            match d.model {
                ModelKind::Mlp => to_classification(raw),
                ModelKind::Cnn => {
                    let layout = SampleLayout::Image { channels: d.channels, pixels: d.pixels };
                    Dataset::new(raw.features, layout, raw.targets)
                }
            }
        }
    }
}

/// Shuffles sample indices with the run seed and splits off the test fraction.
fn split(data: &Dataset, test_fraction: f64, seed: u64) -> (Dataset, Option<Dataset>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 11)));
    let n_test = (test_fraction * data.len() as f64).round() as usize;
    if n_test == 0 || n_test >= data.len() {
        return (data.clone(), None);
    }
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    train.sort_unstable();
    let mut test = test.to_vec();
    test.sort_unstable();
    (data.subset(&train), Some(data.subset(&test)))
}

pub fn build_task(cfg: &RunConfig) -> Result<BuiltTask> {
    let data = load_data(cfg)?;
    let (train, test) = split(&data, cfg.data.test_fraction, cfg.sim.seed);
    let levels: Vec<usize> = build_clients(&cfg.sim).iter().map(|c| c.capacity_level).collect();
    let plan = partition_noniid(&train, &levels, cfg.sim.levels, cfg.data.bias, mix_seed(cfg.sim.seed, 12))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.sim.seed, 13));
    let d = &cfg.data;
    let task: Box<dyn Task> = match d.model {
        ModelKind::Mlp => {
            let classes = train
                .num_classes()
                .ok_or_else(|| Error::config_key("model", "the MLP needs class labels"))?;
            let model = MlpModel::random(&mut rng, train.dim(), d.hidden, classes)?;
            Box::new(MlpTask::new(model, d.loss, &train, test.as_ref())?)
        }
        ModelKind::Cnn => {
            let scale = if cfg.strategy.kind.is_masked() { cfg.strategy.keep_rate } else { 1.0 };
            let model = CnnModel::random(&mut rng, d.filters, d.channels * d.patch_width, d.pixels, d.kappa, scale)?;
            let train = PatchedDataset::from_dataset(&train, d.patch_width)?;
            let test = test.map(|t| PatchedDataset::from_dataset(&t, d.patch_width)).transpose()?;
            Box::new(CnnTask::new(model, train, test))
        }
    };
    Ok(BuiltTask { task, shards: plan.shards })
}

pub fn theory_config(cfg: &RunConfig) -> TheoryRunConfig {
    TheoryRunConfig {
        n: cfg.data.samples,
        channels: cfg.data.channels,
        pixels: cfg.data.pixels,
        patch_width: cfg.data.patch_width,
        filters: cfg.data.filters,
        kappa: cfg.data.kappa,
        keep_rate: cfg.strategy.keep_rate,
        subnetworks: cfg.theory.subnetworks,
        staleness_bound: cfg.theory.staleness_bound,
        learning_rate: cfg.theory.learning_rate,
        merges: cfg.theory.merges,
        label_bound: cfg.data.label_bound,
        seed: cfg.sim.seed,
        record_every: cfg.theory.record_every,
        drift_radius: cfg.theory.drift_radius,
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub out_dir: PathBuf,
    pub trace: Vec<MetricsRecord>,
    pub final_params: ModelParams,
    /// Theory report text, theory mode only.
    pub report: Option<String>,
}

/// Runs one experiment and writes metrics, the final checkpoint, the effective config
/// and, in theory mode, the report into `cfg.out_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (trace, final_params, report) = match cfg.mode {
        RunMode::Sim => {
            let built = build_task(cfg)?;
            let outcome = run(&cfg.sim, &cfg.strategy, built.task.as_ref(), &built.shards)?;
            log::info!(
                "{} updates processed, {} in flight discarded, simulated time {:.3}",
                outcome.trace.iter().filter(|r| !r.is_evaluation()).count(),
                outcome.truncated,
                outcome.end_time
            );
            (outcome.trace, outcome.final_params, None)
        }
        RunMode::Theory => {
            let run = theory_run(&theory_config(cfg))?;
            let trace = run
                .points
                .iter()
                .enumerate()
                .map(|(i, &(t, loss))| MetricsRecord {
                    sim_time: t as f64,
                    event_index: i as u64,
                    global_version: t,
                    client_id: None,
                    capacity_level: None,
                    train_loss: loss,
                    test_loss: None,
                    test_accuracy: None,
                    cum_params_down: 0,
                    cum_params_up: 0,
                    staleness: None,
                })
                .collect();
            let report = format_report(&run);
            (trace, run.final_params, Some(report))
        }
    };
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    write_metrics(BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?), &trace)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &final_params)?;
    fs::write(dir.join(CONFIG_ECHO_FILE), cfg.emit())?;
    if let Some(r) = &report {
        fs::write(dir.join(THEORY_REPORT_FILE), r)?;
    }
    Ok(ExperimentOutput { out_dir: dir.clone(), trace, final_params, report })
}

/// Parses `KEY=V1,V2,...`.
pub fn parse_vary(arg: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = arg
        .split_once('=')
        .ok_or_else(|| Error::config(format!("expected KEY=V1,V2,... but got `{arg}`")))?;
    let key = key.trim();
    if !crate::config::all_keys().any(|k| k == key) {
        return Err(Error::config_key(key, "unknown key"));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::config_key(key, "no values to sweep"));
    }
    Ok((key.to_string(), values))
}

/// One point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub config: RunConfig,
}

/// Cartesian product of the varied keys over a base config. Each point writes into
/// its own subdirectory of the base output directory.
pub fn sweep_points(base: &RunConfig, vary: &[(String, Vec<String>)]) -> Result<Vec<SweepPoint>> {
    let mut points = vec![(Vec::<String>::new(), base.clone())];
    for (key, values) in vary {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (labels, cfg) in &points {
            for v in values {
                let mut c = cfg.clone();
                c.set(key, v).map_err(|m| Error::config_key(key, m))?;
                let mut l = labels.clone();
                l.push(format!("{key}-{v}"));
                next.push((l, c));
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|(labels, mut config)| {
            let label = if labels.is_empty() { "base".to_string() } else { labels.join("_") };
            let safe: String = label
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
                .collect();
            config.out_dir = base.out_dir.join(&safe);
            config.validate()?;
            Ok(SweepPoint { label, config })
        })
        .collect()
}

pub fn sweep(base: &RunConfig, vary: &[(String, Vec<String>)]) -> Result<Vec<(String, ExperimentOutput)>> {
    sweep_points(base, vary)?
        .into_iter()
        .map(|p| run_experiment(&p.config).map(|o| (p.label, o)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// Monte-Carlo estimate of the probability that a Gaussian direction has a
/// non-negative inner product with both vectors.
fn mc_agreement(a: &[f64], b: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut hits = 0usize;
    let mut w = vec![0.0; a.len()];
    for _ in 0..draws {
        for x in w.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let da: f64 = w.iter().zip(a).map(|(w, a)| w * a).sum();
        let db: f64 = w.iter().zip(b).map(|(w, b)| w * b).sum();
        hits += (da >= 0.0 && db >= 0.0) as usize;
    }
    hits as f64 / draws as f64
}

/// The kernel and convergence suite, parameterised by the theory settings of `cfg`.
pub fn run_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let tc = theory_config(cfg);
    let mut out = Vec::new();

    let raw = gen_synthetic(tc.n, tc.channels, tc.pixels, tc.patch_width, tc.label_bound, tc.seed)?;
    let data = PatchedDataset::from_dataset(&raw, tc.patch_width)?;
    let ntk = ntk_infty(&data)?;
    out.push(CheckResult::new("lambda0-positive", ntk.lambda0 > 1e-10, format!("lambda0 = {:e}", ntk.lambda0)));

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, 20));
    let draws = 200_000;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let i = rng.random_range(0..data.len());
        let j = rng.random_range(0..data.len());
        let a = data.inputs[i].patch_column(rng.random_range(0..tc.pixels)).to_vec();
        let b = data.inputs[j].patch_column(rng.random_range(0..tc.pixels)).to_vec();
        let closed = sign_agreement(ndarray::ArrayView1::from(&a), ndarray::ArrayView1::from(&b));
        worst = worst.max((closed - mc_agreement(&a, &b, draws, &mut rng)).abs());
    }
    out.push(CheckResult::new("kernel-vs-monte-carlo", worst <= 1e-2, format!("max abs error {worst:.2e} over 5 pairs")));

    let moments = mask_moment_stats(tc.keep_rate, tc.subnetworks, 100_000, mix_seed(tc.seed, 21))?;
    let th = theta(tc.keep_rate, tc.subnetworks);
    let th_se = (th * (1.0 - th) / moments.trials as f64).sqrt();
    let ok = (moments.theta_empirical - th).abs() <= 4.0 * th_se.max(f64::MIN_POSITIVE)
        && (moments.mean_nu - tc.keep_rate).abs() <= 4.0 * moments.mean_se;
    out.push(CheckResult::new(
        "mask-moments",
        ok,
        format!(
            "theta {:.4} vs {:.4}, mean nu {:.4} vs {:.4}",
            moments.theta_empirical, th, moments.mean_nu, tc.keep_rate
        ),
    ));

    let losses = initial_losses(&data, tc.filters, tc.kappa, tc.keep_rate, MIN_INITIALIZATIONS, mix_seed(tc.seed, 22))?;
    let mse = initial_mse_check(&losses, tc.n, tc.pixels, tc.label_bound)?;
    out.push(CheckResult::new(
        "initial-mse",
        mse.passed,
        format!("mean {:.4} (sem {:.4}) vs bound {:.4}", mse.mean, mse.sem, mse.bound),
    ));

    let run = theory_run(&tc)?;
    out.push(CheckResult::new(
        "envelope",
        run.envelope.compliant,
        format!("{} of {} points above the bound", run.envelope.violations.len(), run.points.len()),
    ));
    let ratio = run.final_loss / run.initial_loss;
    out.push(CheckResult::new(
        "loss-reduction",
        ratio <= 0.05,
        format!("final/initial = {ratio:.4} after {} merges (target 0.05)", tc.merges),
    ));
    Ok(out)
}

/// Writes a check table to `dir/checks.txt` and returns its text.
pub fn format_checks(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!("{:<24} {}  {}\n", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail));
    }
    s
}

pub fn write_checks(dir: &Path, results: &[CheckResult]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("checks.txt"), format_checks(results))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("num_clients", "8"),
            ("active_clients", "4"),
            ("levels", "4"),
            ("max_updates", "24"),
            ("samples", "160"),
            ("local_iters", "3"),
            ("batch_size", "8"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let data = gen_blobs(50, 3, 5, 1.0, 1).unwrap();
        let (tr, te) = split(&data, 0.2, 7);
        assert_eq!(tr.len(), 40);
        assert_eq!(te.unwrap().len(), 10);
        let (tr2, _) = split(&data, 0.2, 7);
        assert_eq!(tr, tr2);
        let (all, none) = split(&data, 0.0, 7);
        assert_eq!(all.len(), 50);
        assert!(none.is_none());
    }

    #[test]
    fn run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run_experiment(&cfg).unwrap();
        for f in [METRICS_FILE, CHECKPOINT_FILE, CONFIG_ECHO_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let echoed = RunConfig::load(&dir.path().join(CONFIG_ECHO_FILE)).unwrap();
        assert_eq!(echoed, cfg);
        assert_eq!(checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap().groups, out.final_params.groups);
    }

    #[test]
    fn sweep_is_cartesian() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let vary = vec![parse_vary("keep_rate=0.5,1.0").unwrap(), parse_vary("local_iters=1,2,3").unwrap()];
        let pts = sweep_points(&cfg, &vary).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].label, "keep_rate-0.5_local_iters-1");
        assert_eq!(pts[5].config.strategy.local_iters, 3);
        assert_eq!(pts[5].config.strategy.keep_rate, 1.0);
        assert!(parse_vary("nonsense=1").is_err());
        assert!(parse_vary("keep_rate").is_err());
        assert!(sweep_points(&cfg, &[parse_vary("keep_rate=2").unwrap()]).is_err());
    }

    #[test]
    fn monte_carlo_agreement_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = [1.0, 0.0, 0.5];
        let b = [0.2, 1.0, -0.3];
        let closed = sign_agreement(ndarray::ArrayView1::from(&a[..]), ndarray::ArrayView1::from(&b[..]));
        assert!((closed - mc_agreement(&a, &b, 100_000, &mut rng)).abs() < 1e-2);
    }
}
