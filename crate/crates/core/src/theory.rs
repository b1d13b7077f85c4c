//! Kernel-based convergence checks for the patched CNN: the infinite-width and
//! finite-width tangent kernels, their smallest eigenvalue, the loss envelope, the
//! initial-loss bound and weight drift.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::gen_synthetic;
use crate::error::{check_keep_rate, Error, Result};
use crate::masking::{random_mask_with, theta, MaskMode};
use crate::nn::{cnn_forward, cnn_gradient, CnnModel, PatchedDataset};
use crate::params::{ModelParams, ParamGroup};
use crate::store::GlobalStore;

/// Kernel matrix with its smallest eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct NtkMatrix {
    pub h: Array2<f64>,
    pub lambda0: f64,
}

/// `E_w[1{⟨a,w⟩ ≥ 0}·1{⟨b,w⟩ ≥ 0}]` for Gaussian `w`: `(π − ∠(a,b)) / (2π)`.
/// Zero vectors give 0.
pub fn sign_agreement(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    (PI - cos.acos()) / (2.0 * PI)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(h: &Array2<f64>) -> Result<f64> {
    let (r, c) = h.dim();
    if r != c || r == 0 {
        return Err(Error::dim(format!("kernel must be square and non-empty, got {r}x{c}")));
    }
    let m = DMatrix::from_fn(r, c, |i, j| h[(i, j)]);
    let eig = SymmetricEigen::new(m);
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

fn check_patched(data: &PatchedDataset) -> Result<(usize, usize)> {
    let first = data.inputs.first().ok_or_else(|| Error::dim("empty dataset"))?;
    let dim = first.columns.dim();
    if data.inputs.iter().any(|x| x.columns.dim() != dim) {
        return Err(Error::dim("inconsistently patched samples"));
    }
    Ok(dim)
}

/// `H∞_ii' = p⁻²·Σ_j ⟨x̂_i⁽ʲ⁾, x̂_i'⁽ʲ⁾⟩·(π − ∠)/(2π)`.
pub fn ntk_infty(data: &PatchedDataset) -> Result<NtkMatrix> {
    let (_, p) = check_patched(data)?;
    let n = data.len();
    let mut h = Array2::zeros((n, n));
    for i in 0..n {
        for k in i..n {
            let mut s = 0.0;
            for j in 0..p {
                let a = data.inputs[i].columns.column(j);
                let b = data.inputs[k].columns.column(j);
                s += a.dot(&b) * sign_agreement(a, b);
            }
            let v = s / (p * p) as f64;
            h[(i, k)] = v;
            h[(k, i)] = v;
        }
    }
    let lambda0 = lambda_min(&h)?;
    Ok(NtkMatrix { h, lambda0 })
}

/// Finite-width kernel `H_ii' = Σ_r Σ_{j,j'} a_rj a_rj' ⟨x̂_i⁽ʲ⁾, x̂_i'⁽ʲ'⁾⟩·1{·}·1{·}` at the
/// current filters, with the indicator `1{⟨x̂, w⟩ ≥ 0}`.
pub fn finite_ntk(model: &CnnModel, data: &PatchedDataset) -> Result<NtkMatrix> {
    let (d, p) = check_patched(data)?;
    if d != model.input_dim() || p != model.pixels() {
        return Err(Error::dim("dataset does not match the model"));
    }
    let n = data.len();
    let m = model.num_filters();
    let a = model.second_layer();
    let mut h = Array2::<f64>::zeros((n, n));
    let mut v = Array2::<f64>::zeros((n, d));
    for r in 0..m {
        let w = model.filters.row(r);
        for (i, x) in data.inputs.iter().enumerate() {
            let mut acc = Array1::<f64>::zeros(d);
            for j in 0..p {
                let col = x.columns.column(j);
                if col.dot(&w) >= 0.0 {
                    acc.scaled_add(a[(r, j)], &col);
                }
            }
            v.row_mut(i).assign(&acc);
        }
        h += &v.dot(&v.t());
    }
    let lambda0 = lambda_min(&h)?;
    Ok(NtkMatrix { h, lambda0 })
}

pub fn is_symmetric(h: &Array2<f64>, tol: f64) -> bool {
    let (r, c) = h.dim();
    r == c && (0..r).all(|i| (0..i).all(|j| (h[(i, j)] - h[(j, i)]).abs() <= tol))
}

/// Outcome of comparing a loss trace with the geometric envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    /// Per-merge contraction `1 − θηλ₀/4`.
    pub rate: f64,
    pub initial_loss: f64,
    /// Tail median of the trace.
    pub floor: f64,
    pub slack: f64,
    /// Merge indices of points above the envelope.
    pub violations: Vec<u64>,
    pub compliant: bool,
}

impl EnvelopeReport {
    pub fn bound_at(&self, t: u64) -> f64 {
        self.rate.powf(t as f64) * self.initial_loss + self.floor + self.slack
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Checks `loss_t ≤ (1 − θηλ₀/4)^t·loss_0 + floor + slack` at every point, where the
/// floor is the median of the last quarter of the trace and `slack = slack_fraction·loss_0`.
/// `points` are `(merge index, loss)` pairs; the first one is the initial loss.
pub fn envelope_check(points: &[(u64, f64)], theta: f64, eta: f64, lambda0: f64, slack_fraction: f64) -> Result<EnvelopeReport> {
    if !(lambda0 > 0.0) {
        return Err(Error::Contract(format!(
            "smallest kernel eigenvalue {lambda0} is not positive; samples must be distinct and normalized"
        )));
    }
    let Some(&(_, initial_loss)) = points.first() else {
        return Err(Error::Contract("empty loss trace".into()));
    };
    let tail = (points.len() / 4).max(1);
    let mut tail_vals: Vec<f64> = points[points.len() - tail..].iter().map(|p| p.1).collect();
    let floor = median(&mut tail_vals);
    let mut report = EnvelopeReport {
        rate: 1.0 - theta * eta * lambda0 / 4.0,
        initial_loss,
        floor,
        slack: slack_fraction * initial_loss,
        violations: Vec::new(),
        compliant: true,
    };
    report.violations = points
        .iter()
        .filter(|&&(t, l)| !(l <= report.bound_at(t)))
        .map(|p| p.0)
        .collect();
    report.compliant = report.violations.is_empty();
    Ok(report)
}

/// `‖y − u₀‖²` for independently initialized models.
pub fn initial_losses(data: &PatchedDataset, filters: usize, kappa: f64, scale: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    let (d, p) = check_patched(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let model = CnnModel::random(&mut rng, filters, d, p, kappa, scale)?;
            data.inputs
                .iter()
                .zip(&data.targets)
                .map(|(x, y)| cnn_forward(&model, x).map(|u| (u - y) * (u - y)))
                .sum::<Result<f64>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialMseReport {
    pub mean: f64,
    pub sem: f64,
    /// `(p⁻¹ + C²)·n`.
    pub bound: f64,
    /// `bound·(1 + 3·SEM/mean)`.
    pub allowance: f64,
    pub passed: bool,
}

pub const MIN_INITIALIZATIONS: usize = 200;

pub fn initial_mse_check(losses: &[f64], n: usize, pixels: usize, label_bound: f64) -> Result<InitialMseReport> {
    if losses.len() < MIN_INITIALIZATIONS {
        return Err(Error::Contract(format!("need at least {MIN_INITIALIZATIONS} initializations")));
    }
    let k = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / k;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let sem = (var / k).sqrt();
    let bound = (1.0 / pixels as f64 + label_bound * label_bound) * n as f64;
    let allowance = if mean > 0.0 { bound * (1.0 + 3.0 * sem / mean) } else { bound };
    Ok(InitialMseReport { mean, sem, bound, allowance, passed: mean <= allowance })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// `max_r ‖w_r,t − w_r,0‖₂` per snapshot.
    pub max_drift: Vec<f64>,
    /// First snapshot whose drift exceeds the radius.
    pub exceeded_at: Option<usize>,
}

pub fn drift_monitor(initial: &Array2<f64>, snapshots: &[Array2<f64>], radius: Option<f64>) -> Result<DriftReport> {
    let mut max_drift = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        if s.dim() != initial.dim() {
            return Err(Error::dim("snapshot shape differs from the initial filters"));
        }
        let d = (s - initial)
            .outer_iter()
            .map(|row| row.dot(&row).sqrt())
            .fold(0.0, f64::max);
        max_drift.push(d);
    }
    let exceeded_at = radius.and_then(|r| max_drift.iter().position(|&d| d > r));
    Ok(DriftReport { max_drift, exceeded_at })
}

/// Theory run on synthetic data: `S` Bernoulli subnetworks per merge, each computing a
/// full-data gradient at a model up to `E` merges old, averaged per filter over the
/// subnetworks that kept it.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRunConfig {
    pub n: usize,
    pub channels: usize,
    pub pixels: usize,
    pub patch_width: usize,
    pub filters: usize,
    pub kappa: f64,
    pub keep_rate: f64,
    pub subnetworks: u32,
    pub staleness_bound: u64,
    /// Defaults to `λ₀ / (4n²)`.
    pub learning_rate: Option<f64>,
    pub merges: usize,
    pub label_bound: f64,
    pub seed: u64,
    pub record_every: usize,
    pub drift_radius: Option<f64>,
}

impl Default for TheoryRunConfig {
    fn default() -> Self {
        Self {
            n: 16,
            channels: 2,
            pixels: 4,
            patch_width: 2,
            filters: 512,
            kappa: 1.0,
            keep_rate: 0.5,
            subnetworks: 2,
            staleness_bound: 4,
            learning_rate: None,
            merges: 2000,
            label_bound: 1.0,
            seed: 0,
            record_every: 1,
            drift_radius: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TheoryRun {
    pub lambda0: f64,
    pub eta: f64,
    pub theta: f64,
    /// `(merge index, ‖u_t − y‖²)`.
    pub points: Vec<(u64, f64)>,
    pub staleness: Vec<u64>,
    pub drift: DriftReport,
    pub envelope: EnvelopeReport,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_params: ModelParams,
}

fn full_loss(model: &CnnModel, data: &PatchedDataset) -> Result<f64> {
    data.inputs
        .iter()
        .zip(&data.targets)
        .map(|(x, y)| cnn_forward(model, x).map(|u| (u - y) * (u - y)))
        .sum()
}

fn filters_of(params: &ModelParams, shape: (usize, usize)) -> Result<Array2<f64>> {
    Array2::from_shape_vec(shape, params.groups[0].values.clone()).map_err(|e| Error::dim(e.to_string()))
}

pub fn theory_run(cfg: &TheoryRunConfig) -> Result<TheoryRun> {
    check_keep_rate(cfg.keep_rate)?;
    if cfg.subnetworks == 0 || cfg.merges == 0 || cfg.record_every == 0 {
        return Err(Error::config("subnetworks, merges and record_every must be at least 1"));
    }
    let raw = gen_synthetic(cfg.n, cfg.channels, cfg.pixels, cfg.patch_width, cfg.label_bound, cfg.seed)?;
    let data = PatchedDataset::from_dataset(&raw, cfg.patch_width)?;
    let lambda0 = ntk_infty(&data)?.lambda0;
    if !(lambda0 > 0.0) {
        return Err(Error::Contract(format!("λ₀ = {lambda0} is not positive")));
    }
    let eta = cfg.learning_rate.unwrap_or(lambda0 / (4.0 * (cfg.n * cfg.n) as f64));
    let th = theta(cfg.keep_rate, cfg.subnetworks);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7468_656f_7279);
    let mut model = CnnModel::random(&mut rng, cfg.filters, cfg.channels * cfg.patch_width, cfg.pixels, cfg.kappa, cfg.keep_rate)?;
    let shape = model.filters.dim();
    let w0 = model.filters.clone();
    let mut store = GlobalStore::new(model.params(), model.unit_map())?;
    let mut history: VecDeque<ModelParams> = VecDeque::from([store.fetch()]);

    let initial_loss = full_loss(&model, &data)?;
    let mut points = vec![(0u64, initial_loss)];
    let mut snapshots = vec![w0.clone()];
    let mut staleness = Vec::with_capacity(cfg.merges);
    let ids: Vec<usize> = (0..cfg.subnetworks as usize).collect();
    let mut base_model = model.clone();
    for t in 0..cfg.merges {
        let max_delay = (t as u64).min(cfg.staleness_bound);
        let delay = rng.random_range(0..=max_delay);
        let base = &history[history.len() - 1 - delay as usize];
        base_model.set_params(base)?;
        let mut grads = Vec::with_capacity(ids.len());
        for _ in &ids {
            let mask = random_mask_with(&mut rng, cfg.filters, cfg.keep_rate, MaskMode::Bernoulli)?;
            let g = cnn_gradient(&base_model, &data, Some(&mask))?;
            let grad = ModelParams::new(vec![ParamGroup::new(crate::nn::CNN_FILTERS, vec![shape.0, shape.1], g.into_raw_vec_and_offset().0)?]);
            grads.push((mask, grad));
        }
        store.apply_delayed_gradients(&ids, &grads, base.version, eta)?;
        staleness.push(delay);
        history.push_back(store.fetch());
        if history.len() > cfg.staleness_bound as usize + 1 {
            history.pop_front();
        }
        if (t + 1) % cfg.record_every == 0 || t + 1 == cfg.merges {
            model.set_params(store.params())?;
            points.push(((t + 1) as u64, full_loss(&model, &data)?));
            snapshots.push(filters_of(store.params(), shape)?);
        }
    }
    let final_loss = points.last().map(|p| p.1).unwrap_or(initial_loss);
    let drift = drift_monitor(&w0, &snapshots, cfg.drift_radius)?;
    let envelope = envelope_check(&points, th, eta, lambda0, 0.1)?;
    Ok(TheoryRun {
        lambda0,
        eta,
        theta: th,
        points,
        staleness,
        drift,
        envelope,
        initial_loss,
        final_loss,
        final_params: store.fetch(),
    })
}

/// Plain-text summary of a theory run.
pub fn format_report(run: &TheoryRun) -> String {
    format!(
        "lambda0 = {:e}\neta = {:e}\ntheta = {}\ninitial_loss = {}\nfinal_loss = {}\nloss_ratio = {}\nenvelope_rate = {}\nenvelope_floor = {}\nenvelope_compliant = {}\nenvelope_violations = {}\nmax_staleness = {}\nmax_drift = {}\n",
        run.lambda0,
        run.eta,
        run.theta,
        run.initial_loss,
        run.final_loss,
        run.final_loss / run.initial_loss,
        run.envelope.rate,
        run.envelope.floor,
        run.envelope.compliant,
        run.envelope.violations.len(),
        run.staleness.iter().max().copied().unwrap_or(0),
        run.drift.max_drift.last().copied().unwrap_or(0.0),
    )
}
