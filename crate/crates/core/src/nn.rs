//! Minimal models with closed-form gradients: the patched one-hidden-layer CNN with a
//! fixed second layer, and a bias-free two-layer ReLU MLP.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::masking::DropoutMask;
use crate::params::{Coord, ModelParams, ParamGroup, UnitMap};

/// A patched image: column `j` stacks, channel by channel, pixels `j..j+q` of the
/// source with zeros past the right edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedInput {
    pub columns: Array2<f64>,
    pub patch_width: usize,
    pub channels: usize,
    pub pixels: usize,
}

impl PatchedInput {
    /// Column `j` (the patch anchored at pixel `j`).
    pub fn patch_column(&self, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.columns.column(j)
    }
}

pub fn patch(image: ArrayView2<'_, f64>, q: usize) -> Result<PatchedInput> {
    let (channels, pixels) = image.dim();
    if q == 0 || pixels == 0 || q > pixels {
        return Err(Error::InvalidPatchWidth { q, p: pixels });
    }
    let mut columns = Array2::zeros((q * channels, pixels));
    for c in 0..channels {
        for j in 0..pixels {
            for k in 0..q.min(pixels - j) {
                columns[(c * q + k, j)] = image[(c, j + k)];
            }
        }
    }
    Ok(PatchedInput { columns, patch_width: q, channels, pixels })
}

/// Patched regression inputs, ready for the CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedDataset {
    pub inputs: Vec<PatchedInput>,
    pub targets: Vec<f64>,
}

impl PatchedDataset {
    pub fn from_dataset(data: &Dataset, q: usize) -> Result<Self> {
        let targets = data
            .regression_targets()
            .ok_or_else(|| Error::dim("the CNN needs regression targets"))?
            .to_vec();
        let inputs = (0..data.len())
            .map(|i| patch(data.image(i)?, q))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// One-hidden-layer CNN `u = ξ·Σ_r Σ_j a_rj·σ(⟨x̂⁽ʲ⁾, w_r⟩)` with the second layer fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    /// Trainable filters, `m × (q·d̂)`.
    pub filters: Array2<f64>,
    second_layer: Array2<f64>,
    /// Output scale ξ of the full network.
    pub scale: f64,
    /// Initialization standard deviation κ.
    pub kappa: f64,
}

pub const CNN_FILTERS: &str = "filters";

impl CnnModel {
    /// Gaussian filters `N(0, κ²)` and random-sign second layer `±1/(p√m)`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        num_filters: usize,
        input_dim: usize,
        pixels: usize,
        kappa: f64,
        scale: f64,
    ) -> Result<Self> {
        if num_filters == 0 || input_dim == 0 || pixels == 0 {
            return Err(Error::dim("CNN dimensions must be positive"));
        }
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::config_key("kappa", "must be finite and non-negative"));
        }
        let filters = Array2::from_shape_fn((num_filters, input_dim), |_| {
            let z: f64 = StandardNormal.sample(rng);
            kappa * z
        });
        let mag = 1.0 / (pixels as f64 * (num_filters as f64).sqrt());
        let second_layer = Array2::from_shape_fn((num_filters, pixels), |_| {
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
        Ok(Self { filters, second_layer, scale, kappa })
    }

    /// Builds a model from explicit weights; `a` must hold only `±1/(p√m)`.
    pub fn from_parts(filters: Array2<f64>, second_layer: Array2<f64>, scale: f64, kappa: f64) -> Result<Self> {
        let (m, p) = second_layer.dim();
        if filters.nrows() != m {
            return Err(Error::dim(format!("{} filters but {m} second-layer rows", filters.nrows())));
        }
        let mag = 1.0 / (p as f64 * (m as f64).sqrt());
        if second_layer.iter().any(|&a| ((a.abs() - mag) / mag).abs() > 1e-12) {
            return Err(Error::Contract(format!("second-layer entries must be ±{mag}")));
        }
        if filters.iter().any(|v| !v.is_finite()) || !scale.is_finite() {
            return Err(Error::Numeric("non-finite CNN weights".into()));
        }
        Ok(Self { filters, second_layer, scale, kappa })
    }

    pub fn second_layer(&self) -> &Array2<f64> {
        &self.second_layer
    }

    pub fn num_filters(&self) -> usize {
        self.filters.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.filters.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.second_layer.ncols()
    }

    fn check_input(&self, x: &PatchedInput) -> Result<()> {
        if x.columns.dim() != (self.input_dim(), self.pixels()) {
            return Err(Error::dim(format!(
                "patched input {:?} vs model ({}, {})",
                x.columns.dim(),
                self.input_dim(),
                self.pixels()
            )));
        }
        Ok(())
    }

    /// Output from pre-activations `z = W·x̂` (`m × p`). With a keep mask the
    /// unscaled subnetwork is evaluated, otherwise the ξ-scaled full network.
    fn output_from(&self, z: &Array2<f64>, keep: Option<&[bool]>) -> f64 {
        let mut total = 0.0;
        for (r, (zr, ar)) in z.outer_iter().zip(self.second_layer.outer_iter()).enumerate() {
            if keep.is_some_and(|k| !k[r]) {
                continue;
            }
            for (&zv, &av) in zr.iter().zip(ar.iter()) {
                if zv > 0.0 {
                    total += av * zv;
                }
            }
        }
        match keep {
            None => self.scale * total,
            Some(_) => total,
        }
    }

    /// Subnetwork output `f_m(x̂) = Σ_r m_r Σ_j a_rj σ(⟨x̂⁽ʲ⁾, w_r⟩)`.
    pub fn forward_masked(&self, x: &PatchedInput, mask: &DropoutMask) -> Result<f64> {
        self.check_input(x)?;
        check_mask_len(mask, self.num_filters())?;
        Ok(self.output_from(&self.filters.dot(&x.columns), Some(&mask.kept)))
    }

    pub fn params(&self) -> ModelParams {
        let (m, d) = self.filters.dim();
        ModelParams::new(vec![ParamGroup {
            name: CNN_FILTERS.into(),
            shape: vec![m, d],
            values: self.filters.iter().copied().collect(),
        }])
    }

    pub fn set_params(&mut self, params: &ModelParams) -> Result<()> {
        let g = params
            .group(CNN_FILTERS)
            .ok_or_else(|| Error::dim("missing filters group"))?;
        if g.shape != [self.num_filters(), self.input_dim()] {
            return Err(Error::dim(format!("filters shape {:?}", g.shape)));
        }
        self.filters = Array2::from_shape_vec(self.filters.dim(), g.values.clone())
            .map_err(|e| Error::dim(e.to_string()))?;
        Ok(())
    }

    /// Filter-wise units (one per row of `W`).
    pub fn unit_map(&self) -> UnitMap {
        UnitMap::rows_of(&self.params(), 0).expect("filters group is rank 2")
    }
}

fn check_mask_len(mask: &DropoutMask, units: usize) -> Result<()> {
    if mask.len() != units {
        return Err(Error::dim(format!("mask over {} units, model has {units}", mask.len())));
    }
    Ok(())
}

/// Evaluates the ξ-scaled full network on one patched input.
pub fn cnn_forward(model: &CnnModel, x: &PatchedInput) -> Result<f64> {
    model.check_input(x)?;
    Ok(model.output_from(&model.filters.dot(&x.columns), None))
}

/// Loss and gradient over the listed samples (in order). See [`cnn_gradient`].
pub fn cnn_loss_gradient_on(
    model: &CnnModel,
    data: &PatchedDataset,
    indices: &[usize],
    mask: Option<&DropoutMask>,
) -> Result<(f64, Array2<f64>)> {
    if let Some(mask) = mask {
        check_mask_len(mask, model.num_filters())?;
    }
    let keep = mask.map(|m| m.kept.as_slice());
    let mut grad = Array2::<f64>::zeros(model.filters.dim());
    let mut preds = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let x = data
            .inputs
            .get(i)
            .ok_or_else(|| Error::dim(format!("sample {i} out of range")))?;
        model.check_input(x)?;
        let z = model.filters.dot(&x.columns);
        let u = model.output_from(&z, keep);
        let y = data.targets[i];
        preds.push(u);
        targets.push(y);
        let coef = match keep {
            None => model.scale * 2.0 * (u - y),
            Some(_) => 2.0 * (u - y),
        };
        for (r, (mut gr, (zr, ar))) in grad
            .outer_iter_mut()
            .zip(z.outer_iter().zip(model.second_layer.outer_iter()))
            .enumerate()
        {
            if keep.is_some_and(|k| !k[r]) {
                continue;
            }
            for (j, (&zv, &av)) in zr.iter().zip(ar.iter()).enumerate() {
                if zv > 0.0 {
                    gr.scaled_add(coef * av, &x.columns.column(j));
                }
            }
        }
    }
    Ok((mse_loss(&preds, &targets)?, grad))
}

/// Gradient of `L(W) = Σ_i (u_i − y_i)²` with respect to the filters.
///
/// Without a mask the ξ-scaled full network is differentiated; with a mask the
/// unscaled subnetwork `f_m` is, and rows of dropped filters are exactly zero.
/// The ReLU derivative at 0 is taken as 0.
pub fn cnn_gradient(model: &CnnModel, data: &PatchedDataset, mask: Option<&DropoutMask>) -> Result<Array2<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    cnn_loss_gradient_on(model, data, &idx, mask).map(|(_, g)| g)
}

/// Loss used by the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MlpLoss {
    /// Sum of squared residuals against one-hot targets, averaged over the batch.
    #[default]
    Mse,
    /// Softmax cross-entropy, averaged over the batch.
    SoftmaxCrossEntropy,
}

/// Bias-free two-layer ReLU network `o = W2·σ(W1·x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `hidden × input`.
    pub w1: Array2<f64>,
    /// `output × hidden`.
    pub w2: Array2<f64>,
}

pub const MLP_HIDDEN: &str = "hidden";
pub const MLP_OUTPUT: &str = "output";

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl MlpModel {
    pub fn new(w1: Array2<f64>, w2: Array2<f64>) -> Result<Self> {
        if w1.nrows() != w2.ncols() {
            return Err(Error::dim(format!(
                "W1 has {} hidden rows, W2 has {} hidden columns",
                w1.nrows(),
                w2.ncols()
            )));
        }
        Ok(Self { w1, w2 })
    }

    /// He-style initialization.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::dim("MLP dimensions must be positive"));
        }
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        let w1 = Array2::from_shape_fn((hidden, input), |_| n1.sample(rng));
        let w2 = Array2::from_shape_fn((output, hidden), |_| n2.sample(rng));
        Ok(Self { w1, w2 })
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output(&self) -> usize {
        self.w2.nrows()
    }

    pub fn params(&self) -> ModelParams {
        ModelParams::new(vec![
            ParamGroup {
                name: MLP_HIDDEN.into(),
                shape: vec![self.hidden(), self.input()],
                values: self.w1.iter().copied().collect(),
            },
            ParamGroup {
                name: MLP_OUTPUT.into(),
                shape: vec![self.output(), self.hidden()],
                values: self.w2.iter().copied().collect(),
            },
        ])
    }

    pub fn set_params(&mut self, params: &ModelParams) -> Result<()> {
        let get = |name: &str, dim: (usize, usize)| -> Result<Array2<f64>> {
            let g = params.group(name).ok_or_else(|| Error::dim(format!("missing group {name}")))?;
            Array2::from_shape_vec(dim, g.values.clone()).map_err(|e| Error::dim(e.to_string()))
        };
        self.w1 = get(MLP_HIDDEN, self.w1.dim())?;
        self.w2 = get(MLP_OUTPUT, self.w2.dim())?;
        Ok(())
    }

    /// Hidden neuron `k` owns row `k` of `W1` and column `k` of `W2`.
    pub fn unit_map(&self) -> UnitMap {
        let (h, i, o) = (self.hidden(), self.input(), self.output());
        let units = (0..h)
            .map(|k| {
                (0..i)
                    .map(|c| Coord { group: 0, index: k * i + c })
                    .chain((0..o).map(|r| Coord { group: 1, index: r * h + k }))
                    .collect()
            })
            .collect();
        UnitMap::new(vec![h * i, o * h], units).expect("disjoint hidden units")
    }

    fn hidden_activations(&self, inputs: ArrayView2<'_, f64>, keep: Option<&[bool]>) -> (Array2<f64>, Array2<f64>) {
        let z = inputs.dot(&self.w1.t());
        let mut h = z.mapv(|v| if v > 0.0 { v } else { 0.0 });
        if let Some(keep) = keep {
            for (k, mut col) in h.axis_iter_mut(Axis(1)).enumerate() {
                if !keep[k] {
                    col.fill(0.0);
                }
            }
        }
        (z, h)
    }

    /// Raw outputs for a batch (`batch × output`).
    pub fn predict(&self, inputs: ArrayView2<'_, f64>, mask: Option<&DropoutMask>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input() {
            return Err(Error::dim(format!("inputs have {} features, model expects {}", inputs.ncols(), self.input())));
        }
        if let Some(m) = mask {
            check_mask_len(m, self.hidden())?;
        }
        let (_, h) = self.hidden_activations(inputs, mask.map(|m| m.kept.as_slice()));
        Ok(h.dot(&self.w2.t()))
    }
}

/// A batch with dense targets (`batch × output`, one-hot for classification).
#[derive(Debug, Clone, Copy)]
pub struct MlpBatch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
}

/// Batch-mean loss and its gradients; dropped hidden neurons contribute nothing and
/// receive zero gradient in both layers.
pub fn mlp_forward_backward(
    model: &MlpModel,
    batch: MlpBatch<'_>,
    mask: Option<&DropoutMask>,
    loss: MlpLoss,
) -> Result<(f64, MlpGradients)> {
    let b = batch.inputs.nrows();
    if batch.targets.dim() != (b, model.output()) {
        return Err(Error::dim(format!(
            "targets {:?} vs batch {b} × {} outputs",
            batch.targets.dim(),
            model.output()
        )));
    }
    if b == 0 {
        return Err(Error::dim("empty batch"));
    }
    let out = model.predict(batch.inputs, mask)?;
    let keep = mask.map(|m| m.kept.as_slice());
    let (z, h) = model.hidden_activations(batch.inputs, keep);
    let bf = b as f64;
    let (value, d_out) = match loss {
        MlpLoss::Mse => {
            let resid = &out - &batch.targets;
            let value = resid.iter().map(|r| r * r).sum::<f64>() / bf;
            (value, resid.mapv(|r| 2.0 * r / bf))
        }
        MlpLoss::SoftmaxCrossEntropy => {
            let mut d = Array2::zeros(out.dim());
            let mut value = 0.0;
            for ((o, y), mut drow) in out.outer_iter().zip(batch.targets.outer_iter()).zip(d.outer_iter_mut()) {
                let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Array1<f64> = o.mapv(|v| (v - max).exp());
                let sum = exps.sum();
                let log_sum = sum.ln() + max;
                value += y.iter().zip(o.iter()).map(|(&yv, &ov)| -yv * (ov - log_sum)).sum::<f64>();
                let ysum = y.sum();
                for ((dv, &e), &yv) in drow.iter_mut().zip(exps.iter()).zip(y.iter()) {
                    *dv = (ysum * e / sum - yv) / bf;
                }
            }
            (value / bf, d)
        }
    };
    let w2 = d_out.t().dot(&h);
    let mut d_hidden = d_out.dot(&model.w2);
    for ((r, k), dh) in d_hidden.indexed_iter_mut() {
        if z[(r, k)] <= 0.0 || keep.is_some_and(|m| !m[k]) {
            *dh = 0.0;
        }
    }
    let w1 = d_hidden.t().dot(&batch.inputs);
    Ok((value, MlpGradients { w1, w2 }))
}

/// `Σ_i (p_i − t_i)²`, without a `1/n` factor.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::dim(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// In-place `w ← w − η·g`.
pub fn sgd_step(params: &mut [f64], gradient: &[f64], lr: f64) -> Result<()> {
    if params.len() != gradient.len() {
        return Err(Error::dim(format!("{} params vs {} gradient entries", params.len(), gradient.len())));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config_key("learning_rate", format!("{lr} is not a valid step size")));
    }
    if let Some(bad) = gradient.iter().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {bad}")));
    }
    for (w, g) in params.iter_mut().zip(gradient) {
        *w -= lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskMode;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_identity_width() {
        let img = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let p = patch(img.view(), 1).unwrap();
        assert_eq!(p.columns, img);
    }

    #[test]
    fn patch_zero_pads_right() {
        let img = array![[1.0, 2.0, 3.0]];
        let p = patch(img.view(), 2).unwrap();
        assert_eq!(p.columns, array![[1.0, 2.0, 3.0], [2.0, 3.0, 0.0]]);
    }

    #[test]
    fn patch_zero_image_and_bad_width() {
        let img = Array2::<f64>::zeros((3, 5));
        let p = patch(img.view(), 3).unwrap();
        assert_eq!(p.columns.dim(), (9, 5));
        assert!(p.columns.iter().all(|&v| v == 0.0));
        assert!(matches!(patch(img.view(), 6), Err(Error::InvalidPatchWidth { q: 6, p: 5 })));
        assert!(patch(img.view(), 0).is_err());
    }

    #[test]
    fn patch_norm_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for q in 1..=4 {
            let img = Array2::from_shape_fn((2, 6), |_| rng.random_range(-1.0..1.0));
            let p = patch(img.view(), q).unwrap();
            let src = img.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dst = p.columns.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dst <= (q as f64).sqrt() * src + 1e-12);
        }
    }

    fn scalar_model() -> CnnModel {
        CnnModel::from_parts(array![[1.0, 0.0]], array![[1.0]], 1.0, 1.0).unwrap()
    }

    #[test]
    fn scalar_forward() {
        let x = PatchedInput { columns: array![[2.0], [5.0]], patch_width: 2, channels: 1, pixels: 1 };
        assert_eq!(cnn_forward(&scalar_model(), &x).unwrap(), 2.0);
    }

    #[test]
    fn forward_zero_weights_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = CnnModel::random(&mut rng, 4, 6, 5, 1.0, 1.0).unwrap();
        let img = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let x = patch(img.view(), 2).unwrap();
        let u = cnn_forward(&model, &x).unwrap();
        model.scale = 2.0;
        assert_eq!(cnn_forward(&model, &x).unwrap(), 2.0 * u);
        model.filters.fill(0.0);
        assert_eq!(cnn_forward(&model, &x).unwrap(), 0.0);
    }

    #[test]
    fn second_layer_validated() {
        assert!(CnnModel::from_parts(array![[1.0]], array![[0.5]], 1.0, 1.0).is_err());
        assert!(CnnModel::from_parts(array![[1.0], [1.0]], array![[0.5]], 1.0, 1.0).is_err());
    }

    fn tiny_cnn_data(rng: &mut ChaCha8Rng, model: &CnnModel, n: usize, zero_residual: bool) -> PatchedDataset {
        let inputs: Vec<PatchedInput> = (0..n)
            .map(|_| {
                let img = Array2::from_shape_fn((2, model.pixels()), |_| rng.random_range(-1.0..1.0));
                patch(img.view(), model.input_dim() / 2).unwrap()
            })
            .collect();
        let targets = inputs
            .iter()
            .map(|x| if zero_residual { cnn_forward(model, x).unwrap() } else { rng.random_range(-1.0..1.0) })
            .collect();
        PatchedDataset { inputs, targets }
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = CnnModel::random(&mut rng, 6, 4, 3, 1.0, 0.5).unwrap();
        let data = tiny_cnn_data(&mut rng, &model, 5, true);
        let g = cnn_gradient(&model, &data, None).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropped_filter_rows_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = CnnModel::random(&mut rng, 6, 4, 3, 1.0, 1.0).unwrap();
        let data = tiny_cnn_data(&mut rng, &model, 5, false);
        let mask = DropoutMask::from_kept(vec![true, false, true, true, false, true], MaskMode::ExactK, 4.0 / 6.0);
        let g = cnn_gradient(&model, &data, Some(&mask)).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        assert!(g.row(4).iter().all(|&v| v == 0.0));
        assert!(g.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn masked_sgd_never_moves_dropped_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = CnnModel::random(&mut rng, 5, 4, 3, 1.0, 1.0).unwrap();
        let data = tiny_cnn_data(&mut rng, &model, 6, false);
        let mask = DropoutMask::from_kept(vec![false, true, true, false, true], MaskMode::ExactK, 0.6);
        let before = model.filters.clone();
        for _ in 0..25 {
            let g = cnn_gradient(&model, &data, Some(&mask)).unwrap();
            sgd_step(model.filters.as_slice_mut().unwrap(), g.as_slice().unwrap(), 0.05).unwrap();
        }
        assert_eq!(model.filters.row(0), before.row(0));
        assert_eq!(model.filters.row(3), before.row(3));
        assert_ne!(model.filters.row(1), before.row(1));
    }

    #[test]
    fn relu_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = CnnModel::random(&mut rng, 4, 4, 3, 1.0, 1.0).unwrap();
        let img = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let x = patch(img.view(), 2).unwrap();
        let z = model.filters.dot(&x.columns).mapv(|v| v.max(0.0));
        let c = 2.5;
        let zc = model.filters.dot(&(&x.columns * c)).mapv(|v| v.max(0.0));
        for (a, b) in z.iter().zip(zc.iter()) {
            assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn mlp_mask_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MlpModel::random(&mut rng, 5, 7, 3).unwrap();
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, 3), |(r, c)| if r % 3 == c { 1.0 } else { 0.0 });
        let batch = MlpBatch { inputs: x.view(), targets: y.view() };
        let (l0, g0) = mlp_forward_backward(&model, batch, None, MlpLoss::Mse).unwrap();
        let full = DropoutMask::all_kept(7, MaskMode::ExactK);
        let (l1, g1) = mlp_forward_backward(&model, batch, Some(&full), MlpLoss::Mse).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);

        let none = DropoutMask::from_kept(vec![false; 7], MaskMode::ExactK, 0.0);
        let out = model.predict(x.view(), Some(&none)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let (_, g) = mlp_forward_backward(&model, batch, Some(&none), MlpLoss::Mse).unwrap();
        assert!(g.w1.iter().chain(g.w2.iter()).all(|&v| v == 0.0));

        let some = DropoutMask::from_kept(vec![true, false, true, true, true, false, true], MaskMode::ExactK, 5.0 / 7.0);
        let (_, g) = mlp_forward_backward(&model, batch, Some(&some), MlpLoss::SoftmaxCrossEntropy).unwrap();
        assert!(g.w1.row(1).iter().all(|&v| v == 0.0));
        assert!(g.w2.column(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_unit_map_couples_row_and_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MlpModel::random(&mut rng, 2, 3, 2).unwrap();
        let map = model.unit_map();
        assert_eq!(map.num_units(), 3);
        assert_eq!(
            map.unit(1),
            &[
                Coord { group: 0, index: 2 },
                Coord { group: 0, index: 3 },
                Coord { group: 1, index: 1 },
                Coord { group: 1, index: 4 }
            ]
        );
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(mse_loss(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap(), 14.0);
        assert!(mse_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        sgd_step(&mut p, &[2.0], 0.5).unwrap();
        assert_eq!(p, vec![0.0]);
        let mut q = vec![3.0, -1.0];
        sgd_step(&mut q, &[0.0, 0.0], 0.1).unwrap();
        sgd_step(&mut q, &[5.0, 5.0], 0.0).unwrap();
        assert_eq!(q, vec![3.0, -1.0]);
        assert!(matches!(sgd_step(&mut q, &[f64::NAN, 0.0], 0.1), Err(Error::Numeric(_))));
    }
}
