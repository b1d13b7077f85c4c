//! Dropout mask generation: i.i.d. random masks, score-ranked heterogeneous masks,
//! ordered-prefix masks and layerwise masks, plus the mask moment statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_keep_rate, Error, Result};
use crate::params::{ModelParams, UnitMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    /// Each unit kept independently with probability ξ.
    Bernoulli,
    /// Exactly `round(ξ·m)` units kept, chosen uniformly.
    ExactK,
    /// Contiguous window of the score ranking dropped (heterogeneous masks).
    ScoreWindow,
    /// Fixed prefix kept (nested submodels).
    OrderedPrefix,
    /// Units are whole layers (parameter groups).
    Layerwise,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Bernoulli => "bernoulli",
            MaskMode::ExactK => "exact-k",
            MaskMode::ScoreWindow => "score-window",
            MaskMode::OrderedPrefix => "ordered-prefix",
            MaskMode::Layerwise => "layerwise",
        }
    }
}

/// Per-unit keep indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub kept: Vec<bool>,
    pub keep_rate: f64,
    pub mode: MaskMode,
}

impl DropoutMask {
    pub fn from_kept(kept: Vec<bool>, mode: MaskMode, keep_rate: f64) -> Self {
        Self { kept, keep_rate, mode }
    }

    pub fn all_kept(num_units: usize, mode: MaskMode) -> Self {
        Self { kept: vec![true; num_units], keep_rate: 1.0, mode }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn num_kept(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn is_all_kept(&self) -> bool {
        self.kept.iter().all(|&k| k)
    }

    /// Element-wise negation `Mᶜ`.
    pub fn complement(&self) -> Self {
        Self {
            kept: self.kept.iter().map(|k| !k).collect(),
            keep_rate: 1.0 - self.keep_rate,
            mode: self.mode,
        }
    }

    pub fn dropped(&self) -> impl Iterator<Item = usize> + '_ {
        self.kept.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i)
    }
}

/// Draws a random mask over `num_units` units.
///
/// Only [`MaskMode::Bernoulli`] and [`MaskMode::ExactK`] are random modes.
pub fn random_mask(num_units: usize, keep_rate: f64, mode: MaskMode, seed: u64) -> Result<DropoutMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_mask_with(&mut rng, num_units, keep_rate, mode)
}

pub fn random_mask_with<R: Rng + ?Sized>(
    rng: &mut R,
    num_units: usize,
    keep_rate: f64,
    mode: MaskMode,
) -> Result<DropoutMask> {
    check_keep_rate(keep_rate)?;
    let kept = match mode {
        _ if keep_rate == 1.0 => vec![true; num_units],
        MaskMode::Bernoulli => (0..num_units).map(|_| rng.random_bool(keep_rate)).collect(),
        MaskMode::ExactK => {
            let k = exact_keep_count(num_units, keep_rate);
            let mut kept = vec![false; num_units];
            for i in rand::seq::index::sample(rng, num_units, k) {
                kept[i] = true;
            }
            kept
        }
        other => {
            return Err(Error::config_key(
                "mask_mode",
                format!("{} is not a random mask mode", other.as_str()),
            ))
        }
    };
    Ok(DropoutMask { kept, keep_rate, mode })
}

/// `round(ξ·m)`, the unit count kept by exact-k masks.
pub fn exact_keep_count(num_units: usize, keep_rate: f64) -> usize {
    ((keep_rate * num_units as f64).round() as usize).min(num_units)
}

/// Probability that a unit is active in at least one of `subnetworks` independent
/// masks: `1 − (1 − ξ)^S`.
pub fn theta(keep_rate: f64, subnetworks: u32) -> f64 {
    1.0 - (1.0 - keep_rate).powi(subnetworks as i32)
}

/// How scores are grouped: by the model's maskable units or by whole layers.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreGrouping {
    Units(UnitMap),
    Layers,
}

/// Per-group L1 distance of the global model from its initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scores: Vec<f64>,
    pub baseline: ModelParams,
    pub grouping: ScoreGrouping,
}

impl ScoreTable {
    /// A fresh table whose scores are all zero.
    pub fn new(baseline: ModelParams, grouping: ScoreGrouping) -> Result<Self> {
        let n = match &grouping {
            ScoreGrouping::Units(map) => {
                if !map.matches(&baseline) {
                    return Err(Error::dim("unit map does not match the baseline model"));
                }
                map.num_units()
            }
            ScoreGrouping::Layers => baseline.groups.len(),
        };
        Ok(Self { scores: vec![0.0; n], baseline, grouping })
    }

    /// Recomputes `v(W^j) = ‖W^j − W₀^j‖₁` for every group against the stored baseline.
    pub fn update(&mut self, new_global: &ModelParams) -> Result<()> {
        new_global.check_layout(&self.baseline, "score update")?;
        match &self.grouping {
            ScoreGrouping::Units(map) => {
                for (score, unit) in self.scores.iter_mut().zip(map.units()) {
                    *score = unit
                        .iter()
                        .map(|c| {
                            (new_global.groups[c.group].values[c.index]
                                - self.baseline.groups[c.group].values[c.index])
                                .abs()
                        })
                        .sum();
                }
            }
            ScoreGrouping::Layers => {
                for ((score, new), base) in
                    self.scores.iter_mut().zip(&new_global.groups).zip(&self.baseline.groups)
                {
                    *score = new.values.iter().zip(&base.values).map(|(a, b)| (a - b).abs()).sum();
                }
            }
        }
        Ok(())
    }

    /// Functional form of [`ScoreTable::update`].
    pub fn updated(&self, new_global: &ModelParams) -> Result<Self> {
        let mut t = self.clone();
        t.update(new_global)?;
        Ok(t)
    }

    /// Heterogeneous mask for a client at `level` (1 = fastest) of `levels`.
    pub fn mask_for(&self, level: usize, levels: usize, keep_rate: f64) -> Result<DropoutMask> {
        match self.grouping {
            ScoreGrouping::Units(_) => hetero_mask(&self.scores, level, levels, keep_rate),
            ScoreGrouping::Layers => layerwise_mask(&self.scores, level, levels, keep_rate),
        }
    }
}

/// Group indices sorted by score, largest first; ties by ascending index.
pub fn score_ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_level(level: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::config_key("levels", "must be at least 1"));
    }
    if level == 0 || level > levels {
        return Err(Error::config(format!("capacity level {level} outside 1..={levels}")));
    }
    Ok(())
}

/// Start offset and size of the dropped window in the score ranking for `level`.
pub fn drop_window(num_groups: usize, drop: usize, level: usize, levels: usize) -> (usize, usize) {
    let start = if levels > 1 { (level - 1) * (num_groups - drop) / (levels - 1) } else { 0 };
    (start, drop)
}

fn window_mask(scores: &[f64], level: usize, levels: usize, drop: usize, keep_rate: f64, mode: MaskMode) -> DropoutMask {
    let ranking = score_ranking(scores);
    let (start, len) = drop_window(scores.len(), drop, level, levels);
    let mut kept = vec![true; scores.len()];
    for &g in &ranking[start..start + len] {
        kept[g] = false;
    }
    DropoutMask { kept, keep_rate, mode }
}

/// Score-ranked mask: the fastest level drops the highest-score window, the slowest
/// level the lowest-score window, with evenly strided windows in between.
pub fn hetero_mask(scores: &[f64], level: usize, levels: usize, keep_rate: f64) -> Result<DropoutMask> {
    check_keep_rate(keep_rate)?;
    check_level(level, levels)?;
    let m = scores.len();
    let drop = (((1.0 - keep_rate) * m as f64).round() as usize).min(m);
    Ok(window_mask(scores, level, levels, drop, keep_rate, MaskMode::ScoreWindow))
}

/// As [`hetero_mask`] with whole layers as groups. Any ξ < 1 drops at least one layer;
/// a window covering every layer is rejected.
pub fn layerwise_mask(layer_scores: &[f64], level: usize, levels: usize, keep_rate: f64) -> Result<DropoutMask> {
    check_keep_rate(keep_rate)?;
    check_level(level, levels)?;
    let m = layer_scores.len();
    let mut drop = (((1.0 - keep_rate) * m as f64).round() as usize).min(m);
    if keep_rate < 1.0 {
        drop = drop.max(1);
    }
    if m == 0 || drop >= m {
        return Err(Error::DegenerateMask(format!(
            "layerwise mask would drop {drop} of {m} layers (whole model)"
        )));
    }
    Ok(window_mask(layer_scores, level, levels, drop, keep_rate, MaskMode::Layerwise))
}

/// Ordered-prefix mask: level `c` of `L` keeps the first `round(m·(L−c+1)/L)` units.
pub fn ordered_mask(num_units: usize, level: usize, levels: usize) -> Result<DropoutMask> {
    check_level(level, levels)?;
    let width = ((num_units * (levels - level + 1)) as f64 / levels as f64).round() as usize;
    let width = width.min(num_units);
    let kept = (0..num_units).map(|i| i < width).collect();
    let keep_rate = if num_units == 0 { 1.0 } else { width as f64 / num_units as f64 };
    Ok(DropoutMask { kept, keep_rate, mode: MaskMode::OrderedPrefix })
}

/// Monte-Carlo estimates of the off-diagonal mixing coefficient
/// `ν_{r,r'} = (N⊥/N)·Σ_s m_r⁽ˢ⁾ m_{r'}⁽ˢ⁾`, conditioned on `N⊥ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMoments {
    pub mean_nu: f64,
    pub var_nu: f64,
    /// Standard error of `mean_nu`.
    pub mean_se: f64,
    /// Standard error of `var_nu` (fourth-moment estimate).
    pub var_se: f64,
    pub theta_empirical: f64,
    pub trials: usize,
    /// Trials with `N⊥ = 1`.
    pub conditioned: usize,
}

pub const MIN_MOMENT_TRIALS: usize = 10_000;

pub fn mask_moment_stats(keep_rate: f64, subnetworks: u32, trials: usize, seed: u64) -> Result<MaskMoments> {
    check_keep_rate(keep_rate)?;
    if subnetworks == 0 {
        return Err(Error::config_key("subnetworks", "must be at least 1"));
    }
    if trials < MIN_MOMENT_TRIALS {
        return Err(Error::config_key("trials", format!("need at least {MIN_MOMENT_TRIALS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut n = 0u32;
        let mut both = 0u32;
        for _ in 0..subnetworks {
            let r = rng.random_bool(keep_rate);
            let r2 = rng.random_bool(keep_rate);
            n += r as u32;
            both += (r && r2) as u32;
        }
        if n > 0 {
            samples.push(f64::from(both) / f64::from(n));
        }
    }
    let k = samples.len();
    let theta_empirical = k as f64 / trials as f64;
    if k < 2 {
        return Ok(MaskMoments {
            mean_nu: f64::NAN,
            var_nu: f64::NAN,
            mean_se: f64::NAN,
            var_se: f64::NAN,
            theta_empirical,
            trials,
            conditioned: k,
        });
    }
    let kf = k as f64;
    let mean = samples.iter().sum::<f64>() / kf;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / kf;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / kf;
    let var = m2 * kf / (kf - 1.0);
    Ok(MaskMoments {
        mean_nu: mean,
        var_nu: var,
        mean_se: (var / kf).sqrt(),
        var_se: ((m4 - m2 * m2).max(0.0) / kf).sqrt(),
        theta_empirical,
        trials,
        conditioned: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn full_keep_rate_keeps_everything() {
        for mode in [MaskMode::Bernoulli, MaskMode::ExactK] {
            assert!(random_mask(17, 1.0, mode, 3).unwrap().is_all_kept());
        }
    }

    #[test]
    fn exact_k_count() {
        let m = random_mask(8, 0.75, MaskMode::ExactK, 11).unwrap();
        assert_eq!(m.num_kept(), 6);
    }

    #[test]
    fn bernoulli_fraction_concentrates() {
        let n = 100_000;
        let m = random_mask(n, 0.5, MaskMode::Bernoulli, 5).unwrap();
        let frac = m.num_kept() as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 3.0 * (0.25 / n as f64).sqrt(), "fraction {frac}");
    }

    #[test]
    fn bad_keep_rate_is_config_error() {
        for xi in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(random_mask(4, xi, MaskMode::ExactK, 0).unwrap_err().is_config());
        }
        assert!(hetero_mask(&[1.0], 1, 1, 0.0).is_err());
    }

    #[test]
    fn theta_values() {
        assert_eq!(theta(1.0, 3), 1.0);
        assert_eq!(theta(0.5, 2), 0.75);
        assert_eq!(theta(0.25, 1), 0.25);
    }

    #[test]
    fn complement_negates() {
        let m = random_mask(10, 0.5, MaskMode::ExactK, 2).unwrap();
        let c = m.complement();
        for (a, b) in m.kept.iter().zip(&c.kept) {
            assert_ne!(a, b);
        }
    }

    fn four_weight_model(v: f64) -> ModelParams {
        ModelParams::new(vec![ParamGroup::new("w", vec![1, 4], vec![v; 4]).unwrap()])
    }

    #[test]
    fn scores_are_l1_distance() {
        let base = four_weight_model(0.0);
        let map = UnitMap::rows_of(&base, 0).unwrap();
        let mut table = ScoreTable::new(base.clone(), ScoreGrouping::Units(map)).unwrap();
        table.update(&base).unwrap();
        assert_eq!(table.scores, vec![0.0]);
        table.update(&four_weight_model(0.5)).unwrap();
        assert_eq!(table.scores, vec![2.0]);
        let down = table.updated(&four_weight_model(-0.5)).unwrap();
        assert_eq!(down.scores, table.scores);
    }

    #[test]
    fn hetero_windows_follow_rank() {
        let scores = [5.0, 4.0, 3.0, 2.0];
        let l1 = hetero_mask(&scores, 1, 2, 0.5).unwrap();
        let l2 = hetero_mask(&scores, 2, 2, 0.5).unwrap();
        assert_eq!(l1.dropped().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(l2.dropped().collect::<Vec<_>>(), vec![2, 3]);
        assert!(hetero_mask(&scores, 1, 2, 1.0).unwrap().is_all_kept());
    }

    #[test]
    fn single_level_shares_top_window() {
        let scores = [0.1, 0.9, 0.5, 0.7];
        let m = hetero_mask(&scores, 1, 1, 0.5).unwrap();
        assert_eq!(m.dropped().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(score_ranking(&[1.0, 2.0, 1.0, 2.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn ordered_prefix_widths_nest() {
        let m = ordered_mask(8, 4, 4).unwrap();
        assert_eq!(m.kept, vec![true, true, false, false, false, false, false, false]);
        assert!(ordered_mask(8, 1, 4).unwrap().is_all_kept());
        for c in 1..4 {
            let a = ordered_mask(8, c, 4).unwrap();
            let b = ordered_mask(8, c + 1, 4).unwrap();
            assert!(b.kept.iter().zip(&a.kept).all(|(&kb, &ka)| !kb || ka));
        }
    }

    #[test]
    fn layerwise_cases() {
        assert!(matches!(layerwise_mask(&[0.3], 1, 1, 0.75), Err(Error::DegenerateMask(_))));
        assert!(layerwise_mask(&[0.3, 0.1], 1, 2, 1.0).unwrap().is_all_kept());
        let scores = [0.4, 0.1, 0.3, 0.2];
        let dropped: Vec<usize> = (1..=4)
            .map(|c| {
                let m = layerwise_mask(&scores, c, 4, 0.75).unwrap();
                assert_eq!(m.num_kept(), 3);
                let d = m.dropped().next().unwrap();
                d
            })
            .collect();
        assert_eq!(dropped, vec![0, 2, 3, 1]);
    }

    #[test]
    fn moments_degenerate_at_full_keep() {
        let s = mask_moment_stats(1.0, 3, 10_000, 1).unwrap();
        assert_eq!(s.mean_nu, 1.0);
        assert_eq!(s.var_nu, 0.0);
        assert_eq!(s.theta_empirical, 1.0);
        assert!(mask_moment_stats(0.5, 2, 100, 1).is_err());
    }

    #[test]
    fn moments_mean_matches_keep_rate() {
        let s = mask_moment_stats(0.5, 2, 100_000, 9).unwrap();
        assert!((s.mean_nu - 0.5).abs() <= 4.0 * s.mean_se);
        let th = theta(0.5, 2);
        assert!((s.theta_empirical - th).abs() <= 3.0 * (th * (1.0 - th) / 100_000.0).sqrt());
    }

    #[test]
    fn moments_variance_single_subnetwork() {
        // S = 1: ν ∈ {0, 1} with mean ξ, so Var = ξ(1−ξ) = θ − ξ².
        let s = mask_moment_stats(0.25, 1, 100_000, 4).unwrap();
        assert!((s.var_nu - 0.1875).abs() <= 4.0 * s.var_se);
    }
}
