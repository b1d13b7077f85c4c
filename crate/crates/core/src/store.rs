//! The shared global model: versioned fetch, masked asynchronous write-back and the
//! baseline merge variants.
//!
//! Every committed merge bumps the version by exactly one. Staleness of an update is
//! the number of commits between its fetch and its own commit.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::masking::{DropoutMask, ScoreGrouping, ScoreTable};
use crate::params::{CoordMask, ModelParams, UnitMap};
use crate::strategies::StrategyKind;

/// One client's trained submodel, ready to be written back.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEnvelope {
    pub client_id: usize,
    pub strategy: Option<StrategyKind>,
    pub mask: DropoutMask,
    /// Full-layout parameters; coordinates outside the mask are zero.
    pub local_params: ModelParams,
    pub base_version: u64,
    /// Set when the update is committed (or buffered).
    pub staleness: Option<u64>,
}

impl UpdateEnvelope {
    /// Wraps locally trained parameters, zeroing everything the mask drops.
    pub fn new(
        client_id: usize,
        mask: DropoutMask,
        mut local_params: ModelParams,
        base_version: u64,
        unit_map: &UnitMap,
    ) -> Result<Self> {
        let cm = unit_map.expand(&mask)?;
        if !cm.matches(&local_params) {
            return Err(Error::dim("mask does not match local parameters"));
        }
        cm.project(&mut local_params);
        local_params.version = base_version;
        Ok(Self { client_id, strategy: None, mask, local_params, base_version, staleness: None })
    }

    pub fn with_strategy(mut self, kind: StrategyKind) -> Self {
        self.strategy = Some(kind);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Committed(u64),
    /// Held in the buffer; `pending` updates are waiting.
    Buffered { pending: usize },
}

impl MergeOutcome {
    pub fn committed(self) -> Option<u64> {
        match self {
            MergeOutcome::Committed(v) => Some(v),
            MergeOutcome::Buffered { .. } => None,
        }
    }
}

/// One entry of the commit log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitRecord {
    pub client_id: usize,
    pub base_version: u64,
    /// Version before this update was applied (or buffered).
    pub observed_version: u64,
    pub staleness: u64,
}

/// Serialized-mode global store.
#[derive(Debug, Clone)]
pub struct GlobalStore {
    params: ModelParams,
    unit_map: UnitMap,
    scores: Option<ScoreTable>,
    buffer: Vec<UpdateEnvelope>,
    log: Vec<CommitRecord>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::config_key("alpha", format!("{alpha} is outside (0, 1]")))
    }
}

impl GlobalStore {
    pub fn new(mut initial: ModelParams, unit_map: UnitMap) -> Result<Self> {
        if !unit_map.matches(&initial) {
            return Err(Error::dim("unit map does not match the model"));
        }
        if !initial.all_finite() {
            return Err(Error::Numeric("initial model has non-finite values".into()));
        }
        initial.version = 0;
        Ok(Self { params: initial, unit_map, scores: None, buffer: Vec::new(), log: Vec::new() })
    }

    /// Tracks update scores against the current (initial) model after every commit.
    pub fn with_scores(mut self, grouping: ScoreGrouping) -> Result<Self> {
        self.scores = Some(ScoreTable::new(self.params.clone(), grouping)?);
        Ok(self)
    }

    pub fn scores(&self) -> Option<&ScoreTable> {
        self.scores.as_ref()
    }

    /// Snapshot of the full model; its `version` field is the store version.
    pub fn fetch(&self) -> ModelParams {
        self.params.clone()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.params.version
    }

    pub fn unit_map(&self) -> &UnitMap {
        &self.unit_map
    }

    pub fn log(&self) -> &[CommitRecord] {
        &self.log
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    fn stamp(&mut self, env: &mut UpdateEnvelope) -> Result<()> {
        if env.base_version > self.version() {
            return Err(Error::Contract(format!(
                "update based on version {} but store is at {}",
                env.base_version,
                self.version()
            )));
        }
        if !env.local_params.same_layout(&self.params) {
            return Err(Error::dim("update layout differs from the global model"));
        }
        let staleness = self.version() - env.base_version;
        env.staleness = Some(staleness);
        self.log.push(CommitRecord {
            client_id: env.client_id,
            base_version: env.base_version,
            observed_version: self.version(),
            staleness,
        });
        Ok(())
    }

    /// `W ← W ⊙ Mᶜ + ((1−α)·W + α·W_i) ⊙ M`, coordinate-wise.
    fn commit(&mut self, local: &ModelParams, mask: &CoordMask, alpha: f64) -> Result<u64> {
        check_alpha(alpha)?;
        for ((g, l), m) in self.params.groups.iter().zip(&local.groups).zip(&mask.groups) {
            if let Some((i, v)) = l.values.iter().zip(m).enumerate().find_map(|(i, (v, &k))| {
                (k && !v.is_finite()).then_some((i, *v))
            }) {
                return Err(Error::Numeric(format!("merge rejected: {}[{i}] = {v}", g.name)));
            }
        }
        for ((g, l), m) in self.params.groups.iter_mut().zip(&local.groups).zip(&mask.groups) {
            for ((w, &wi), &k) in g.values.iter_mut().zip(&l.values).zip(m) {
                if k {
                    *w = (1.0 - alpha) * *w + alpha * wi;
                }
            }
        }
        self.params.version += 1;
        if let Some(t) = self.scores.as_mut() {
            t.update(&self.params)?;
        }
        Ok(self.params.version)
    }

    /// Convex write-back on the coordinates kept by the envelope's mask; the rest stay untouched.
    pub fn masked_merge(&mut self, env: &mut UpdateEnvelope, alpha: f64) -> Result<u64> {
        check_alpha(alpha)?;
        let mask = self.unit_map.expand(&env.mask)?;
        self.stamp(env)?;
        self.commit(&env.local_params, &mask, alpha)
    }

    /// `W ← (1−α)·W + α·W_i` on every coordinate.
    pub fn plain_merge(&mut self, env: &mut UpdateEnvelope, alpha: f64) -> Result<u64> {
        check_alpha(alpha)?;
        self.stamp(env)?;
        let mask = CoordMask::all_kept(&self.params);
        self.commit(&env.local_params, &mask, alpha)
    }

    /// Plain merge with staleness-decayed mixing `α / (1 + δ)`.
    pub fn weighted_merge(&mut self, env: &mut UpdateEnvelope, alpha_base: f64) -> Result<u64> {
        check_alpha(alpha_base)?;
        self.stamp(env)?;
        let delta = env.staleness.unwrap_or(0);
        let mask = CoordMask::all_kept(&self.params);
        self.commit(&env.local_params, &mask, weighted_alpha(alpha_base, delta))
    }

    /// Buffers updates; every `capacity`-th call averages the buffer and commits it.
    pub fn buffered_merge(&mut self, env: &mut UpdateEnvelope, capacity: usize, alpha: f64) -> Result<MergeOutcome> {
        if capacity == 0 {
            return Err(Error::config_key("buffer_size", "must be at least 1"));
        }
        check_alpha(alpha)?;
        self.stamp(env)?;
        self.buffer.push(env.clone());
        if self.buffer.len() < capacity {
            return Ok(MergeOutcome::Buffered { pending: self.buffer.len() });
        }
        let buffer = std::mem::take(&mut self.buffer);
        let refs: Vec<&UpdateEnvelope> = buffer.iter().collect();
        let (avg, mask) = self.average_kept(&refs)?;
        self.commit(&avg, &mask, alpha).map(MergeOutcome::Committed)
    }

    /// Simultaneous merge of `S` updates sharing a base version: each unit takes the
    /// average of the subnetworks that kept it (normalizer `max{Σ_s m_r, 1}`), then the
    /// masked rule applies with the union mask.
    pub fn group_averaged_merge(&mut self, envs: &mut [UpdateEnvelope], alpha: f64) -> Result<u64> {
        check_alpha(alpha)?;
        let Some(first) = envs.first() else {
            return Err(Error::Contract("group merge needs at least one update".into()));
        };
        let base = first.base_version;
        if envs.iter().any(|e| e.base_version != base) {
            return Err(Error::Contract("group merge over mixed base versions".into()));
        }
        for env in envs.iter_mut() {
            self.stamp(env)?;
        }
        let refs: Vec<&UpdateEnvelope> = envs.iter().collect();
        let (avg, mask) = self.average_kept(&refs)?;
        self.commit(&avg, &mask, alpha)
    }

    /// Delayed masked gradient step `w_r ← w_r − η·(N⊥/N)·Σ_s g_r⁽ˢ⁾`, where each
    /// gradient was computed at `base_version` under its own mask.
    pub fn apply_delayed_gradients(
        &mut self,
        client_ids: &[usize],
        grads: &[(DropoutMask, ModelParams)],
        base_version: u64,
        lr: f64,
    ) -> Result<u64> {
        if grads.is_empty() || client_ids.len() != grads.len() {
            return Err(Error::Contract("one client id per gradient required".into()));
        }
        if base_version > self.version() {
            return Err(Error::Contract("gradient from the future".into()));
        }
        let masks = grads
            .iter()
            .map(|(m, g)| {
                g.check_layout(&self.params, "delayed gradient")?;
                self.unit_map.expand(m)
            })
            .collect::<Result<Vec<_>>>()?;
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric("non-finite delayed gradient".into()));
        }
        let staleness = self.version() - base_version;
        for &id in client_ids {
            self.log.push(CommitRecord {
                client_id: id,
                base_version,
                observed_version: self.version(),
                staleness,
            });
        }
        for (gi, group) in self.params.groups.iter_mut().enumerate() {
            for (i, w) in group.values.iter_mut().enumerate() {
                let mut n = 0u32;
                let mut sum = 0.0;
                for ((_, g), m) in grads.iter().zip(&masks) {
                    if m.groups[gi][i] {
                        sum += g.groups[gi].values[i];
                        n += 1;
                    }
                }
                if n > 0 {
                    *w -= lr * (sum / f64::from(n));
                }
            }
        }
        self.params.version += 1;
        if let Some(t) = self.scores.as_mut() {
            t.update(&self.params)?;
        }
        Ok(self.params.version)
    }

    /// Per-coordinate average over the updates that kept it, plus the union mask.
    fn average_kept(&self, envs: &[&UpdateEnvelope]) -> Result<(ModelParams, CoordMask)> {
        let masks = envs
            .iter()
            .map(|e| self.unit_map.expand(&e.mask))
            .collect::<Result<Vec<_>>>()?;
        let mut avg = self.params.zeros_like();
        let mut union = CoordMask { groups: avg.groups.iter().map(|g| vec![false; g.len()]).collect() };
        for (gi, group) in avg.groups.iter_mut().enumerate() {
            for (i, out) in group.values.iter_mut().enumerate() {
                let mut n = 0u32;
                let mut sum = 0.0;
                for (env, m) in envs.iter().zip(&masks) {
                    if m.groups[gi][i] {
                        let v = env.local_params.groups[gi].values[i];
                        sum = if n == 0 { v } else { sum + v };
                        n += 1;
                    }
                }
                if n > 0 {
                    *out = if n == 1 { sum } else { sum / f64::from(n) };
                    union.groups[gi][i] = true;
                }
            }
        }
        Ok((avg, union))
    }
}

/// `α_base / (1 + δ)`.
pub fn weighted_alpha(alpha_base: f64, staleness: u64) -> f64 {
    alpha_base / (1.0 + staleness as f64)
}

/// Lock-free-style store for the threaded demonstration: each group sits behind its own
/// lock, so merges of one group are atomic while readers may see groups at different
/// versions.
#[derive(Debug)]
pub struct ConcurrentStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    groups: Vec<RwLock<Vec<f64>>>,
    version: AtomicU64,
    unit_map: UnitMap,
}

impl ConcurrentStore {
    pub fn new(initial: ModelParams, unit_map: UnitMap) -> Result<Self> {
        if !unit_map.matches(&initial) {
            return Err(Error::dim("unit map does not match the model"));
        }
        Ok(Self {
            names: initial.groups.iter().map(|g| g.name.clone()).collect(),
            shapes: initial.groups.iter().map(|g| g.shape.clone()).collect(),
            groups: initial.groups.into_iter().map(|g| RwLock::new(g.values)).collect(),
            version: AtomicU64::new(0),
            unit_map,
        })
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }

    pub fn unit_map(&self) -> &UnitMap {
        &self.unit_map
    }

    /// Per-group consistent snapshot tagged with the version observed before reading.
    pub fn fetch(&self) -> ModelParams {
        let version = self.version();
        let groups = self
            .groups
            .iter()
            .zip(&self.names)
            .zip(&self.shapes)
            .map(|((lock, name), shape)| crate::params::ParamGroup {
                name: name.clone(),
                shape: shape.clone(),
                values: lock.read().clone(),
            })
            .collect();
        ModelParams { groups, version }
    }

    pub fn masked_merge(&self, env: &mut UpdateEnvelope, alpha: f64) -> Result<u64> {
        check_alpha(alpha)?;
        let mask = self.unit_map.expand(&env.mask)?;
        if !env.local_params.all_finite() {
            return Err(Error::Numeric("merge rejected: non-finite local values".into()));
        }
        for ((lock, l), m) in self.groups.iter().zip(&env.local_params.groups).zip(&mask.groups) {
            let mut g = lock.write();
            for ((w, &wi), &k) in g.iter_mut().zip(&l.values).zip(m) {
                if k {
                    *w = (1.0 - alpha) * *w + alpha * wi;
                }
            }
        }
        let prev = self.version.fetch_add(1, Ordering::AcqRel);
        env.staleness = Some(prev.saturating_sub(env.base_version));
        Ok(prev + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskMode;
    use crate::params::{Coord, ParamGroup};

    fn vec_model(values: Vec<f64>) -> (ModelParams, UnitMap) {
        let n = values.len();
        let p = ModelParams::new(vec![ParamGroup::new("w", vec![n], values).unwrap()]);
        let units = (0..n).map(|i| vec![Coord { group: 0, index: i }]).collect();
        let map = UnitMap::new(vec![n], units).unwrap();
        (p, map)
    }

    fn env(store: &GlobalStore, values: Vec<f64>, kept: Vec<bool>) -> UpdateEnvelope {
        let (local, _) = vec_model(values);
        let mask = DropoutMask::from_kept(kept, MaskMode::ExactK, 0.5);
        UpdateEnvelope::new(0, mask, local, store.version(), store.unit_map()).unwrap()
    }

    #[test]
    fn fetch_versions() {
        let (p, map) = vec_model(vec![1.0, 2.0]);
        let mut store = GlobalStore::new(p.clone(), map).unwrap();
        assert_eq!(store.fetch(), p);
        assert_eq!(store.fetch(), store.fetch());
        let mut e = env(&store, vec![0.0, 0.0], vec![true, true]);
        assert_eq!(store.masked_merge(&mut e, 0.5).unwrap(), 1);
        assert_eq!(store.fetch().version, 1);
    }

    #[test]
    fn masked_merge_reference_case() {
        let (p, map) = vec_model(vec![1.0, 2.0]);
        let mut store = GlobalStore::new(p, map).unwrap();
        let mut e = env(&store, vec![3.0, 99.0], vec![true, false]);
        assert_eq!(e.local_params.groups[0].values[1], 0.0);
        store.masked_merge(&mut e, 0.5).unwrap();
        assert_eq!(store.params().groups[0].values, vec![2.0, 2.0]);
        assert_eq!(e.staleness, Some(0));
    }

    #[test]
    fn masked_merge_extremes() {
        let (p, map) = vec_model(vec![1.0, 2.0, 3.0]);
        let mut store = GlobalStore::new(p.clone(), map).unwrap();
        let mut e = env(&store, vec![7.0, 8.0, 9.0], vec![false; 3]);
        store.masked_merge(&mut e, 1.0).unwrap();
        assert_eq!(store.params().groups, p.groups);
        assert_eq!(store.version(), 1);
        let mut e = env(&store, vec![7.0, 8.0, 9.0], vec![true; 3]);
        store.masked_merge(&mut e, 1.0).unwrap();
        assert_eq!(store.params().groups[0].values, vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let (p, map) = vec_model(vec![1.0, 2.0]);
        let mut store = GlobalStore::new(p.clone(), map).unwrap();
        let mut e = env(&store, vec![f64::NAN, 1.0], vec![true, true]);
        assert!(matches!(store.masked_merge(&mut e, 0.5), Err(Error::Numeric(_))));
        assert_eq!(store.version(), 0);
        assert_eq!(store.params(), &p);
    }

    #[test]
    fn plain_and_weighted() {
        let (p, map) = vec_model(vec![2.0]);
        let mut store = GlobalStore::new(p, map).unwrap();
        let mut e = env(&store, vec![4.0], vec![true]);
        store.plain_merge(&mut e, 0.5).unwrap();
        assert_eq!(store.params().groups[0].values, vec![3.0]);
        let mut same = env(&store, vec![3.0], vec![true]);
        store.plain_merge(&mut same, 0.5).unwrap();
        assert_eq!(store.params().groups[0].values, vec![3.0]);
        assert_eq!(weighted_alpha(0.5, 0), 0.5);
        assert_eq!(weighted_alpha(0.5, 1), 0.25);
        assert!(weighted_alpha(0.5, 1 << 40) < 1e-12);
    }

    #[test]
    fn weighted_uses_staleness() {
        let (p, map) = vec_model(vec![0.0]);
        let mut store = GlobalStore::new(p, map).unwrap();
        let mut stale = env(&store, vec![8.0], vec![true]);
        let mut fresh = env(&store, vec![0.0], vec![true]);
        store.plain_merge(&mut fresh, 1.0).unwrap();
        store.weighted_merge(&mut stale, 0.5).unwrap();
        assert_eq!(stale.staleness, Some(1));
        assert_eq!(store.params().groups[0].values, vec![2.0]);
    }

    #[test]
    fn buffer_averages_then_commits() {
        let (p, map) = vec_model(vec![0.0]);
        let mut store = GlobalStore::new(p, map).unwrap();
        let mut a = env(&store, vec![2.0], vec![true]);
        let mut b = env(&store, vec![4.0], vec![true]);
        assert_eq!(store.buffered_merge(&mut a, 2, 1.0).unwrap(), MergeOutcome::Buffered { pending: 1 });
        assert_eq!(store.version(), 0);
        assert_eq!(store.buffered_merge(&mut b, 2, 1.0).unwrap(), MergeOutcome::Committed(1));
        assert_eq!(store.params().groups[0].values, vec![3.0]);
        assert_eq!(store.buffered(), 0);
    }

    #[test]
    fn group_average_normalizes_per_unit() {
        let (p, map) = vec_model(vec![10.0, 20.0, 30.0]);
        let mut store = GlobalStore::new(p, map).unwrap();
        let mut envs = vec![
            env(&store, vec![1.0, 5.0, 0.0], vec![true, true, false]),
            env(&store, vec![3.0, 0.0, 0.0], vec![true, false, false]),
        ];
        store.group_averaged_merge(&mut envs, 1.0).unwrap();
        assert_eq!(store.params().groups[0].values, vec![2.0, 5.0, 30.0]);
    }

    #[test]
    fn group_average_rejects_mixed_bases() {
        let (p, map) = vec_model(vec![0.0]);
        let mut store = GlobalStore::new(p, map).unwrap();
        let a = env(&store, vec![1.0], vec![true]);
        let mut warm = env(&store, vec![1.0], vec![true]);
        store.plain_merge(&mut warm, 1.0).unwrap();
        let b = env(&store, vec![1.0], vec![true]);
        assert!(matches!(store.group_averaged_merge(&mut [a, b], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn delayed_gradient_rule() {
        let (p, map) = vec_model(vec![1.0, 1.0, 1.0]);
        let mut store = GlobalStore::new(p, map).unwrap();
        let (g1, _) = vec_model(vec![2.0, 4.0, 8.0]);
        let (g2, _) = vec_model(vec![4.0, 0.0, 0.0]);
        let m1 = DropoutMask::from_kept(vec![true, true, false], MaskMode::Bernoulli, 0.5);
        let m2 = DropoutMask::from_kept(vec![true, false, false], MaskMode::Bernoulli, 0.5);
        store.apply_delayed_gradients(&[0, 1], &[(m1, g1), (m2, g2)], 0, 0.5).unwrap();
        assert_eq!(store.params().groups[0].values, vec![1.0 - 0.5 * 3.0, 1.0 - 0.5 * 4.0, 1.0]);
    }

    #[test]
    fn concurrent_store_merges() {
        let (p, map) = vec_model(vec![1.0, 2.0]);
        let store = ConcurrentStore::new(p, map.clone()).unwrap();
        let (local, _) = vec_model(vec![3.0, 5.0]);
        let mask = DropoutMask::from_kept(vec![true, false], MaskMode::ExactK, 0.5);
        let mut e = UpdateEnvelope::new(0, mask, local, 0, &map).unwrap();
        assert_eq!(store.masked_merge(&mut e, 0.5).unwrap(), 1);
        assert_eq!(store.fetch().groups[0].values, vec![2.0, 2.0]);
    }
}
