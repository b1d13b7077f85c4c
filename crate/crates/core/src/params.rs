//! Parameter containers shared by the models, the global store and the masking code.
//!
//! A model is an ordered list of named groups, each a dense tensor stored row-major.
//! A [`UnitMap`] partitions coordinates into maskable units (CNN filters, MLP hidden
//! neurons); a [`CoordMask`] is the coordinate-level expansion of a unit mask.

use crate::error::{Error, Result};
use crate::masking::{DropoutMask, MaskMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(format!(
                "group shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { name: name.into(), shape, values })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape, values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered parameter groups plus the global update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub groups: Vec<ParamGroup>,
    pub version: u64,
}

impl ModelParams {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        Self { groups, version: 0 }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup::zeros(g.name.clone(), g.shape.clone()))
                .collect(),
            version: self.version,
        }
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.groups.iter().all(|g| g.values.iter().all(|v| v.is_finite()))
    }

    /// True when both have the same group names and shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub(crate) fn check_layout(&self, other: &ModelParams, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::dim(format!("{what}: parameter layouts differ")))
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.values.iter().copied()).collect()
    }

    /// Squared Euclidean distance to `other` over all coordinates.
    pub fn sq_distance(&self, other: &ModelParams) -> f64 {
        self.groups
            .iter()
            .zip(&other.groups)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }
}

/// A single coordinate: group index and flat index inside the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Coord {
    pub group: usize,
    pub index: usize,
}

/// Partition of (some of) a model's coordinates into maskable units.
///
/// Coordinates not owned by any unit are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitMap {
    group_sizes: Vec<usize>,
    units: Vec<Vec<Coord>>,
}

impl UnitMap {
    pub fn new(group_sizes: Vec<usize>, units: Vec<Vec<Coord>>) -> Result<Self> {
        let mut owner: Vec<Vec<bool>> = group_sizes.iter().map(|&n| vec![false; n]).collect();
        for unit in &units {
            for c in unit {
                let slot = owner
                    .get_mut(c.group)
                    .and_then(|g| g.get_mut(c.index))
                    .ok_or_else(|| Error::dim(format!("unit coordinate {c:?} out of range")))?;
                if *slot {
                    return Err(Error::Contract(format!("coordinate {c:?} owned by two units")));
                }
                *slot = true;
            }
        }
        Ok(Self { group_sizes, units })
    }

    /// Each row of a `rows × cols` group is one unit.
    pub fn rows_of(params: &ModelParams, group: usize) -> Result<Self> {
        let g = params
            .groups
            .get(group)
            .ok_or_else(|| Error::dim(format!("no group {group}")))?;
        let [rows, cols] = g.shape[..] else {
            return Err(Error::dim("row units need a rank-2 group"));
        };
        let units = (0..rows)
            .map(|r| (0..cols).map(|c| Coord { group, index: r * cols + c }).collect())
            .collect();
        Self::new(params.groups.iter().map(ParamGroup::len).collect(), units)
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit(&self, u: usize) -> &[Coord] {
        &self.units[u]
    }

    pub fn units(&self) -> &[Vec<Coord>] {
        &self.units
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.group_sizes.len() == params.groups.len()
            && self.group_sizes.iter().zip(&params.groups).all(|(&n, g)| n == g.len())
    }

    /// Expands a unit mask (or a layer mask) to coordinates.
    pub fn expand(&self, mask: &DropoutMask) -> Result<CoordMask> {
        if mask.mode == MaskMode::Layerwise {
            if mask.kept.len() != self.group_sizes.len() {
                return Err(Error::dim(format!(
                    "layer mask has {} entries for {} layers",
                    mask.kept.len(),
                    self.group_sizes.len()
                )));
            }
            let groups = self
                .group_sizes
                .iter()
                .zip(&mask.kept)
                .map(|(&n, &k)| vec![k; n])
                .collect();
            return Ok(CoordMask { groups });
        }
        if mask.kept.len() != self.units.len() {
            return Err(Error::dim(format!(
                "mask has {} entries for {} units",
                mask.kept.len(),
                self.units.len()
            )));
        }
        let mut groups: Vec<Vec<bool>> = self.group_sizes.iter().map(|&n| vec![true; n]).collect();
        for (unit, &keep) in self.units.iter().zip(&mask.kept) {
            if !keep {
                for c in unit {
                    groups[c.group][c.index] = false;
                }
            }
        }
        Ok(CoordMask { groups })
    }
}

/// Per-coordinate keep flags with the same layout as a [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordMask {
    pub groups: Vec<Vec<bool>>,
}

impl CoordMask {
    pub fn all_kept(params: &ModelParams) -> Self {
        Self { groups: params.groups.iter().map(|g| vec![true; g.len()]).collect() }
    }

    pub fn count_kept(&self) -> usize {
        self.groups.iter().map(|g| g.iter().filter(|&&k| k).count()).sum()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn complement(&self) -> Self {
        Self { groups: self.groups.iter().map(|g| g.iter().map(|k| !k).collect()).collect() }
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.groups.len() == params.groups.len()
            && self.groups.iter().zip(&params.groups).all(|(m, g)| m.len() == g.len())
    }

    /// Zeroes every dropped coordinate of `params` (the `W ⊙ M` projection).
    pub fn project(&self, params: &mut ModelParams) {
        for (m, g) in self.groups.iter().zip(params.groups.iter_mut()) {
            for (v, &k) in g.values.iter_mut().zip(m) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_three() -> ModelParams {
        ModelParams::new(vec![ParamGroup::new("w", vec![2, 3], (0..6).map(f64::from).collect()).unwrap()])
    }

    #[test]
    fn group_shape_is_checked() {
        assert!(ParamGroup::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn row_units_expand_to_rows() {
        let p = two_by_three();
        let map = UnitMap::rows_of(&p, 0).unwrap();
        assert_eq!(map.num_units(), 2);
        let mask = DropoutMask::from_kept(vec![false, true], MaskMode::ExactK, 0.5);
        let cm = map.expand(&mask).unwrap();
        assert_eq!(cm.groups[0], vec![false, false, false, true, true, true]);
        assert_eq!(cm.count_kept(), 3);
        assert_eq!(cm.complement().count_kept(), 3);
    }

    #[test]
    fn overlapping_units_rejected() {
        let c = Coord { group: 0, index: 1 };
        assert!(UnitMap::new(vec![4], vec![vec![c], vec![c]]).is_err());
    }

    #[test]
    fn projection_zeroes_dropped() {
        let mut p = two_by_three();
        let map = UnitMap::rows_of(&p, 0).unwrap();
        let cm = map.expand(&DropoutMask::from_kept(vec![true, false], MaskMode::ExactK, 0.5)).unwrap();
        cm.project(&mut p);
        assert_eq!(p.groups[0].values, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
    }
}
