use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// How each feature row is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLayout {
    Flat,
    /// Row-major `channels × pixels` image.
    Image { channels: usize, pixels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression { values: Vec<f64>, bound: Option<f64> },
    Classes { labels: Vec<usize>, num_classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression { values, .. } => values.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples (one per feature row) and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub layout: SampleLayout,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(features: Array2<f64>, layout: SampleLayout, targets: Targets) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if let SampleLayout::Image { channels, pixels } = layout {
            if channels * pixels != features.ncols() {
                return Err(Error::dim(format!(
                    "image layout {channels}x{pixels} does not match feature width {}",
                    features.ncols()
                )));
            }
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::dim(format!("label {bad} outside {num_classes} classes")));
            }
        }
        Ok(Self { features, layout, targets })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Sample `i` as a `channels × pixels` view.
    pub fn image(&self, i: usize) -> Result<ArrayView2<'_, f64>> {
        let SampleLayout::Image { channels, pixels } = self.layout else {
            return Err(Error::dim("dataset does not hold images"));
        };
        let row = self.features.row(i);
        row.into_shape_with_order((channels, pixels))
            .map_err(|e| Error::dim(e.to_string()))
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Regression { .. } => None,
        }
    }

    pub fn regression_targets(&self) -> Option<&[f64]> {
        match &self.targets {
            Targets::Regression { values, .. } => Some(values),
            Targets::Classes { .. } => None,
        }
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Regression { .. } => None,
        }
    }

    /// Copies the given rows (in the given order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = self.features.select(Axis(0), indices);
        let targets = match &self.targets {
            Targets::Regression { values, bound } => Targets::Regression {
                values: indices.iter().map(|&i| values[i]).collect(),
                bound: *bound,
            },
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
        };
        Self { features, layout: self.layout, targets }
    }
}
