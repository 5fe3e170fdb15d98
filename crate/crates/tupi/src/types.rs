//! Core data carriers shared by every stage: prediction vectors and
//! per-instance feature matrices, both validated at construction.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Result, TupiError};

/// One real-valued score per instance, e.g. the output of a quality predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    scores: Array1<f64>,
}

impl Predictions {
    pub fn new(scores: Array1<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(TupiError::invalid("predictions must not be empty"));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(TupiError::invalid("predictions contain non-finite values"));
        }
        Ok(Self { scores })
    }

    pub fn from_vec(scores: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from_vec(scores))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &Array1<f64> {
        &self.scores
    }

    /// View as an n-by-1 matrix so kernel ops can treat scores as 1-d points.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        self.scores.view().insert_axis(Axis(1))
    }
}

/// A named set of per-instance feature rows (n instances by d dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    name: String,
    values: Array2<f64>,
}

impl FeatureSet {
    pub fn new(name: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(TupiError::invalid("feature set must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TupiError::invalid("feature set contains non-finite values"));
        }
        Ok(Self {
            name: name.into(),
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Map values affinely onto [0, 1]. Errors if the range is numerically empty.
pub fn scale01(values: &Array1<f64>) -> Result<Array1<f64>> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_finite() || max - min < 1e-12 {
        return Err(TupiError::DegenerateScale(
            "cannot rescale a constant vector onto [0, 1]".into(),
        ));
    }
    Ok(values.mapv(|v| (v - min) / (max - min)))
}

/// Shift to zero mean and unit variance. Errors on (numerically) constant input.
pub fn standardize(values: &Array1<f64>) -> Result<Array1<f64>> {
    let n = values.len() as f64;
    let mean = values.sum() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var.sqrt() < 1e-12 {
        return Err(TupiError::DegenerateScale(
            "cannot standardize a constant vector".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(values.mapv(|v| (v - mean) / sd))
}
