//! Piecewise-linear activation functions φ(x_i) = Σ_d b_{i,d} max(x_i − h_{i,d}, 0).

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Per-unit piecewise-linear activation basis: `D` rectified terms per unit,
/// with slopes `b` and thresholds `h`, both `N×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearSpec {
    /// Slopes, N×D.
    pub slopes: DMatrix<f64>,
    /// Thresholds, N×D.
    pub thresholds: DMatrix<f64>,
}

impl PiecewiseLinearSpec {
    pub fn new(slopes: DMatrix<f64>, thresholds: DMatrix<f64>) -> Result<Self> {
        if slopes.shape() != thresholds.shape() {
            return Err(Error::Shape(format!(
                "slopes {:?} vs thresholds {:?}",
                slopes.shape(),
                thresholds.shape()
            )));
        }
        if slopes.ncols() == 0 || slopes.nrows() == 0 {
            return Err(Error::InvalidParam("activation basis needs N ≥ 1, D ≥ 1".into()));
        }
        Ok(Self { slopes, thresholds })
    }

    /// ReLU preset: D=1, slope 1, φ(x_i) = max(x_i − h_i, 0).
    pub fn relu(thresholds: DVector<f64>) -> Self {
        let n = thresholds.len();
        Self {
            slopes: DMatrix::from_element(n, 1, 1.0),
            thresholds: DMatrix::from_column_slice(n, 1, thresholds.as_slice()),
        }
    }

    /// Clipped preset: D=2 with φ(x_i) = max(x_i + h_i, 0) − max(x_i, 0),
    /// i.e. slopes (1, −1) with thresholds (−h_i, 0).
    pub fn clipped(h: DVector<f64>) -> Self {
        let n = h.len();
        let mut slopes = DMatrix::zeros(n, 2);
        let mut thresholds = DMatrix::zeros(n, 2);
        for i in 0..n {
            slopes[(i, 0)] = 1.0;
            slopes[(i, 1)] = -1.0;
            thresholds[(i, 0)] = -h[i];
            thresholds[(i, 1)] = 0.0;
        }
        Self { slopes, thresholds }
    }

    pub fn num_units(&self) -> usize {
        self.slopes.nrows()
    }

    pub fn num_basis(&self) -> usize {
        self.slopes.ncols()
    }

    /// Per-unit Lipschitz constants L_i = Σ_d |b_{i,d}|.
    pub fn lipschitz(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.num_units(),
            self.slopes.row_iter().map(|r| r.iter().map(|b| b.abs()).sum()),
        )
    }

    /// Element-wise φ applied to one unit's pre-activation.
    pub fn eval_unit(&self, i: usize, x: f64) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.num_basis() {
            acc += self.slopes[(i, d)] * (x - self.thresholds[(i, d)]).max(0.0);
        }
        acc
    }
}

/// Element-wise φ over a pre-activation vector.
pub fn activation_eval(spec: &PiecewiseLinearSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != spec.num_units() {
        return Err(Error::Shape(format!(
            "pre-activation length {} vs {} units",
            x.len(),
            spec.num_units()
        )));
    }
    Ok(DVector::from_iterator(
        x.len(),
        x.iter().enumerate().map(|(i, &xi)| spec.eval_unit(i, xi)),
    ))
}
