//! Emission distributions G(z_t) and the initial-state distribution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::linalg::{
    chol_spd, gaussian_log_density_diag, ln_factorial, ln_softplus, softplus, LN_2PI,
};
use crate::{Error, Result};

/// Observation model attached to the latent state.
///
/// `LinearGaussian` emits y ~ N(Bz, Σ_y) with diagonal Σ_y. The readout B is
/// typically the embedding M itself so units map one-to-one onto channels.
/// `PoissonSoftplus` emits counts y_i ~ Pois(softplus(w_i (Mz)_i − b_i)).
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationHead {
    LinearGaussian {
        /// Readout, N_y×R. Use `tie_readout_to_embedding` to keep B = M.
        readout: DMatrix<f64>,
        /// Diagonal of Σ_y (all entries > 0).
        noise_var: DVector<f64>,
        /// When true, `readout` mirrors the model embedding M.
        tied_to_embedding: bool,
    },
    PoissonSoftplus {
        /// Per-unit gains (diagonal of W), length N_y.
        gain: DVector<f64>,
        /// Per-unit biases, length N_y.
        bias: DVector<f64>,
        /// Bin width in time units; rates are per bin (exposure 1 bin by default).
        exposure: f64,
    },
}

impl ObservationHead {
    pub fn linear_gaussian(readout: DMatrix<f64>, noise_var: DVector<f64>) -> Result<Self> {
        if readout.nrows() != noise_var.len() {
            return Err(Error::Shape(format!(
                "readout rows {} vs noise dim {}",
                readout.nrows(),
                noise_var.len()
            )));
        }
        if noise_var.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParam("observation noise variances must be > 0".into()));
        }
        Ok(Self::LinearGaussian { readout, noise_var, tied_to_embedding: false })
    }

    pub fn poisson_softplus(gain: DVector<f64>, bias: DVector<f64>) -> Result<Self> {
        if gain.len() != bias.len() {
            return Err(Error::Shape(format!("gain {} vs bias {}", gain.len(), bias.len())));
        }
        Ok(Self::PoissonSoftplus { gain, bias, exposure: 1.0 })
    }

    pub fn num_channels(&self) -> usize {
        match self {
            Self::LinearGaussian { readout, .. } => readout.nrows(),
            Self::PoissonSoftplus { gain, .. } => gain.len(),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Self::LinearGaussian { .. })
    }

    /// Per-channel Poisson rates λ_i = softplus(w_i (Mz)_i − b_i) · exposure_bins.
    pub fn poisson_rates(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::PoissonSoftplus { gain, bias, .. } => {
                if x.len() != gain.len() {
                    return Err(Error::Shape(format!(
                        "activity dim {} vs {} channels",
                        x.len(),
                        gain.len()
                    )));
                }
                Ok(DVector::from_iterator(
                    gain.len(),
                    (0..gain.len()).map(|i| softplus(gain[i] * x[i] - bias[i])),
                ))
            }
            _ => Err(Error::Modality("poisson_rates on a Gaussian head".into())),
        }
    }
}

/// log p(y | z) under the observation head, with `embedding` = M supplying the
/// unit activity x = Mz for the Poisson head (and the tied Gaussian readout).
pub fn obs_log_density(
    head: &ObservationHead,
    z: &DVector<f64>,
    embedding: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if y.len() != head.num_channels() {
        return Err(Error::Shape(format!(
            "observation dim {} vs {} channels",
            y.len(),
            head.num_channels()
        )));
    }
    match head {
        ObservationHead::LinearGaussian { readout, noise_var, tied_to_embedding } => {
            let b = if *tied_to_embedding { embedding } else { readout };
            let mean = b * z;
            Ok(gaussian_log_density_diag(y, &mean, noise_var))
        }
        ObservationHead::PoissonSoftplus { gain, bias, .. } => {
            let x = embedding * z;
            let mut acc = 0.0;
            for i in 0..y.len() {
                let yi = y[i];
                if yi < 0.0 || yi.fract() != 0.0 {
                    return Err(Error::InvalidParam(format!(
                        "Poisson count must be a nonnegative integer, got {yi}"
                    )));
                }
                let u = gain[i] * x[i] - bias[i];
                let lam = softplus(u);
                if !lam.is_finite() {
                    return Err(Error::NonFinite("Poisson rate".into()));
                }
                acc += yi * ln_softplus(u) - lam - ln_factorial(yi as u64);
            }
            Ok(acc)
        }
    }
}

/// Draw y ~ G(z).
pub fn obs_sample<R: Rng + ?Sized>(
    head: &ObservationHead,
    z: &DVector<f64>,
    embedding: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    match head {
        ObservationHead::LinearGaussian { readout, noise_var, tied_to_embedding } => {
            let b = if *tied_to_embedding { embedding } else { readout };
            let mean = b * z;
            Ok(DVector::from_iterator(
                mean.len(),
                mean.iter().enumerate().map(|(i, m)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + noise_var[i].sqrt() * e
                }),
            ))
        }
        ObservationHead::PoissonSoftplus { .. } => {
            let rates = head.poisson_rates(&(embedding * z))?;
            Ok(DVector::from_iterator(
                rates.len(),
                rates.iter().map(|&lam| {
                    if lam <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(lam).expect("finite positive rate").sample(rng)
                    }
                }),
            ))
        }
    }
}

/// Initial-state distribution p(z_1) = N(μ_{z1}, Σ_{z1}).
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl InitialState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape("initial-state covariance shape".into()));
        }
        if !crate::linalg::is_spd(&cov) {
            return Err(Error::NotSpd("initial-state covariance".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: DVector::zeros(dim), cov: DMatrix::identity(dim, dim) }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let (l, _) = chol_spd(&self.cov, "initial-state covariance").expect("SPD by invariant");
        let eps = DVector::from_iterator(
            self.mean.len(),
            (0..self.mean.len()).map(|_| -> f64 { StandardNormal.sample(rng) }),
        );
        &self.mean + l * eps
    }

    pub fn log_density(&self, z: &DVector<f64>) -> f64 {
        let (l, _) = chol_spd(&self.cov, "initial-state covariance").expect("SPD by invariant");
        crate::linalg::gaussian_log_density_chol(z, &self.mean, &l)
    }
}

/// Convenience constant: log density of a standard normal at its mean, per dim.
pub fn std_normal_peak_log_density(dim: usize) -> f64 {
    -0.5 * dim as f64 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn identity_embedding(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn gaussian_zero_residual() {
        // y = Bz, Σ_y = I, N_y = 1 → −½ log 2π
        let head = ObservationHead::linear_gaussian(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let z = DVector::from_vec(vec![3.0]);
        let y = DVector::from_vec(vec![6.0]);
        let ld = obs_log_density(&head, &z, &identity_embedding(1), &y).unwrap();
        assert_relative_eq!(ld, -0.5 * LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn poisson_zero_count_unit_rate() {
        // λ=1, y=0 → log e^{−1} = −1. softplus(u)=1 at u = ln(e−1).
        let u = (std::f64::consts::E - 1.0).ln();
        let head = ObservationHead::poisson_softplus(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-u]),
        )
        .unwrap();
        let z = DVector::zeros(1);
        let y = DVector::zeros(1);
        let ld = obs_log_density(&head, &z, &identity_embedding(1), &y).unwrap();
        assert_relative_eq!(ld, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn poisson_pmf_hand_value() {
        // λ=2, y=3 → 3 ln 2 − 2 − ln 6 (direct Poisson pmf evaluation).
        let expected = 3.0 * 2f64.ln() - 2.0 - 6f64.ln();
        let u = (2f64.exp() - 1.0).ln(); // softplus(u) = 2
        let head = ObservationHead::poisson_softplus(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-u]),
        )
        .unwrap();
        let ld = obs_log_density(
            &head,
            &DVector::zeros(1),
            &identity_embedding(1),
            &DVector::from_vec(vec![3.0]),
        )
        .unwrap();
        assert_relative_eq!(ld, expected, epsilon = 1e-10);
        assert_relative_eq!(expected, -1.7123179275482191, epsilon = 1e-12);
    }

    #[test]
    fn poisson_rejects_bad_counts() {
        let head = ObservationHead::poisson_softplus(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let z = DVector::zeros(1);
        let m = identity_embedding(1);
        assert!(obs_log_density(&head, &z, &m, &DVector::from_vec(vec![-1.0])).is_err());
        assert!(obs_log_density(&head, &z, &m, &DVector::from_vec(vec![0.5])).is_err());
    }

    #[test]
    fn gaussian_degenerate_noise_limit() {
        let head = ObservationHead::linear_gaussian(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DVector::from_vec(vec![1e-30]),
        )
        .unwrap();
        let z = DVector::from_vec(vec![1.5]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let y = obs_sample(&head, &z, &identity_embedding(1), &mut rng).unwrap();
        assert_relative_eq!(y[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn poisson_saturated_negative_preactivation() {
        let head = ObservationHead::poisson_softplus(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1e6]),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let y =
            obs_sample(&head, &DVector::zeros(1), &identity_embedding(1), &mut rng).unwrap();
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn poisson_sample_mean_close_to_rate() {
        let u = (2f64.exp() - 1.0).ln();
        let head = ObservationHead::poisson_softplus(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-u]),
        )
        .unwrap();
        let m = identity_embedding(1);
        let z = DVector::zeros(1);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += obs_sample(&head, &z, &m, &mut rng).unwrap()[0];
        }
        let mean = sum / n as f64;
        // λ=2, σ=√2: 3σ band for the empirical mean.
        let band = 3.0 * (2.0f64).sqrt() / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < band, "mean {mean} outside band {band}");
    }

    #[test]
    fn initial_state_density_and_moments() {
        let init = InitialState::standard(2);
        assert_relative_eq!(init.log_density(&DVector::zeros(2)), -LN_2PI, epsilon = 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 100_000;
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            mean += init.sample(&mut rng);
        }
        mean /= n as f64;
        let band = 3.0 / (n as f64).sqrt();
        assert!(mean.amax() < band * 1.5, "sample mean {mean:?}");
    }

    #[test]
    fn initial_density_integrates_to_one_1d() {
        // Grid quadrature over R=1.
        let init = InitialState::new(
            DVector::from_vec(vec![0.3]),
            DMatrix::from_row_slice(1, 1, &[0.7]),
        )
        .unwrap();
        let (lo, hi, n) = (-8.0, 8.0, 4000);
        let dx = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| init.log_density(&DVector::from_vec(vec![lo + (i as f64 + 0.5) * dx])).exp())
            .sum::<f64>()
            * dx;
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn non_spd_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(InitialState::new(DVector::zeros(2), bad).is_err());
    }
}
