//! Shared test fixtures: a Kalman-filter oracle for affine-Gaussian state
//! space models and builders for RNNs operating in their linear regime.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use lorasmc::activation::PiecewiseLinearSpec;
use lorasmc::model::LowRankRnn;
use lorasmc::observation::{InitialState, ObservationHead};

/// z_{t+1} = A z_t + c + w, w ~ N(0, Q); y_t = B z_t + v, v ~ N(0, diag(r)).
pub struct AffineLgssm {
    pub a_mat: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub q: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r_diag: DVector<f64>,
    pub mu1: DVector<f64>,
    pub p1: DMatrix<f64>,
}

impl AffineLgssm {
    /// Extract the affine system realized by an RNN whose units all operate
    /// on the active side of their (ReLU) thresholds.
    pub fn from_linear_regime(model: &LowRankRnn) -> Self {
        let r = model.rank();
        let h = model.activation.thresholds.column(0).clone_owned();
        let a_mat = DMatrix::identity(r, r) * model.leak
            + model.readin.transpose() * &model.embedding;
        let offset = -(model.readin.transpose() * h);
        let (b, r_diag) = match &model.obs_head {
            ObservationHead::LinearGaussian { readout, noise_var, tied_to_embedding } => {
                let b = if *tied_to_embedding { model.embedding.clone() } else { readout.clone() };
                (b, noise_var.clone())
            }
            _ => panic!("linear-regime extraction needs a Gaussian head"),
        };
        Self {
            a_mat,
            offset,
            q: model.noise_cov.clone(),
            b,
            r_diag,
            mu1: model.initial.mean.clone(),
            p1: model.initial.cov.clone(),
        }
    }

    /// Exact log p(y_{1:T}) plus the per-step filtering means.
    pub fn kalman_log_likelihood(&self, y: &DMatrix<f64>) -> (f64, Vec<DVector<f64>>) {
        let r = self.a_mat.nrows();
        let big_r = DMatrix::from_diagonal(&self.r_diag);
        let mut m_pred = self.mu1.clone();
        let mut p_pred = self.p1.clone();
        let mut loglik = 0.0;
        let mut means = Vec::with_capacity(y.nrows());
        for t in 0..y.nrows() {
            let y_t = y.row(t).transpose();
            let s = &self.b * &p_pred * self.b.transpose() + &big_r;
            let s_chol = nalgebra::Cholesky::new(0.5 * (&s + s.transpose()))
                .expect("innovation covariance SPD");
            let innov = &y_t - &self.b * &m_pred;
            let u = s_chol.l().solve_lower_triangular(&innov).unwrap();
            let logdet: f64 = 2.0 * s_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            loglik +=
                -0.5 * (u.dot(&u) + logdet + y_t.len() as f64 * lorasmc::linalg::LN_2PI);

            // K = P Bᵀ S⁻¹ via Kᵀ = S⁻¹ B P.
            let mut rhs = &self.b * &p_pred;
            s_chol.solve_mut(&mut rhs);
            let gain = rhs.transpose();
            let m_filt = &m_pred + &gain * innov;
            let p_filt = (DMatrix::identity(r, r) - &gain * &self.b) * &p_pred;
            means.push(m_filt.clone());

            m_pred = &self.a_mat * m_filt + &self.offset;
            p_pred = &self.a_mat * p_filt * self.a_mat.transpose() + &self.q;
        }
        (loglik, means)
    }

    pub fn simulate(&self, t_len: usize, seed: u64) -> (DMatrix<f64>, Vec<DVector<f64>>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let r = self.a_mat.nrows();
        let n_y = self.b.nrows();
        let q_chol = nalgebra::Cholesky::new(self.q.clone()).unwrap().l();
        let p1_chol = nalgebra::Cholesky::new(self.p1.clone()).unwrap().l();
        let mut y = DMatrix::zeros(t_len, n_y);
        let mut zs = Vec::with_capacity(t_len);
        let mut z = &self.mu1
            + &p1_chol
                * DVector::from_iterator(r, (0..r).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        for t in 0..t_len {
            let mean_y = &self.b * &z;
            for i in 0..n_y {
                let e: f64 = StandardNormal.sample(&mut rng);
                y[(t, i)] = mean_y[i] + self.r_diag[i].sqrt() * e;
            }
            zs.push(z.clone());
            if t + 1 < t_len {
                let w = &q_chol
                    * DVector::from_iterator(r, (0..r).map(|_| -> f64 {
                        StandardNormal.sample(&mut rng)
                    }));
                z = &self.a_mat * &z + &self.offset + w;
            }
        }
        (y, zs)
    }
}

/// An RNN whose ReLU units all sit far above threshold over the state range
/// explored in tests, so its dynamics are exactly affine there.
pub fn linear_regime_rnn(n: usize, r: usize, seed: u64) -> LowRankRnn {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let embedding = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
    let scale = 0.05 / n as f64;
    let readin = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-scale..scale));
    let thresholds = DVector::from_element(n, -40.0);
    LowRankRnn {
        embedding: embedding.clone(),
        readin,
        leak: 0.9,
        activation: PiecewiseLinearSpec::relu(thresholds),
        noise_cov: DMatrix::identity(r, r) * 0.04,
        input_weights: None,
        initial: InitialState::standard(r),
        obs_head: ObservationHead::LinearGaussian {
            readout: embedding,
            noise_var: DVector::from_element(n, 0.01),
            tied_to_embedding: true,
        },
        tau: 10.0,
        dt: 1.0,
    }
}

/// Check that a latent trajectory never drops a unit below its threshold,
/// i.e. that the affine extraction is valid for this data.
pub fn stays_in_linear_regime(model: &LowRankRnn, latents: &[DVector<f64>]) -> bool {
    let h = model.activation.thresholds.column(0).clone_owned();
    latents.iter().all(|z| {
        let pre = &model.embedding * z;
        pre.iter().zip(h.iter()).all(|(p, hi)| p > hi)
    })
}

/// Zero-dynamics variant: F(z) ≡ 0, so the latent sequence is i.i.d.
/// N(0, Σ_z) after the first step. Uses a = 0 (Δt = τ) and Ñ = 0.
pub fn zero_dynamics_rnn(n: usize, r: usize, seed: u64) -> LowRankRnn {
    let mut model = linear_regime_rnn(n, r, seed);
    model.leak = 0.0;
    model.dt = model.tau;
    model.readin = DMatrix::zeros(n, r);
    model
}

pub fn mean_and_standard_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
