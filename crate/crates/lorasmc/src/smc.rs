//! Sequential Monte Carlo sweep: resampling, proposals, weighting, the
//! filtering posterior and the marginal-likelihood estimator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{
    chol_spd, gaussian_log_density_chol, gaussian_log_density_diag, log_sum_exp,
    normalize_log_weights, symmetrize,
};
use crate::model::{LowRankRnn, StimulusStream};
use crate::observation::{obs_log_density, ObservationHead};
use crate::{Error, Result};

/// How ancestors are drawn at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    /// Independent categorical draws, applied at every step.
    #[default]
    Multinomial,
    /// Stratified low-variance variant, offered behind a flag.
    Systematic,
}

/// Proposal family for the sweep.
#[derive(Debug, Clone)]
pub enum Proposal {
    /// Propose from the transition; weights reduce to the observation density.
    Bootstrap,
    /// Closed-form conditional for linear-Gaussian observations (Kalman-gain
    /// interpolation between the model prediction and the data).
    OptimalLinearGaussian,
    /// Product of the transition with per-step diagonal Gaussian encodings
    /// e(z_t | y_{t−t′:t}); both factors must have diagonal covariance.
    EncoderProduct {
        /// T×R per-step encoding means.
        means: DMatrix<f64>,
        /// T×R per-step encoding variances.
        vars: DMatrix<f64>,
    },
}

impl Proposal {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Proposal::Bootstrap => "bootstrap",
            Proposal::OptimalLinearGaussian => "optimal",
            Proposal::EncoderProduct { .. } => "encoder_product",
        }
    }
}

/// K weighted latent trajectories with ancestry and running log-likelihood terms.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub k: usize,
    /// Particle positions per step: positions[t][k] is an R-vector.
    pub positions: Vec<Vec<DVector<f64>>>,
    /// ancestors[t−1][k] is the index resampled at step t (t = 1..T−1, 0-based).
    pub ancestors: Vec<Vec<usize>>,
    /// Unnormalized log weights per step.
    pub logw: Vec<Vec<f64>>,
    /// Per-step terms log(K⁻¹ Σ_k w_t^k); their sum is logZ_hat.
    pub logz_terms: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// logZ_hat = Σ_t log(K⁻¹ Σ_k w_t^k); an unbiased estimator of p(y_{1:T})
    /// on the natural scale.
    pub fn logz_hat(&self) -> f64 {
        self.logz_terms.iter().sum()
    }

    /// Normalized weights at step t.
    pub fn normalized_weights(&self, t: usize) -> Vec<f64> {
        normalize_log_weights(&self.logw[t])
    }

    /// Weighted filtering mean at step t (Eq. of the filtering posterior).
    pub fn filtering_mean(&self, t: usize) -> DVector<f64> {
        let w = self.normalized_weights(t);
        let r = self.positions[t][0].len();
        let mut mean = DVector::zeros(r);
        for (k, z) in self.positions[t].iter().enumerate() {
            mean += z * w[k];
        }
        mean
    }

    /// Weighted per-coordinate filtering variance at step t.
    pub fn filtering_var(&self, t: usize) -> DVector<f64> {
        let w = self.normalized_weights(t);
        let mean = self.filtering_mean(t);
        let r = mean.len();
        let mut var = DVector::zeros(r);
        for (k, z) in self.positions[t].iter().enumerate() {
            let d = z - &mean;
            for i in 0..r {
                var[i] += w[k] * d[i] * d[i];
            }
        }
        var
    }

    /// Trajectories with ancestry resolved back from the final particles;
    /// out[k][t] is the t-th state of surviving lineage k.
    pub fn resolved_trajectories(&self) -> Vec<Vec<DVector<f64>>> {
        let t_len = self.len();
        let mut out = vec![Vec::with_capacity(t_len); self.k];
        let mut idx: Vec<usize> = (0..self.k).collect();
        let mut rev: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(t_len); self.k];
        for t in (0..t_len).rev() {
            for k in 0..self.k {
                rev[k].push(self.positions[t][idx[k]].clone());
            }
            if t > 0 {
                for k in 0..self.k {
                    idx[k] = self.ancestors[t - 1][idx[k]];
                }
            }
        }
        for k in 0..self.k {
            out[k] = rev[k].drain(..).rev().collect();
        }
        out
    }
}

/// i.i.d. categorical ancestor draws from unnormalized log weights.
pub fn resample_multinomial<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let w = checked_weights(logw, 0)?;
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for wi in &w {
        acc += wi;
        cum.push(acc);
    }
    let total = *cum.last().unwrap();
    Ok((0..logw.len())
        .map(|_| {
            let u: f64 = rng.gen_range(0.0..total);
            cum.iter().position(|c| u < *c).unwrap_or(logw.len() - 1)
        })
        .collect())
}

/// Systematic (stratified) resampling with a single uniform offset.
pub fn resample_systematic<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let w = checked_weights(logw, 0)?;
    let k = w.len();
    let u0: f64 = rng.gen_range(0.0..1.0 / k as f64);
    let mut out = Vec::with_capacity(k);
    let mut acc = w[0];
    let mut i = 0;
    for j in 0..k {
        let u = u0 + j as f64 / k as f64;
        while u >= acc && i + 1 < k {
            i += 1;
            acc += w[i];
        }
        out.push(i);
    }
    Ok(out)
}

fn checked_weights(logw: &[f64], t: usize) -> Result<Vec<f64>> {
    if logw.is_empty() {
        return Err(Error::InvalidParam("empty weight vector".into()));
    }
    if logw.iter().all(|w| !w.is_finite()) {
        return Err(Error::WeightDegeneracy {
            t,
            detail: "all log weights are -inf or NaN".into(),
        });
    }
    Ok(normalize_log_weights(logw))
}

/// Kalman gain K = Σ_z Bᵀ (B Σ_z Bᵀ + Σ_y)⁻¹.
pub fn kalman_gain(
    sigma_z: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s = symmetrize(&(b * sigma_z * b.transpose() + sigma_y));
    let chol = nalgebra::Cholesky::new(s)
        .ok_or_else(|| Error::Singular("innovation covariance not positive definite".into()))?;
    // K = Σ Bᵀ S⁻¹  ⇔  Kᵀ = S⁻¹ B Σ.
    let mut rhs = b * sigma_z;
    chol.solve_mut(&mut rhs);
    Ok(rhs.transpose())
}

/// Interpolation operator α = K·B of the optimal proposal mean; measures how
/// strongly the proposal pulls toward the data-inferred state.
pub fn interpolation_alpha_optimal(
    sigma_z: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(kalman_gain(sigma_z, b, sigma_y)? * b)
}

/// Interpolation weight α = Σ_z (Σ_z + Σ_ê)⁻¹ of the product proposal,
/// element-wise for diagonal covariances.
pub fn interpolation_alpha_product(p_var: &DVector<f64>, e_var: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        p_var.len(),
        p_var.iter().zip(e_var.iter()).map(|(p, e)| p / (p + e)),
    )
}

/// Cached per-sweep quantities for the optimal linear-Gaussian proposal with
/// a fixed prior covariance (transition Σ_z, or Σ_{z1} at the first step).
#[derive(Debug, Clone)]
pub struct OptimalProposalCache {
    pub gain: DMatrix<f64>,
    /// I − K·B.
    pub shrink: DMatrix<f64>,
    /// Cholesky factor of the proposal covariance (I − KB)Σ, symmetrized.
    pub prop_chol: DMatrix<f64>,
    /// Cholesky factor of the innovation covariance S = BΣBᵀ + Σ_y.
    pub innov_chol: DMatrix<f64>,
}

impl OptimalProposalCache {
    pub fn new(
        sigma_prior: &DMatrix<f64>,
        b: &DMatrix<f64>,
        sigma_y_diag: &DVector<f64>,
    ) -> Result<Self> {
        let r = sigma_prior.nrows();
        let sigma_y = DMatrix::from_diagonal(sigma_y_diag);
        let s = symmetrize(&(b * sigma_prior * b.transpose() + &sigma_y));
        let (innov_chol, _) = chol_spd(&s, "innovation covariance")?;
        let gain = kalman_gain(sigma_prior, b, &sigma_y)?;
        let shrink = DMatrix::identity(r, r) - &gain * b;
        let prop_cov = symmetrize(&(&shrink * sigma_prior));
        let (prop_chol, _) = chol_spd(&prop_cov, "optimal proposal covariance")?;
        Ok(Self { gain, shrink, prop_chol, innov_chol })
    }

    /// Proposal mean (I − KB)·prior_mean + K·y.
    pub fn mean(&self, prior_mean: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.shrink * prior_mean + &self.gain * y
    }

    /// Marginal log p(y | z_prev) = log N(y; B·prior_mean, S): the incremental
    /// importance weight, independent of the drawn z.
    pub fn marginal_log_density(
        &self,
        b: &DMatrix<f64>,
        prior_mean: &DVector<f64>,
        y: &DVector<f64>,
    ) -> f64 {
        gaussian_log_density_chol(y, &(b * prior_mean), &self.innov_chol)
    }

    pub fn draw<R: Rng + ?Sized>(
        &self,
        prior_mean: &DVector<f64>,
        y: &DVector<f64>,
        rng: &mut R,
    ) -> (DVector<f64>, f64) {
        let mean = self.mean(prior_mean, y);
        let r = mean.len();
        let eps = DVector::from_iterator(r, (0..r).map(|_| -> f64 { StandardNormal.sample(rng) }));
        let z = &mean + &self.prop_chol * eps;
        let log_r = gaussian_log_density_chol(&z, &mean, &self.prop_chol);
        (z, log_r)
    }
}

/// One draw from the optimal proposal r(z_t | y_t, z_prev) for a
/// linear-Gaussian observation head, with its log density.
pub fn propose_optimal<R: Rng + ?Sized>(
    model: &LowRankRnn,
    z_prev: &DVector<f64>,
    y: &DVector<f64>,
    s: Option<&DVector<f64>>,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let (b, sigma_y) = gaussian_head(model)?;
    let cache = OptimalProposalCache::new(&model.noise_cov, b, sigma_y)?;
    let f = model.step_mean(z_prev, s)?;
    Ok(cache.draw(&f, y, rng))
}

/// Closed-form product of two diagonal Gaussians, sampled with its log density:
/// var = (p_var⁻¹ + e_var⁻¹)⁻¹, mean = var·(p_mean/p_var + e_mean/e_var).
pub fn propose_product<R: Rng + ?Sized>(
    p_mean: &DVector<f64>,
    p_var: &DVector<f64>,
    e_mean: &DVector<f64>,
    e_var: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let r = p_mean.len();
    if p_var.iter().chain(e_var.iter()).any(|v| *v <= 0.0) {
        return Err(Error::InvalidParam("product proposal needs positive variances".into()));
    }
    let mut mean = DVector::zeros(r);
    let mut var = DVector::zeros(r);
    for i in 0..r {
        let prec = 1.0 / p_var[i] + 1.0 / e_var[i];
        var[i] = 1.0 / prec;
        mean[i] = var[i] * (p_mean[i] / p_var[i] + e_mean[i] / e_var[i]);
    }
    let eps =
        DVector::from_iterator(r, (0..r).map(|_| -> f64 { StandardNormal.sample(rng) }));
    let z = DVector::from_fn(r, |i, _| mean[i] + var[i].sqrt() * eps[i]);
    let log_r = gaussian_log_density_diag(&z, &mean, &var);
    Ok((z, log_r))
}

/// Incremental log weight log w = log p(y_t, z_t | z_prev) − log r(z_t | ·).
pub fn reweight(log_p_joint: f64, log_r: f64) -> f64 {
    log_p_joint - log_r
}

/// Options for a sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub resampling: ResamplingScheme,
}

fn gaussian_head(model: &LowRankRnn) -> Result<(&DMatrix<f64>, &DVector<f64>)> {
    match &model.obs_head {
        ObservationHead::LinearGaussian { readout, noise_var, tied_to_embedding } => {
            let b = if *tied_to_embedding { &model.embedding } else { readout };
            Ok((b, noise_var))
        }
        _ => Err(Error::Modality(
            "optimal proposal requires a linear-Gaussian observation head".into(),
        )),
    }
}

fn diag_of_spd(m: &DMatrix<f64>, what: &str) -> Result<DVector<f64>> {
    let max_off = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).filter(move |j| *j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)].abs())
        .fold(0.0f64, f64::max);
    if max_off > 1e-12 * (1.0 + m.diagonal().amax()) {
        return Err(Error::InvalidParam(format!("{what} must be diagonal for this proposal")));
    }
    Ok(m.diagonal())
}

/// Run the full resample → propose → reweight recursion over y (T×N_y).
///
/// Initial particles are drawn from the proposal r(z_1 | y_1) with the
/// initial-state distribution in place of the transition; no resampling
/// happens before the first step. Weights at t=1 include the density ratio
/// p(z_1)/r(z_1|y_1). Resampling is applied unconditionally at every later
/// step.
pub fn smc_sweep<R: Rng + ?Sized>(
    model: &LowRankRnn,
    proposal: &Proposal,
    y: &DMatrix<f64>,
    stimulus: Option<&StimulusStream>,
    k: usize,
    opts: &SweepOptions,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    let t_len = y.nrows();
    if k < 1 || t_len < 1 {
        return Err(Error::InvalidParam("need K ≥ 1 and T ≥ 1".into()));
    }
    if y.ncols() != model.obs_head.num_channels() {
        return Err(Error::Shape(format!(
            "observations have {} channels, head expects {}",
            y.ncols(),
            model.obs_head.num_channels()
        )));
    }
    if let Some(ss) = stimulus {
        if ss.len() < t_len {
            return Err(Error::Shape("stimulus shorter than observations".into()));
        }
    }
    if let Proposal::EncoderProduct { means, vars } = proposal {
        if means.nrows() < t_len || vars.nrows() < t_len {
            return Err(Error::Shape("encoder output shorter than observations".into()));
        }
    }

    // Per-sweep caches for the optimal proposal (time-invariant covariances).
    let optimal_caches = match proposal {
        Proposal::OptimalLinearGaussian => {
            let (b, sigma_y) = gaussian_head(model)?;
            let step = OptimalProposalCache::new(&model.noise_cov, b, sigma_y)?;
            let init = OptimalProposalCache::new(&model.initial.cov, b, sigma_y)?;
            Some((step, init))
        }
        _ => None,
    };
    let product_vars = match proposal {
        Proposal::EncoderProduct { .. } => {
            let trans = diag_of_spd(&model.noise_cov, "transition covariance")?;
            let init = diag_of_spd(&model.initial.cov, "initial covariance")?;
            Some((trans, init))
        }
        _ => None,
    };
    let bootstrap_chols = match proposal {
        Proposal::Bootstrap => Some((
            chol_spd(&model.noise_cov, "transition covariance")?.0,
            chol_spd(&model.initial.cov, "initial covariance")?.0,
        )),
        _ => None,
    };

    let mut positions: Vec<Vec<DVector<f64>>> = Vec::with_capacity(t_len);
    let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(t_len.saturating_sub(1));
    let mut logw: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut logz_terms = Vec::with_capacity(t_len);

    for t in 0..t_len {
        let y_t = y.row(t).transpose();
        // Stimulus driving the transition into step t is the one at t−1.
        let s_prev = if t > 0 { stimulus.map(|ss| ss.at(t - 1)) } else { None };

        let parents: Option<Vec<usize>> = if t > 0 {
            let idx = match opts.resampling {
                ResamplingScheme::Multinomial => resample_multinomial(&logw[t - 1], rng),
                ResamplingScheme::Systematic => resample_systematic(&logw[t - 1], rng),
            }
            .map_err(|e| match e {
                Error::WeightDegeneracy { detail, .. } => {
                    Error::WeightDegeneracy { t: t - 1, detail }
                }
                other => other,
            })?;
            Some(idx)
        } else {
            None
        };

        let mut step_positions = Vec::with_capacity(k);
        let mut step_logw = Vec::with_capacity(k);

        for j in 0..k {
            // Prior factor for this particle: transition from the resampled
            // parent, or the initial-state distribution at t=0.
            let prior_mean = match &parents {
                Some(idx) => {
                    let parent = &positions[t - 1][idx[j]];
                    model.step_mean(parent, s_prev.as_ref())?
                }
                None => model.initial.mean.clone(),
            };

            let (z, lw) = match proposal {
                Proposal::Bootstrap => {
                    let (trans_chol, init_chol) = bootstrap_chols.as_ref().unwrap();
                    let prior_chol = if t == 0 { init_chol } else { trans_chol };
                    let r_dim = prior_mean.len();
                    let eps = DVector::from_iterator(r_dim, (0..r_dim).map(|_| -> f64 {
                        StandardNormal.sample(rng)
                    }));
                    let z = &prior_mean + prior_chol * eps;
                    // r = prior ⇒ the transition terms cancel exactly.
                    let lw = obs_log_density(&model.obs_head, &z, &model.embedding, &y_t)?;
                    (z, lw)
                }
                Proposal::OptimalLinearGaussian => {
                    let (step_cache, init_cache) = optimal_caches.as_ref().unwrap();
                    let cache = if t == 0 { init_cache } else { step_cache };
                    let (b, _) = gaussian_head(model)?;
                    let (z, _log_r) = cache.draw(&prior_mean, &y_t, rng);
                    // Weight is the closed-form marginal p(y_t | z_prev).
                    let lw = cache.marginal_log_density(b, &prior_mean, &y_t);
                    (z, lw)
                }
                Proposal::EncoderProduct { means, vars } => {
                    let (trans_var, init_var) = product_vars.as_ref().unwrap();
                    let p_var = if t == 0 { init_var } else { trans_var };
                    let e_mean = means.row(t).transpose();
                    let e_var = vars.row(t).transpose();
                    let (z, log_r) = propose_product(&prior_mean, p_var, &e_mean, &e_var, rng)?;
                    let log_obs = obs_log_density(&model.obs_head, &z, &model.embedding, &y_t)?;
                    let log_trans = gaussian_log_density_diag(&z, &prior_mean, p_var);
                    (z, reweight(log_obs + log_trans, log_r))
                }
            };
            step_positions.push(z);
            step_logw.push(lw);
        }

        if step_logw.iter().all(|w| !w.is_finite()) {
            return Err(Error::WeightDegeneracy {
                t,
                detail: format!("all {k} particle weights vanished"),
            });
        }

        logz_terms.push(log_sum_exp(&step_logw) - (k as f64).ln());
        positions.push(step_positions);
        logw.push(step_logw);
        if let Some(idx) = parents {
            ancestors.push(idx);
        }
    }

    Ok(ParticleEnsemble { k, positions, ancestors, logw, logz_terms })
}

/// The per-sweep ELBO contribution: logZ_hat of the ensemble. Its expectation
/// over the sampling distribution lower-bounds log p(y_{1:T}).
pub fn elbo_value(ensemble: &ParticleEnsemble) -> f64 {
    ensemble.logz_hat()
}
