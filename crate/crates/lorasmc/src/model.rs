//! The discretized stochastic low-rank RNN and its latent-space maps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::{activation_eval, PiecewiseLinearSpec};
use crate::linalg::{chol_spd, is_spd};
use crate::observation::{InitialState, ObservationHead};
use crate::{Error, Result};

/// Which exponent the noise discretization uses for Σ_z.
///
/// `EulerMaruyama` gives Σ_z = (Δt/τ²)·ΓΓᵀ, consistent with the √Δt/τ·Γ·ε
/// noise increment. `PaperLiteral` gives Σ_z = (Δt/τ)²·ΓΓᵀ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseExponent {
    #[default]
    EulerMaruyama,
    PaperLiteral,
}

/// All parameters of the discretized generative model.
///
/// Transition mean F(z) = a·z + Ñᵀφ(Mz) (plus H·s inside φ when driven),
/// transition covariance Σ_z, initial state N(μ_{z1}, Σ_{z1}), observation
/// head G.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankRnn {
    /// Embedding M, N×R.
    pub embedding: DMatrix<f64>,
    /// Discretized read-in Ñ = (Δt/τ)·N, N×R.
    pub readin: DMatrix<f64>,
    /// Discrete leak a = 1 − Δt/τ, in [0, 1).
    pub leak: f64,
    /// Activation basis (thresholds are the `h` of the arrangement).
    pub activation: PiecewiseLinearSpec,
    /// Transition noise covariance Σ_z, R×R SPD.
    pub noise_cov: DMatrix<f64>,
    /// Input weights H, N×N_s; absent for autonomous models.
    pub input_weights: Option<DMatrix<f64>>,
    /// Initial-state distribution.
    pub initial: InitialState,
    /// Observation model.
    pub obs_head: ObservationHead,
    /// Time constant τ > 0.
    pub tau: f64,
    /// Integration step Δt ∈ (0, τ].
    pub dt: f64,
}

impl LowRankRnn {
    pub fn num_units(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn rank(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn num_inputs(&self) -> usize {
        self.input_weights.as_ref().map_or(0, |h| h.ncols())
    }

    /// Validate the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let (n, r) = self.embedding.shape();
        if r < 1 || r > n {
            return Err(Error::InvalidParam(format!("need 1 ≤ R ≤ N, got R={r}, N={n}")));
        }
        if self.readin.shape() != (n, r) {
            return Err(Error::Shape(format!(
                "readin {:?} vs embedding {:?}",
                self.readin.shape(),
                self.embedding.shape()
            )));
        }
        if self.activation.num_units() != n {
            return Err(Error::Shape("activation basis unit count".into()));
        }
        if !(self.tau > 0.0) || !(self.dt > 0.0) || self.dt > self.tau {
            return Err(Error::InvalidParam("need 0 < Δt ≤ τ".into()));
        }
        if (self.leak - (1.0 - self.dt / self.tau)).abs() > 1e-12 {
            return Err(Error::InvalidParam("leak must equal 1 − Δt/τ".into()));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::InvalidParam(format!("leak a={} outside [0,1)", self.leak)));
        }
        if !is_spd(&self.noise_cov) || self.noise_cov.nrows() != r {
            return Err(Error::NotSpd("transition noise covariance".into()));
        }
        if !is_spd(&self.initial.cov) || self.initial.mean.len() != r {
            return Err(Error::NotSpd("initial-state covariance".into()));
        }
        if let Some(h) = &self.input_weights {
            if h.nrows() != n {
                return Err(Error::Shape("input weights row count".into()));
            }
        }
        Ok(())
    }

    /// Deterministic transition mean F(z) (or F(s, z) when driven).
    pub fn step_mean(&self, z: &DVector<f64>, s: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        latent_step_mean(self, z, s)
    }

    /// One stochastic transition z' = F(z) + chol(Σ_z)·ε.
    pub fn step_sample<R: Rng + ?Sized>(
        &self,
        z: &DVector<f64>,
        s: Option<&DVector<f64>>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let (l, _) = chol_spd(&self.noise_cov, "transition noise")?;
        let eps = DVector::from_iterator(
            self.rank(),
            (0..self.rank()).map(|_| -> f64 { StandardNormal.sample(rng) }),
        );
        Ok(self.step_mean(z, s)? + l * eps)
    }

    /// Continuous-time read-in N = Ñ·(τ/Δt).
    pub fn continuous_readin(&self) -> DMatrix<f64> {
        &self.readin * (self.tau / self.dt)
    }
}

/// Piecewise-constant or pulse stimulus values, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusStream {
    /// T×N_s input values.
    pub values: DMatrix<f64>,
}

impl StimulusStream {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stimulus".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn at(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }
}

/// Euler–Maruyama discretization of the continuous-time model.
///
/// Returns (a, Ñ, Σ_z) with a = 1 − Δt/τ, Ñ = (Δt/τ)·N and Σ_z per the
/// chosen noise exponent.
pub fn discretize(
    tau: f64,
    dt: f64,
    n_cont: &DMatrix<f64>,
    gamma_z: &DMatrix<f64>,
    exponent: NoiseExponent,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    if !(tau > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParam("τ and Δt must be positive".into()));
    }
    if dt > tau {
        return Err(Error::InvalidParam(format!(
            "Δt={dt} > τ={tau} would give negative leak"
        )));
    }
    let a = 1.0 - dt / tau;
    let readin = n_cont * (dt / tau);
    let scale = match exponent {
        NoiseExponent::EulerMaruyama => dt / (tau * tau),
        NoiseExponent::PaperLiteral => (dt / tau) * (dt / tau),
    };
    let sigma_z = gamma_z * gamma_z.transpose() * scale;
    Ok((a, readin, sigma_z))
}

/// Transition mean F(z) = a·z + Ñᵀφ(Mz + Hs).
pub fn latent_step_mean(
    model: &LowRankRnn,
    z: &DVector<f64>,
    s: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if z.len() != model.rank() {
        return Err(Error::Shape(format!("latent dim {} vs rank {}", z.len(), model.rank())));
    }
    let mut pre = &model.embedding * z;
    match (&model.input_weights, s) {
        (Some(h), Some(sv)) => {
            if sv.len() != h.ncols() {
                return Err(Error::Shape(format!(
                    "stimulus dim {} vs input weights {}",
                    sv.len(),
                    h.ncols()
                )));
            }
            pre += h * sv;
        }
        (None, Some(_)) => {
            return Err(Error::Shape("stimulus given but model has no input weights".into()))
        }
        (Some(_), None) => {
            return Err(Error::Shape("model has input weights but no stimulus given".into()))
        }
        (None, None) => {}
    }
    let phi = activation_eval(&model.activation, &pre)?;
    Ok(z * model.leak + model.readin.transpose() * phi)
}

/// Project neuron activity onto the latent space: z = (MᵀM)⁻¹Mᵀx.
pub fn project_to_latent(model: &LowRankRnn, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.num_units() {
        return Err(Error::Shape(format!(
            "activity dim {} vs {} units",
            x.len(),
            model.num_units()
        )));
    }
    let m = &model.embedding;
    let gram = m.transpose() * m;
    let rhs = m.transpose() * x;
    gram.clone()
        .lu()
        .solve(&rhs)
        .filter(|_| gram.determinant().abs() > 1e-300)
        .ok_or_else(|| Error::Singular("MᵀM singular: embedding is rank deficient".into()))
}

/// Embed a latent state into neuron space: x = Mz.
pub fn embed_to_neurons(model: &LowRankRnn, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != model.rank() {
        return Err(Error::Shape(format!("latent dim {} vs rank {}", z.len(), model.rank())));
    }
    Ok(&model.embedding * z)
}

/// Latent basis change that orthonormalizes the columns of M.
///
/// Uses A = UᵀM with U the first R left singular vectors of J = MÑᵀ; the
/// neuron-space process Mz is distributionally unchanged. Column signs are
/// fixed so the largest-magnitude entry of each column of the new M is
/// positive. Returns the transformed model and the transform A (ẑ = Az).
pub fn orthogonalize(model: &LowRankRnn) -> Result<(LowRankRnn, DMatrix<f64>)> {
    let r = model.rank();
    // Left singular vectors of J = MÑᵀ without forming the N×N product:
    // M = Q_m R_m, then J = Q_m (R_m Ñᵀ) and svd(R_m Ñᵀ) = U_s S Vᵀ gives
    // U = Q_m U_s.
    let qr = model.embedding.clone().qr();
    let q_m = qr.q();
    let r_m = qr.r();
    for i in 0..r {
        if r_m[(i, i)].abs() < 1e-12 {
            return Err(Error::Singular("embedding M is rank deficient".into()));
        }
    }
    let small = &r_m * model.readin.transpose(); // R×N
    let svd = small.svd(true, false);
    let u_s = svd.u.as_ref().expect("svd with u requested");
    let mut u = &q_m * u_s.columns(0, r).clone_owned(); // N×R

    // Deterministic sign convention.
    for c in 0..r {
        let col = u.column(c);
        let (mut idx, mut best) = (0, 0.0f64);
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if col[idx] < 0.0 {
            for i in 0..u.nrows() {
                u[(i, c)] = -u[(i, c)];
            }
        }
    }

    let a = u.transpose() * &model.embedding; // R×R
    let a_inv = a
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("UᵀM singular during orthogonalisation".into()))?;

    let new_embedding = &model.embedding * &a_inv;
    let new_readin = &model.readin * a.transpose(); // N̂ᵀ = AÑᵀ
    let new_noise = &a * &model.noise_cov * a.transpose();
    let new_initial = InitialState {
        mean: &a * &model.initial.mean,
        cov: &a * &model.initial.cov * a.transpose(),
    };
    let new_head = match &model.obs_head {
        ObservationHead::LinearGaussian { readout, noise_var, tied_to_embedding } => {
            let new_readout =
                if *tied_to_embedding { new_embedding.clone() } else { readout * &a_inv };
            ObservationHead::LinearGaussian {
                readout: new_readout,
                noise_var: noise_var.clone(),
                tied_to_embedding: *tied_to_embedding,
            }
        }
        // Poisson parameters act on x = Mz, which is unchanged.
        other => other.clone(),
    };

    let transformed = LowRankRnn {
        embedding: new_embedding,
        readin: new_readin,
        leak: model.leak,
        activation: model.activation.clone(),
        noise_cov: crate::linalg::symmetrize(&new_noise),
        input_weights: model.input_weights.clone(),
        initial: new_initial,
        obs_head: new_head,
        tau: model.tau,
        dt: model.dt,
    };
    Ok((transformed, a))
}

/// Leaky integration s̃ of a stimulus stream with the model's own Euler step:
/// s̃_{t+1} = (1 − Δt/τ)·s̃_t + (Δt/τ)·s_t, s̃_0 = 0.
///
/// Diagnostic for the s ≈ s̃ substitution; the model itself always consumes
/// the raw stimulus.
pub fn stimulus_filter(tau: f64, dt: f64, s: &StimulusStream) -> DMatrix<f64> {
    let (t_len, n_s) = s.values.shape();
    let a = 1.0 - dt / tau;
    let mut out = DMatrix::zeros(t_len, n_s);
    let mut state = DVector::zeros(n_s);
    for t in 0..t_len {
        state = &state * a + s.at(t) * (dt / tau);
        out.row_mut(t).copy_from(&state.transpose());
    }
    out
}

/// Largest |s̃ − s| over a stream; the sup-norm gap of the substitution.
pub fn stimulus_substitution_gap(tau: f64, dt: f64, s: &StimulusStream) -> f64 {
    let filtered = stimulus_filter(tau, dt, s);
    (&filtered - &s.values).abs().max()
}

/// Simulate the latent process for `steps` transitions from a given start,
/// consuming one R-vector of standard normals per step through the supplied
/// noise factor (z' = F(z) + factor·ε). Used for common-random-number tests.
pub fn simulate_latent_with_factor<R: Rng + ?Sized>(
    model: &LowRankRnn,
    z0: DVector<f64>,
    noise_factor: &DMatrix<f64>,
    stimulus: Option<&StimulusStream>,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let mut zs = Vec::with_capacity(steps + 1);
    let mut z = z0;
    zs.push(z.clone());
    for t in 0..steps {
        let s = stimulus.map(|ss| ss.at(t.min(ss.len().saturating_sub(1))));
        let eps = DVector::from_iterator(
            model.rank(),
            (0..model.rank()).map(|_| -> f64 { StandardNormal.sample(rng) }),
        );
        z = model.step_mean(&z, s.as_ref())? + noise_factor * eps;
        zs.push(z.clone());
    }
    Ok(zs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn toy_model(n: usize, r: usize, seed: u64) -> LowRankRnn {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let embedding = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
        // Keep ‖ÑᵀM‖ well below 1 − a so the dynamics contract and
        // common-random-number comparisons stay tight over long horizons.
        let scale = 0.2 / n as f64;
        let readin = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-scale..scale));
        let thresholds = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        LowRankRnn {
            embedding: embedding.clone(),
            readin,
            leak: 0.9,
            activation: PiecewiseLinearSpec::relu(thresholds),
            noise_cov: DMatrix::identity(r, r) * 0.01,
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

    #[test]
    fn discretize_basic_values() {
        let n_cont = DMatrix::identity(2, 2);
        let gamma = DMatrix::identity(2, 2);
        let (a, ntilde, sigma) =
            discretize(10.0, 1.0, &n_cont, &gamma, NoiseExponent::EulerMaruyama).unwrap();
        assert_relative_eq!(a, 0.9, epsilon = 1e-15);
        assert_relative_eq!(ntilde[(0, 0)], 0.1, epsilon = 1e-15);
        // Δt/τ² = 1/100
        assert_relative_eq!(sigma[(0, 0)], 0.01, epsilon = 1e-15);
        assert_relative_eq!(sigma[(0, 1)], 0.0, epsilon = 1e-15);

        let (a0, _, _) =
            discretize(5.0, 5.0, &n_cont, &gamma, NoiseExponent::EulerMaruyama).unwrap();
        assert_relative_eq!(a0, 0.0, epsilon = 1e-15);

        assert!(discretize(1.0, 2.0, &n_cont, &gamma, NoiseExponent::EulerMaruyama).is_err());

        // The two exponent conventions differ by a factor Δt, so Δt=1 cannot
        // tell them apart; use Δt=2.
        let (_, _, sigma_em) =
            discretize(10.0, 2.0, &n_cont, &gamma, NoiseExponent::EulerMaruyama).unwrap();
        let (_, _, sigma_lit) =
            discretize(10.0, 2.0, &n_cont, &gamma, NoiseExponent::PaperLiteral).unwrap();
        assert_relative_eq!(sigma_em[(0, 0)], 0.02, epsilon = 1e-15);
        assert_relative_eq!(sigma_lit[(0, 0)], 0.04, epsilon = 1e-15);
    }

    #[test]
    fn discretize_roundtrip_recovers_continuous_readin() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        use rand::Rng;
        let n_cont = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
        let gamma = DMatrix::identity(2, 2);
        let (a, ntilde, _) =
            discretize(7.0, 0.5, &n_cont, &gamma, NoiseExponent::EulerMaruyama).unwrap();
        let recovered = &ntilde * (7.0 / 0.5);
        assert!((recovered - &n_cont).abs().max() < 1e-12);
        assert_relative_eq!(a, 1.0 - 0.5 / 7.0, epsilon = 1e-15);
    }

    #[test]
    fn step_mean_scalar_hand_value() {
        // N=R=1, M=1, Ñ=0.2, a=0.9, h=1, z=2 → 0.9·2 + 0.2·max(2−1,0) = 2.0
        let model = LowRankRnn {
            embedding: DMatrix::from_row_slice(1, 1, &[1.0]),
            readin: DMatrix::from_row_slice(1, 1, &[0.2]),
            leak: 0.9,
            activation: PiecewiseLinearSpec::relu(DVector::from_vec(vec![1.0])),
            noise_cov: DMatrix::identity(1, 1),
            input_weights: None,
            initial: InitialState::standard(1),
            obs_head: ObservationHead::linear_gaussian(
                DMatrix::identity(1, 1),
                DVector::from_element(1, 1.0),
            )
            .unwrap(),
            tau: 10.0,
            dt: 1.0,
        };
        let f = model.step_mean(&DVector::from_vec(vec![2.0]), None).unwrap();
        assert_relative_eq!(f[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn step_mean_zero_and_identity_cases() {
        let mut model = toy_model(5, 2, 0);
        model.activation = PiecewiseLinearSpec::relu(DVector::zeros(5));
        // Zero thresholds: φ(0) = 0, so F(0) = 0.
        let f = model.step_mean(&DVector::zeros(2), None).unwrap();
        assert!(f.amax() < 1e-14);

        // a=1, Ñ=0 → identity map. Construct directly (a=1 is outside the
        // trained-model range but fine for the map itself).
        let mut ident = toy_model(5, 2, 1);
        ident.leak = 1.0;
        ident.readin = DMatrix::zeros(5, 2);
        let z = DVector::from_vec(vec![0.3, -0.7]);
        let f = latent_step_mean(&ident, &z, None).unwrap();
        assert!((f - z).amax() < 1e-15);
    }

    #[test]
    fn projection_is_left_inverse_and_annihilates_complement() {
        let model = toy_model(8, 2, 2);
        let z = DVector::from_vec(vec![0.4, -1.2]);
        let x = embed_to_neurons(&model, &z).unwrap();
        let back = project_to_latent(&model, &x).unwrap();
        assert!((back - &z).amax() < 1e-10);

        // Build x_perp via the QR complement of M.
        let qr = model.embedding.clone().qr();
        let q = qr.q();
        let mut x_perp = DVector::from_fn(8, |i, _| (i as f64 * 0.37).sin());
        x_perp -= &q * (q.transpose() * &x_perp);
        let z_perp = project_to_latent(&model, &x_perp).unwrap();
        assert!(z_perp.amax() < 1e-10, "projection of complement: {z_perp:?}");

        let mixed = project_to_latent(&model, &(x + x_perp)).unwrap();
        assert!((mixed - z).amax() < 1e-10);
    }

    #[test]
    fn projection_rejects_rank_deficient() {
        let mut model = toy_model(6, 2, 3);
        let col0 = model.embedding.column(0).clone_owned();
        model.embedding.set_column(1, &col0);
        assert!(project_to_latent(&model, &DVector::zeros(6)).is_err());
    }

    #[test]
    fn orthogonalize_produces_orthonormal_columns() {
        let model = toy_model(12, 3, 4);
        let (ortho, _) = orthogonalize(&model).unwrap();
        let gram = ortho.embedding.transpose() * &ortho.embedding;
        assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-8);
    }

    #[test]
    fn orthogonalize_fixed_on_orthonormal_input() {
        let model = toy_model(10, 2, 5);
        let (once, _) = orthogonalize(&model).unwrap();
        let (twice, _) = orthogonalize(&once).unwrap();
        assert!((&once.embedding - &twice.embedding).abs().max() < 1e-8);
    }

    #[test]
    fn orthogonalize_preserves_neuron_trajectories_pathwise() {
        let model = toy_model(9, 2, 6);
        let (ortho, a) = orthogonalize(&model).unwrap();

        let (l, _) = chol_spd(&model.noise_cov, "test").unwrap();
        let l_t = &a * &l; // transformed factor: same ε stream maps to Aε-noise

        let z0 = DVector::from_vec(vec![0.5, -0.25]);
        let z0_t = &a * &z0;

        let mut rng1 = ChaCha12Rng::seed_from_u64(99);
        let traj = simulate_latent_with_factor(&model, z0, &l, None, 200, &mut rng1).unwrap();
        let mut rng2 = ChaCha12Rng::seed_from_u64(99);
        let traj_t =
            simulate_latent_with_factor(&ortho, z0_t, &l_t, None, 200, &mut rng2).unwrap();

        let mut max_dev = 0.0f64;
        for (z, zt) in traj.iter().zip(traj_t.iter()) {
            let x = &model.embedding * z;
            let xt = &ortho.embedding * zt;
            max_dev = max_dev.max((x - xt).amax());
        }
        assert!(max_dev < 1e-6, "neuron trajectories deviate by {max_dev}");
    }

    #[test]
    fn general_linear_transform_preserves_neuron_process() {
        // Any invertible A leaves x = Mz pathwise invariant under the
        // transformed parameters and common random numbers.
        let model = toy_model(7, 2, 8);
        let a = DMatrix::from_row_slice(2, 2, &[1.3, -0.4, 0.2, 0.8]);
        let a_inv = a.clone().try_inverse().unwrap();

        let transformed = LowRankRnn {
            embedding: &model.embedding * &a_inv,
            readin: &model.readin * a.transpose(),
            noise_cov: &a * &model.noise_cov * a.transpose(),
            initial: InitialState {
                mean: &a * &model.initial.mean,
                cov: &a * &model.initial.cov * a.transpose(),
            },
            ..model.clone()
        };

        let (l, _) = chol_spd(&model.noise_cov, "test").unwrap();
        let l_t = &a * &l;
        let z0 = DVector::from_vec(vec![-0.3, 0.9]);

        let mut rng1 = ChaCha12Rng::seed_from_u64(5);
        let traj = simulate_latent_with_factor(&model, z0.clone(), &l, None, 150, &mut rng1).unwrap();
        let mut rng2 = ChaCha12Rng::seed_from_u64(5);
        let traj_t =
            simulate_latent_with_factor(&transformed, &a * z0, &l_t, None, 150, &mut rng2)
                .unwrap();

        let mut max_dev = 0.0f64;
        for (z, zt) in traj.iter().zip(traj_t.iter()) {
            max_dev = max_dev
                .max((&model.embedding * z - &transformed.embedding * zt).amax());
        }
        assert!(max_dev < 1e-6, "max deviation {max_dev}");
    }

    #[test]
    fn out_of_subspace_component_decays_geometrically() {
        // x = Mz + x_perp: the orthogonal component evolves as x' = a·x_perp.
        let model = toy_model(6, 2, 9);
        let qr = model.embedding.clone().qr();
        let q = qr.q();
        let mut x_perp = DVector::from_fn(6, |i, _| ((i * 7 + 1) as f64).cos());
        x_perp -= &q * (q.transpose() * &x_perp);
        let norm0 = x_perp.norm();
        // Latent-plus-decay step in neuron space: the recurrent drive lives in
        // col(M); the orthogonal residual is only leaked.
        let mut cur = x_perp.clone();
        for _ in 0..10 {
            cur *= model.leak;
        }
        assert_relative_eq!(cur.norm() / norm0, model.leak.powi(10), epsilon = 1e-12);
    }

    #[test]
    fn stimulus_filter_zero_and_constant() {
        let zero = StimulusStream::new(DMatrix::zeros(10, 2)).unwrap();
        assert!(stimulus_filter(10.0, 1.0, &zero).abs().max() == 0.0);

        let s_val = 2.0;
        let constant = StimulusStream::new(DMatrix::from_element(50, 1, s_val)).unwrap();
        let filtered = stimulus_filter(10.0, 1.0, &constant);
        // Closed form: s̃_t = s·(1 − a^t) with t counted from 1.
        for t in 0..50 {
            let expect = s_val * (1.0 - 0.9f64.powi(t as i32 + 1));
            assert_relative_eq!(filtered[(t, 0)], expect, epsilon = 1e-12);
        }
        assert!((filtered[(49, 0)] - s_val).abs() < 0.01 * s_val);
    }

    #[test]
    fn slow_stimulus_has_small_substitution_gap() {
        // Stimulus varying much slower than τ: sup-norm gap stays small.
        let t_len = 2000;
        let tau = 5.0;
        let vals = DMatrix::from_fn(t_len, 1, |t, _| (t as f64 / 500.0).sin());
        let s = StimulusStream::new(vals).unwrap();
        let gap = stimulus_substitution_gap(tau, 1.0, &s);
        assert!(gap < 0.05, "gap {gap}");
    }

    #[test]
    fn validate_catches_leak_mismatch() {
        let mut model = toy_model(5, 2, 10);
        model.validate().unwrap();
        model.leak = 0.5;
        assert!(model.validate().is_err());
    }
}
