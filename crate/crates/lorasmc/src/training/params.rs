//! Constrained parameterizations: the unconstrained parameter set, the
//! bijections onto the model family, and the supplement-style initializer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::PiecewiseLinearSpec;
use crate::encoder::{init_encoder, CausalConvSpec, EncoderWeights};
use crate::model::LowRankRnn;
use crate::observation::{InitialState, ObservationHead};
use crate::{Error, Result};

/// Activation family of the student network; thresholds are trainable, the
/// slope pattern is fixed by the preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActPreset {
    Relu,
    Clipped,
}

impl ActPreset {
    pub fn spec(&self, h: &DVector<f64>) -> PiecewiseLinearSpec {
        match self {
            ActPreset::Relu => PiecewiseLinearSpec::relu(h.clone()),
            ActPreset::Clipped => PiecewiseLinearSpec::clipped(h.clone()),
        }
    }

    /// Constant N×D slope matrix for the tape.
    pub fn slopes(&self, n: usize) -> DMatrix<f64> {
        match self {
            ActPreset::Relu => DMatrix::from_element(n, 1, 1.0),
            ActPreset::Clipped => {
                DMatrix::from_fn(n, 2, |_, d| if d == 0 { 1.0 } else { -1.0 })
            }
        }
    }

    /// Row vector mapping the trainable h (N×1) onto the threshold matrix:
    /// thresholds = h · map (N×D).
    pub fn threshold_map(&self) -> DMatrix<f64> {
        match self {
            ActPreset::Relu => DMatrix::from_row_slice(1, 1, &[1.0]),
            ActPreset::Clipped => DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
        }
    }
}

/// Transition-noise parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseParam {
    /// Σ_z = CCᵀ with C lower triangular, C_ii = exp(raw_ii/2).
    FullCholRaw(DMatrix<f64>),
    /// Σ_z = diag(exp(raw)); required by the product proposal.
    LogDiag(DVector<f64>),
}

/// Observation-head parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsParam {
    /// Gaussian with B = M (tied) and diagonal Σ_y = diag(exp(raw)).
    Gaussian { log_noise_var: DVector<f64> },
    /// Poisson with per-unit gain and bias on x = Mz.
    Poisson { gain: DVector<f64>, bias: DVector<f64> },
}

/// All unconstrained trainables, plus the fixed structure they map onto.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    /// a = exp(−exp(ã)).
    pub a_tilde: f64,
    pub embedding: DMatrix<f64>,
    pub readin: DMatrix<f64>,
    /// Per-unit trainable threshold vector (the preset maps it to N×D).
    pub thresholds: DVector<f64>,
    pub noise: NoiseParam,
    pub init_mean: DVector<f64>,
    /// Σ_{z1} = diag(exp(raw)).
    pub init_log_diag: DVector<f64>,
    pub obs: ObsParam,
    pub input_weights: Option<DMatrix<f64>>,
    pub encoder: Option<EncoderWeights>,
    pub activation: ActPreset,
    pub tau: f64,
}

pub fn constrain_leak(a_tilde: f64) -> f64 {
    (-(a_tilde.exp())).exp()
}

pub fn unconstrain_leak(a: f64) -> Result<f64> {
    if !(0.0 < a && a < 1.0) {
        return Err(Error::InvalidParam(format!("leak {a} outside (0,1)")));
    }
    Ok((-(a.ln())).ln())
}

impl ParamSet {
    pub fn units(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn rank(&self) -> usize {
        self.embedding.ncols()
    }

    /// Constrained transition covariance.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        match &self.noise {
            NoiseParam::FullCholRaw(raw) => {
                let c = lower_tri_exp_diag(raw);
                &c * c.transpose()
            }
            NoiseParam::LogDiag(raw) => {
                DMatrix::from_diagonal(&raw.map(f64::exp))
            }
        }
    }

    /// Materialize the generative model. dt is derived from the trained leak
    /// so that a = 1 − dt/τ holds exactly.
    pub fn constrain(&self) -> Result<LowRankRnn> {
        let a = constrain_leak(self.a_tilde);
        let dt = self.tau * (1.0 - a);
        let obs_head = match &self.obs {
            ObsParam::Gaussian { log_noise_var } => ObservationHead::LinearGaussian {
                readout: self.embedding.clone(),
                noise_var: log_noise_var.map(f64::exp),
                tied_to_embedding: true,
            },
            ObsParam::Poisson { gain, bias } => ObservationHead::PoissonSoftplus {
                gain: gain.clone(),
                bias: bias.clone(),
                exposure: 1.0,
            },
        };
        let model = LowRankRnn {
            embedding: self.embedding.clone(),
            readin: self.readin.clone(),
            leak: a,
            activation: self.activation.spec(&self.thresholds),
            noise_cov: self.noise_cov(),
            input_weights: self.input_weights.clone(),
            initial: InitialState {
                mean: self.init_mean.clone(),
                cov: DMatrix::from_diagonal(&self.init_log_diag.map(f64::exp)),
            },
            obs_head,
            tau: self.tau,
            dt,
        };
        model.validate()?;
        Ok(model)
    }

    /// Invert `constrain` for a model in the image of the parameterization.
    pub fn unconstrain(model: &LowRankRnn, preset: ActPreset, full_noise: bool) -> Result<Self> {
        let n = model.num_units();
        let r = model.rank();
        let thresholds = match preset {
            ActPreset::Relu => model.activation.thresholds.column(0).clone_owned(),
            ActPreset::Clipped => -model.activation.thresholds.column(0).clone_owned(),
        };
        let noise = if full_noise {
            let chol = nalgebra::Cholesky::new(model.noise_cov.clone())
                .ok_or_else(|| Error::NotSpd("transition covariance".into()))?
                .l();
            let mut raw = DMatrix::zeros(r, r);
            for i in 0..r {
                for j in 0..i {
                    raw[(i, j)] = chol[(i, j)];
                }
                raw[(i, i)] = 2.0 * chol[(i, i)].ln();
            }
            NoiseParam::FullCholRaw(raw)
        } else {
            let diag = model.noise_cov.diagonal();
            NoiseParam::LogDiag(diag.map(f64::ln))
        };
        let obs = match &model.obs_head {
            ObservationHead::LinearGaussian { noise_var, .. } => {
                ObsParam::Gaussian { log_noise_var: noise_var.map(f64::ln) }
            }
            ObservationHead::PoissonSoftplus { gain, bias, .. } => {
                ObsParam::Poisson { gain: gain.clone(), bias: bias.clone() }
            }
        };
        let _ = n;
        Ok(Self {
            a_tilde: unconstrain_leak(model.leak)?,
            embedding: model.embedding.clone(),
            readin: model.readin.clone(),
            thresholds,
            noise,
            init_mean: model.initial.mean.clone(),
            init_log_diag: model.initial.cov.diagonal().map(f64::ln),
            obs,
            input_weights: model.input_weights.clone(),
            encoder: None,
            activation: preset,
            tau: model.tau,
        })
    }

    /// Canonical ordered view of all trainable blocks as name/matrix pairs.
    pub fn blocks(&self) -> Vec<(String, DMatrix<f64>)> {
        let mut out = vec![
            ("a_tilde".to_string(), DMatrix::from_element(1, 1, self.a_tilde)),
            ("embedding".to_string(), self.embedding.clone()),
            ("readin".to_string(), self.readin.clone()),
            ("thresholds".to_string(), to_col(&self.thresholds)),
        ];
        match &self.noise {
            NoiseParam::FullCholRaw(raw) => out.push(("noise_chol_raw".into(), raw.clone())),
            NoiseParam::LogDiag(raw) => out.push(("noise_log_diag".into(), to_col(raw))),
        }
        out.push(("init_mean".into(), to_col(&self.init_mean)));
        out.push(("init_log_diag".into(), to_col(&self.init_log_diag)));
        match &self.obs {
            ObsParam::Gaussian { log_noise_var } => {
                out.push(("obs_log_noise_var".into(), to_col(log_noise_var)));
            }
            ObsParam::Poisson { gain, bias } => {
                out.push(("obs_gain".into(), to_col(gain)));
                out.push(("obs_bias".into(), to_col(bias)));
            }
        }
        if let Some(h) = &self.input_weights {
            out.push(("input_weights".into(), h.clone()));
        }
        if let Some(enc) = &self.encoder {
            for (i, layer) in enc.trunk.iter().enumerate() {
                out.push((format!("enc_trunk{i}_w"), layer.weight.clone()));
                out.push((format!("enc_trunk{i}_b"), to_col(&layer.bias)));
            }
            out.push(("enc_mean_w".into(), enc.mean_head.weight.clone()));
            out.push(("enc_mean_b".into(), to_col(&enc.mean_head.bias)));
            out.push(("enc_logvar_w".into(), enc.logvar_head.weight.clone()));
            out.push(("enc_logvar_b".into(), to_col(&enc.logvar_head.bias)));
        }
        out
    }

    /// Write back an updated block by name.
    pub fn set_block(&mut self, name: &str, value: &DMatrix<f64>) {
        match name {
            "a_tilde" => self.a_tilde = value[(0, 0)],
            "embedding" => self.embedding.copy_from(value),
            "readin" => self.readin.copy_from(value),
            "thresholds" => self.thresholds.copy_from(&value.column(0)),
            "noise_chol_raw" => {
                if let NoiseParam::FullCholRaw(raw) = &mut self.noise {
                    raw.copy_from(value);
                }
            }
            "noise_log_diag" => {
                if let NoiseParam::LogDiag(raw) = &mut self.noise {
                    raw.copy_from(&value.column(0));
                }
            }
            "init_mean" => self.init_mean.copy_from(&value.column(0)),
            "init_log_diag" => self.init_log_diag.copy_from(&value.column(0)),
            "obs_log_noise_var" => {
                if let ObsParam::Gaussian { log_noise_var } = &mut self.obs {
                    log_noise_var.copy_from(&value.column(0));
                }
            }
            "obs_gain" => {
                if let ObsParam::Poisson { gain, .. } = &mut self.obs {
                    gain.copy_from(&value.column(0));
                }
            }
            "obs_bias" => {
                if let ObsParam::Poisson { bias, .. } = &mut self.obs {
                    bias.copy_from(&value.column(0));
                }
            }
            "input_weights" => {
                if let Some(h) = &mut self.input_weights {
                    h.copy_from(value);
                }
            }
            other => {
                if let Some(enc) = &mut self.encoder {
                    for (i, layer) in enc.trunk.iter_mut().enumerate() {
                        if other == format!("enc_trunk{i}_w") {
                            layer.weight.copy_from(value);
                            return;
                        }
                        if other == format!("enc_trunk{i}_b") {
                            layer.bias.copy_from(&value.column(0));
                            return;
                        }
                    }
                    match other {
                        "enc_mean_w" => enc.mean_head.weight.copy_from(value),
                        "enc_mean_b" => enc.mean_head.bias.copy_from(&value.column(0)),
                        "enc_logvar_w" => enc.logvar_head.weight.copy_from(value),
                        "enc_logvar_b" => enc.logvar_head.bias.copy_from(&value.column(0)),
                        _ => panic!("unknown parameter block {other}"),
                    }
                } else {
                    panic!("unknown parameter block {other}");
                }
            }
        }
    }
}

fn to_col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(v.len(), 1, v.iter().cloned())
}

/// C from raw entries: strict lower copied, diagonal exp(raw/2).
pub fn lower_tri_exp_diag(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = raw.nrows();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            c[(i, j)] = raw[(i, j)];
        }
        c[(i, i)] = (raw[(i, i)] / 2.0).exp();
    }
    c
}

/// Fixed model structure the initializer fills in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StudentSpec {
    pub units: usize,
    pub rank: usize,
    pub activation: ActPreset,
    pub modality: crate::dataset::Modality,
    /// Full Cholesky Σ_z (optimal proposal) or diagonal (product proposal).
    pub full_noise: bool,
    pub num_inputs: usize,
    pub encoder: Option<CausalConvSpec>,
    pub tau: f64,
}

/// Initialize parameters: uniform ranges for Ñ, M, H, h; output bias 0;
/// a = 0.9; Σ_z = 0.01·I; Σ_{z1} = I; μ_{z1} = 0; Gaussian Σ_y = 0.01·I;
/// Poisson gains N(0, 2/R); encoder fan-in uniform with the log-variance
/// bias offset by log 0.01.
pub fn init_params<R: Rng + ?Sized>(spec: &StudentSpec, rng: &mut R) -> Result<ParamSet> {
    let n = spec.units;
    let r = spec.rank;
    let bound_n = 1.0 / (n as f64).sqrt();
    let bound_r = 1.0 / (r as f64).sqrt();
    let embedding = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-bound_r..bound_r));
    let readin = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-bound_n..bound_n));
    let thresholds = DVector::from_fn(n, |_, _| rng.gen_range(-bound_n..bound_n));
    let noise = if spec.full_noise {
        // Σ_z = 0.01·I ⇒ C = 0.1·I ⇒ raw diag = 2·ln 0.1.
        let mut raw = DMatrix::zeros(r, r);
        for i in 0..r {
            raw[(i, i)] = 2.0 * 0.1f64.ln();
        }
        NoiseParam::FullCholRaw(raw)
    } else {
        NoiseParam::LogDiag(DVector::from_element(r, 0.01f64.ln()))
    };
    let obs = match spec.modality {
        crate::dataset::Modality::Gaussian => ObsParam::Gaussian {
            log_noise_var: DVector::from_element(n, 0.01f64.ln()),
        },
        crate::dataset::Modality::Poisson => {
            let std = (2.0 / r as f64).sqrt();
            ObsParam::Poisson {
                gain: DVector::from_fn(n, |_, _| {
                    let e: f64 = StandardNormal.sample(rng);
                    e * std
                }),
                bias: DVector::zeros(n),
            }
        }
    };
    let input_weights = if spec.num_inputs > 0 {
        let bound = 1.0 / (spec.num_inputs as f64).sqrt();
        Some(DMatrix::from_fn(n, spec.num_inputs, |_, _| rng.gen_range(-bound..bound)))
    } else {
        None
    };
    let encoder = match &spec.encoder {
        Some(enc_spec) => Some(init_encoder(enc_spec, rng)?),
        None => None,
    };
    Ok(ParamSet {
        a_tilde: unconstrain_leak(0.9)?,
        embedding,
        readin,
        thresholds,
        noise,
        init_mean: DVector::zeros(r),
        init_log_diag: DVector::zeros(r),
        obs,
        input_weights,
        encoder,
        activation: spec.activation,
        tau: spec.tau,
    })
}
