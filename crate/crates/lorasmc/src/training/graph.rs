//! ELBO compute graph: one tape per trial, built while the sweep runs.
//!
//! Gaussian draws are reparameterized (z = mean + scale·ε with ε recorded),
//! ancestor indices are drawn outside the tape and treated as constants, so
//! the backward pass yields the biased gradient convention: gradients flow
//! through transition means, proposal parameters, encoder outputs and the
//! per-step logZ terms, but not through the resampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{ln_factorial, LN_2PI};
use crate::smc::resample_multinomial;
use crate::tape::{NodeId, Tape};
use crate::training::params::{NoiseParam, ObsParam, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Bootstrap,
    OptimalLinearGaussian,
    EncoderProduct,
}

/// Frozen randomness of one sweep: reparameterization draws and ancestor
/// choices. Replaying a trace at perturbed parameters evaluates exactly the
/// function the tape differentiates.
#[derive(Debug, Clone)]
pub struct SweepTrace {
    pub eps: Vec<Vec<DVector<f64>>>,
    pub ancestors: Vec<Vec<usize>>,
}

enum NoiseSource<'a, R: Rng> {
    Fresh { rng: &'a mut R },
    Replay { trace: &'a SweepTrace },
}

pub struct ElboGraph {
    pub tape: Tape,
    pub objective: NodeId,
    pub leaves: Vec<(String, NodeId)>,
}

struct Ctx {
    a: NodeId,
    embedding: NodeId,
    readin: NodeId,
    threshold_mat: NodeId,
    slopes: DMatrix<f64>,
    input_weights: Option<NodeId>,
}

/// Build the graph drawing fresh randomness; returns the trace for replay.
pub fn build_fresh<R: Rng>(
    params: &ParamSet,
    proposal: ProposalKind,
    y: &DMatrix<f64>,
    stimulus: Option<&DMatrix<f64>>,
    k: usize,
    rng: &mut R,
) -> Result<(ElboGraph, SweepTrace)> {
    let mut source = NoiseSource::Fresh { rng };
    build(params, proposal, y, stimulus, k, &mut source)
}

/// Rebuild the graph for the same randomness at (possibly different) params.
pub fn build_replay(
    params: &ParamSet,
    proposal: ProposalKind,
    y: &DMatrix<f64>,
    stimulus: Option<&DMatrix<f64>>,
    k: usize,
    trace: &SweepTrace,
) -> Result<ElboGraph> {
    let mut source: NoiseSource<'_, rand_chacha::ChaCha12Rng> = NoiseSource::Replay { trace };
    let (graph, _) = build(params, proposal, y, stimulus, k, &mut source)?;
    Ok(graph)
}

fn build<R: Rng>(
    params: &ParamSet,
    proposal: ProposalKind,
    y: &DMatrix<f64>,
    stimulus: Option<&DMatrix<f64>>,
    k: usize,
    source: &mut NoiseSource<R>,
) -> Result<(ElboGraph, SweepTrace)> {
    let t_len = y.nrows();
    let n_y = y.ncols();
    let r = params.rank();
    if t_len == 0 || k == 0 {
        return Err(Error::InvalidParam("need T ≥ 1 and K ≥ 1".into()));
    }
    match proposal {
        ProposalKind::OptimalLinearGaussian => {
            if !matches!(params.obs, ObsParam::Gaussian { .. }) {
                return Err(Error::Modality(
                    "optimal proposal requires a Gaussian observation head".into(),
                ));
            }
        }
        ProposalKind::EncoderProduct => {
            if !matches!(params.noise, NoiseParam::LogDiag(_)) {
                return Err(Error::InvalidParam(
                    "product proposal requires a diagonal transition covariance".into(),
                ));
            }
            if params.encoder.is_none() {
                return Err(Error::InvalidParam("product proposal requires an encoder".into()));
            }
        }
        ProposalKind::Bootstrap => {}
    }
    if let Some(s) = stimulus {
        if params.input_weights.is_none() {
            return Err(Error::Shape("stimulus given but no input weights".into()));
        }
        if s.nrows() < t_len {
            return Err(Error::Shape("stimulus shorter than observations".into()));
        }
    }

    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    for (name, m) in params.blocks() {
        let id = tape.leaf(m);
        leaves.push((name, id));
    }
    let find = |name: &str, leaves: &[(String, NodeId)]| -> NodeId {
        leaves.iter().find(|(n, _)| n == name).map(|(_, id)| *id).expect("leaf")
    };

    // Leak a = exp(−exp(ã)).
    let a_tilde = find("a_tilde", &leaves);
    let e1 = tape.exp(a_tilde);
    let ne = tape.neg(e1);
    let a_node = tape.exp(ne);

    let embedding = find("embedding", &leaves);
    let readin = find("readin", &leaves);
    let thr_leaf = find("thresholds", &leaves);
    let thr_map = tape.constant(params.activation.threshold_map());
    let threshold_mat = tape.matmul(thr_leaf, thr_map);
    let slopes = params.activation.slopes(params.units());
    let input_weights = params.input_weights.as_ref().map(|_| find("input_weights", &leaves));
    let ctx = Ctx { a: a_node, embedding, readin, threshold_mat, slopes, input_weights };

    // Transition covariance and its factor.
    let (sigma_node, noise_factor, noise_diag_var): (NodeId, NodeId, Option<NodeId>) =
        match &params.noise {
            NoiseParam::FullCholRaw(_) => {
                let raw = find("noise_chol_raw", &leaves);
                let c = tape.lower_tri_exp_diag(raw);
                let ct = tape.transpose(c);
                let sigma = tape.matmul(c, ct);
                (sigma, c, None)
            }
            NoiseParam::LogDiag(_) => {
                let raw = find("noise_log_diag", &leaves);
                let v = tape.exp(raw);
                let sigma = tape.diag_mat(v);
                let sd = tape.sqrt(v);
                let factor = tape.diag_mat(sd);
                (sigma, factor, Some(v))
            }
        };

    // Initial-state distribution (diagonal).
    let init_mean = find("init_mean", &leaves);
    let init_raw = find("init_log_diag", &leaves);
    let init_var = tape.exp(init_raw);
    let sigma1_node = tape.diag_mat(init_var);
    let sd1 = tape.sqrt(init_var);
    let init_factor = tape.diag_mat(sd1);

    // Observation head pieces.
    enum ObsNodes {
        Gaussian { b: NodeId, noise_var_vec: NodeId },
        Poisson { gain: NodeId, bias: NodeId },
    }
    let obs_nodes = match &params.obs {
        ObsParam::Gaussian { .. } => {
            let raw = find("obs_log_noise_var", &leaves);
            let v = tape.exp(raw);
            ObsNodes::Gaussian { b: embedding, noise_var_vec: v }
        }
        ObsParam::Poisson { .. } => ObsNodes::Poisson {
            gain: find("obs_gain", &leaves),
            bias: find("obs_bias", &leaves),
        },
    };

    // Optimal-proposal caches (time-invariant): step and initial variants.
    struct OptNodes {
        shrink: NodeId,
        gain: NodeId,
        s_inv: NodeId,
        prop_chol: NodeId,
        neg_half_logdet_const: NodeId,
        b: NodeId,
    }
    let make_opt = |tape: &mut Tape, sigma: NodeId, b: NodeId, sy_vec: NodeId| -> OptNodes {
        let sy = tape.diag_mat(sy_vec);
        let bs = tape.matmul(b, sigma);
        let bt = tape.transpose(b);
        let bsbt = tape.matmul(bs, bt);
        let s_raw = tape.add(bsbt, sy);
        let s_sym = tape.symmetrize(s_raw);
        let s_inv = tape.inverse(s_sym);
        let l_s = tape.cholesky(s_sym);
        let dvec = tape.diag_vec(l_s);
        let lnd = tape.ln(dvec);
        let half_logdet = tape.sum_all(lnd);
        let cst = tape.scalar_constant(0.5 * n_y as f64 * LN_2PI);
        let half_plus = tape.add(half_logdet, cst);
        let neg_half_logdet_const = tape.neg(half_plus);
        let sig_bt = tape.matmul(sigma, bt);
        let gain = tape.matmul(sig_bt, s_inv);
        let kb = tape.matmul(gain, b);
        let eye = tape.constant(DMatrix::identity(r, r));
        let shrink = tape.sub(eye, kb);
        let shrink_sigma = tape.matmul(shrink, sigma);
        let prop_cov = tape.symmetrize(shrink_sigma);
        let prop_chol = tape.cholesky(prop_cov);
        OptNodes { shrink, gain, s_inv, prop_chol, neg_half_logdet_const, b }
    };
    let opt = match (proposal, &obs_nodes) {
        (ProposalKind::OptimalLinearGaussian, ObsNodes::Gaussian { b, noise_var_vec }) => Some((
            make_opt(&mut tape, sigma_node, *b, *noise_var_vec),
            make_opt(&mut tape, sigma1_node, *b, *noise_var_vec),
        )),
        _ => None,
    };

    // Encoder forward (on tape, shared across particles).
    let enc_rows = match (proposal, &params.encoder) {
        (ProposalKind::EncoderProduct, Some(enc)) => {
            let pad = enc.spec.pad;
            let mut h = tape.constant(y.clone());
            for (i, layer) in enc.trunk.iter().enumerate() {
                let w = find(&format!("enc_trunk{i}_w"), &leaves);
                let b = find(&format!("enc_trunk{i}_b"), &leaves);
                let c = tape.causal_conv(h, w, b, layer.kernel, pad);
                h = tape.gelu(c);
            }
            let wm = find("enc_mean_w", &leaves);
            let bm = find("enc_mean_b", &leaves);
            let means = tape.causal_conv(h, wm, bm, enc.mean_head.kernel, pad);
            let wv = find("enc_logvar_w", &leaves);
            let bv = find("enc_logvar_b", &leaves);
            let logvars = tape.causal_conv(h, wv, bv, enc.logvar_head.kernel, pad);
            let vars = tape.exp(logvars);
            Some((means, vars))
        }
        _ => None,
    };

    // Poisson log-factorial constants per step.
    let ln_fact: Vec<f64> = (0..t_len)
        .map(|t| {
            if matches!(params.obs, ObsParam::Poisson { .. }) {
                (0..n_y).map(|i| ln_factorial(y[(t, i)] as u64)).sum()
            } else {
                0.0
            }
        })
        .collect();

    // Transition mean F(z) = a·z + Ñᵀφ(Mz [+ Hs]).
    let step_mean = |tape: &mut Tape, ctx: &Ctx, z: NodeId, s_const: Option<NodeId>| -> NodeId {
        let mut pre = tape.matmul(ctx.embedding, z);
        if let (Some(h), Some(s)) = (ctx.input_weights, s_const) {
            let drive = tape.matmul(h, s);
            pre = tape.add(pre, drive);
        }
        let phi = tape.pwl(pre, ctx.threshold_mat, ctx.slopes.clone());
        let nphi = tape.tr_matmul(ctx.readin, phi);
        let az = tape.scalar_mul(ctx.a, z);
        tape.add(az, nphi)
    };

    // Diagonal Gaussian log density of z under (mean, var) nodes.
    let diag_logpdf = |tape: &mut Tape, z: NodeId, mean: NodeId, var: NodeId, dim: usize| {
        let resid = tape.sub(z, mean);
        let rsq = tape.hadamard(resid, resid);
        let rv = tape.recip(var);
        let quad = tape.hadamard(rsq, rv);
        let lnv = tape.ln(var);
        let terms = tape.add(quad, lnv);
        let s = tape.sum_all(terms);
        let cst = tape.scalar_constant(dim as f64 * LN_2PI);
        let tot = tape.add(s, cst);
        tape.scale(tot, -0.5)
    };

    // log p(y_t | z).
    let obs_logpdf = |tape: &mut Tape, z: NodeId, y_const: NodeId, t: usize| -> NodeId {
        match &obs_nodes {
            ObsNodes::Gaussian { b, noise_var_vec } => {
                let mean = tape.matmul(*b, z);
                let resid = tape.sub(y_const, mean);
                let rsq = tape.hadamard(resid, resid);
                let rv = tape.recip(*noise_var_vec);
                let quad = tape.hadamard(rsq, rv);
                let lnv = tape.ln(*noise_var_vec);
                let terms = tape.add(quad, lnv);
                let s = tape.sum_all(terms);
                let cst = tape.scalar_constant(n_y as f64 * LN_2PI);
                let tot = tape.add(s, cst);
                tape.scale(tot, -0.5)
            }
            ObsNodes::Poisson { gain, bias } => {
                let x = tape.matmul(embedding, z);
                let gx = tape.hadamard(*gain, x);
                let u = tape.sub(gx, *bias);
                let lam = tape.softplus(u);
                let ln_lam = tape.ln_softplus(u);
                let y_ln = tape.hadamard(y_const, ln_lam);
                let diff = tape.sub(y_ln, lam);
                let s = tape.sum_all(diff);
                let cst = tape.scalar_constant(ln_fact[t]);
                tape.sub(s, cst)
            }
        }
    };

    let mut trace_eps: Vec<Vec<DVector<f64>>> = Vec::with_capacity(t_len);
    let mut trace_anc: Vec<Vec<usize>> = Vec::with_capacity(t_len.saturating_sub(1));

    let mut prev_z: Vec<NodeId> = Vec::new();
    let mut prev_logw: Vec<NodeId> = Vec::new();
    let mut objective: Option<NodeId> = None;
    let ln_k = tape.scalar_constant((k as f64).ln());

    for t in 0..t_len {
        let y_col = DMatrix::from_iterator(n_y, 1, y.row(t).iter().cloned());
        let y_const = tape.constant(y_col);
        let s_prev_const = if t > 0 {
            stimulus.map(|s| {
                let v = DMatrix::from_iterator(s.ncols(), 1, s.row(t - 1).iter().cloned());
                tape.constant(v)
            })
        } else {
            None
        };

        // Resampling: outside the tape, indices are constants.
        let parents: Option<Vec<usize>> = if t > 0 {
            let logw_vals: Vec<f64> = prev_logw_values(&tape, &prev_logw);
            let idx = match source {
                NoiseSource::Fresh { rng } => {
                    let idx = resample_multinomial(&logw_vals, *rng).map_err(|e| match e {
                        Error::WeightDegeneracy { detail, .. } => {
                            Error::WeightDegeneracy { t: t - 1, detail }
                        }
                        other => other,
                    })?;
                    trace_anc.push(idx.clone());
                    idx
                }
                NoiseSource::Replay { trace } => trace.ancestors[t - 1].clone(),
            };
            Some(idx)
        } else {
            None
        };

        let mut step_eps = Vec::with_capacity(k);
        let mut step_z = Vec::with_capacity(k);
        let mut step_logw = Vec::with_capacity(k);

        for j in 0..k {
            let eps_vec = match source {
                NoiseSource::Fresh { rng } => {
                    let v = DVector::from_iterator(r, (0..r).map(|_| -> f64 {
                        StandardNormal.sample(*rng)
                    }));
                    step_eps.push(v.clone());
                    v
                }
                NoiseSource::Replay { trace } => trace.eps[t][j].clone(),
            };
            let eps_const =
                tape.constant(DMatrix::from_iterator(r, 1, eps_vec.iter().cloned()));

            let prior_mean = match &parents {
                Some(idx) => step_mean(&mut tape, &ctx, prev_z[idx[j]], s_prev_const),
                None => init_mean,
            };

            let (z, logw) = match proposal {
                ProposalKind::Bootstrap => {
                    let factor = if t == 0 { init_factor } else { noise_factor };
                    let scaled = tape.matmul(factor, eps_const);
                    let z = tape.add(prior_mean, scaled);
                    let lw = obs_logpdf(&mut tape, z, y_const, t);
                    (z, lw)
                }
                ProposalKind::OptimalLinearGaussian => {
                    let (step_opt, init_opt) = opt.as_ref().unwrap();
                    let o = if t == 0 { init_opt } else { step_opt };
                    let shrunk = tape.matmul(o.shrink, prior_mean);
                    let ky = tape.matmul(o.gain, y_const);
                    let mean = tape.add(shrunk, ky);
                    let le = tape.matmul(o.prop_chol, eps_const);
                    let z = tape.add(mean, le);
                    // Marginal weight log N(y; B·prior_mean, S).
                    let bf = tape.matmul(o.b, prior_mean);
                    let resid = tape.sub(y_const, bf);
                    let sr = tape.matmul(o.s_inv, resid);
                    let quad = tape.tr_matmul(resid, sr);
                    let half_quad = tape.scale(quad, -0.5);
                    let lw = tape.add(half_quad, o.neg_half_logdet_const);
                    (z, lw)
                }
                ProposalKind::EncoderProduct => {
                    let (means, vars) = enc_rows.as_ref().unwrap();
                    let e_mean = tape.row_as_col(*means, t);
                    let e_var = tape.row_as_col(*vars, t);
                    let p_var = if t == 0 {
                        init_var
                    } else {
                        noise_diag_var.expect("diag noise checked above")
                    };
                    let rp = tape.recip(p_var);
                    let re = tape.recip(e_var);
                    let prec = tape.add(rp, re);
                    let var = tape.recip(prec);
                    let pm_w = tape.hadamard(prior_mean, rp);
                    let em_w = tape.hadamard(e_mean, re);
                    let wsum = tape.add(pm_w, em_w);
                    let mean = tape.hadamard(var, wsum);
                    let sd = tape.sqrt(var);
                    let se = tape.hadamard(sd, eps_const);
                    let z = tape.add(mean, se);
                    let log_r = diag_logpdf(&mut tape, z, mean, var, r);
                    let log_trans = diag_logpdf(&mut tape, z, prior_mean, p_var, r);
                    let log_obs = obs_logpdf(&mut tape, z, y_const, t);
                    let joint = tape.add(log_obs, log_trans);
                    let lw = tape.sub(joint, log_r);
                    (z, lw)
                }
            };
            step_z.push(z);
            step_logw.push(logw);
        }

        if matches!(source, NoiseSource::Fresh { .. }) {
            trace_eps.push(step_eps);
        }

        let logw_vals = prev_logw_values(&tape, &step_logw);
        if logw_vals.iter().all(|w| !w.is_finite()) {
            return Err(Error::WeightDegeneracy {
                t,
                detail: format!("all {k} particle weights vanished"),
            });
        }

        let stacked = tape.stack(step_logw.clone());
        let lse = tape.log_sum_exp(stacked);
        let term = tape.sub(lse, ln_k);
        objective = Some(match objective {
            Some(acc) => tape.add(acc, term),
            None => term,
        });

        prev_z = step_z;
        prev_logw = step_logw;
    }

    let objective = objective.expect("T ≥ 1");
    let trace = match source {
        NoiseSource::Fresh { .. } => SweepTrace { eps: trace_eps, ancestors: trace_anc },
        NoiseSource::Replay { trace } => (*trace).clone(),
    };
    Ok((ElboGraph { tape, objective, leaves }, trace))
}

// Written as a free function so the borrow of `tape` stays local.
fn prev_logw_values(tape: &Tape, ids: &[NodeId]) -> Vec<f64> {
    ids.iter().map(|id| tape.scalar_value(*id)).collect()
}

/// Per-block gradients in the canonical block order.
pub type Blocks = Vec<(String, DMatrix<f64>)>;

/// Value and per-block gradient of the single-trial ELBO estimate under
/// frozen randomness drawn from `rng`.
pub fn elbo_grad_single<R: Rng>(
    params: &ParamSet,
    proposal: ProposalKind,
    y: &DMatrix<f64>,
    stimulus: Option<&DMatrix<f64>>,
    k: usize,
    rng: &mut R,
) -> Result<(f64, Blocks, SweepTrace)> {
    let (graph, trace) = build_fresh(params, proposal, y, stimulus, k, rng)?;
    let value = graph.tape.scalar_value(graph.objective);
    let grads = graph.tape.backward(graph.objective);
    let mut out = Vec::with_capacity(graph.leaves.len());
    for (name, id) in &graph.leaves {
        let shape = graph.tape.value(*id).shape();
        let g = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1));
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of block {name}")));
        }
        out.push((name.clone(), g));
    }
    Ok((value, out, trace))
}

/// Replay objective: same randomness, possibly perturbed parameters.
pub fn elbo_replay(
    params: &ParamSet,
    proposal: ProposalKind,
    y: &DMatrix<f64>,
    stimulus: Option<&DMatrix<f64>>,
    k: usize,
    trace: &SweepTrace,
) -> Result<f64> {
    let graph = build_replay(params, proposal, y, stimulus, k, trace)?;
    Ok(graph.tape.scalar_value(graph.objective))
}

/// Replay with gradients, for traces constructed by the caller.
pub fn elbo_grad_replay(
    params: &ParamSet,
    proposal: ProposalKind,
    y: &DMatrix<f64>,
    stimulus: Option<&DMatrix<f64>>,
    k: usize,
    trace: &SweepTrace,
) -> Result<(f64, Blocks)> {
    let graph = build_replay(params, proposal, y, stimulus, k, trace)?;
    let value = graph.tape.scalar_value(graph.objective);
    let grads = graph.tape.backward(graph.objective);
    let mut out = Vec::with_capacity(graph.leaves.len());
    for (name, id) in &graph.leaves {
        let shape = graph.tape.value(*id).shape();
        let g = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1));
        out.push((name.clone(), g));
    }
    Ok((value, out))
}
