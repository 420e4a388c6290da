//! Constrained parameterizations, ELBO gradients through reparameterized
//! particle sweeps, the optimizer and the training loop.

pub mod graph;
pub mod optim;
pub mod params;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::dataset::DatasetBundle;
use crate::{Error, Result};
pub use graph::{elbo_grad_single, elbo_replay, Blocks, ProposalKind, SweepTrace};
pub use optim::{clip_global_norm, lr_schedule, RAdam};
pub use params::{init_params, ActPreset, NoiseParam, ObsParam, ParamSet, StudentSpec};

/// Gradient convention through the SMC objective. Only the biased
/// reparameterization estimator with stopped resampling is implemented; a
/// pure score-function mode is out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    ReparamStopResampling,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub particles: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub proposal: ProposalKind,
    #[serde(default)]
    pub gradient_mode: GradientMode,
    /// Window length sampled from longer recordings; None uses whole trials.
    #[serde(default)]
    pub seq_len: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config("need lr_start ≥ lr_end > 0".into()));
        }
        if self.batch_size == 0 || self.particles == 0 {
            return Err(Error::Config("batch_size and particles must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_elbo: f64,
    pub lr: f64,
    pub wall_s: f64,
}

impl EpochRecord {
    /// One line of the line-delimited training log.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} elbo={:.6} lr={:.3e} wall_s={:.3}",
            self.epoch, self.mean_elbo, self.lr, self.wall_s
        )
    }
}

/// One trial's worth of training data.
#[derive(Debug, Clone)]
pub struct TrialWindow {
    pub y: DMatrix<f64>,
    pub stimulus: Option<DMatrix<f64>>,
}

/// Mean ELBO and mean per-block gradient over a batch of trials; per-trial
/// tapes run in parallel, reduction order is fixed by the batch order.
pub fn elbo_grad(
    params: &ParamSet,
    proposal: ProposalKind,
    batch: &[TrialWindow],
    k: usize,
    base_seed: u64,
) -> Result<(f64, Blocks)> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let results: Vec<Result<(f64, Blocks)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, trial)| {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(base_seed, i as u64));
            let (v, g, _) = elbo_grad_single(
                params,
                proposal,
                &trial.y,
                trial.stimulus.as_ref(),
                k,
                &mut rng,
            )?;
            Ok((v, g))
        })
        .collect();

    let mut value = 0.0;
    let mut acc: Option<Blocks> = None;
    for res in results {
        let (v, g) = res?;
        value += v;
        match &mut acc {
            None => acc = Some(g),
            Some(acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = acc.unwrap();
    for (_, g) in grads.iter_mut() {
        *g *= scale;
    }
    Ok((value * scale, grads))
}

pub fn mix_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 step keeps per-trial streams decorrelated.
    let mut z = base ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Sample a batch of contiguous windows from the dataset.
pub fn sample_batch<R: Rng>(
    dataset: &DatasetBundle,
    batch_size: usize,
    seq_len: Option<usize>,
    rng: &mut R,
) -> Vec<TrialWindow> {
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.gen_range(0..dataset.num_trials());
        let obs = &dataset.observations[idx];
        let t_total = obs.nrows();
        let len = seq_len.unwrap_or(t_total).min(t_total);
        let start = if len < t_total { rng.gen_range(0..=t_total - len) } else { 0 };
        let y = obs.rows(start, len).clone_owned();
        let stimulus = dataset
            .stimulus
            .as_ref()
            .map(|s| s[idx].rows(start, len).clone_owned());
        out.push(TrialWindow { y, stimulus });
    }
    out
}

/// Supplement-style initialization followed by epochs of minibatch ELBO
/// ascent with RAdam and the exponential learning-rate schedule.
///
/// A non-finite loss triggers one rollback to the epoch-start parameters
/// with the learning rate halved; a second occurrence aborts.
pub fn fit(
    dataset: &DatasetBundle,
    spec: &StudentSpec,
    config: &TrainConfig,
) -> Result<(ParamSet, Vec<EpochRecord>)> {
    config.validate()?;
    dataset.validate()?;
    if spec.num_inputs != dataset.num_inputs() {
        return Err(Error::Modality(format!(
            "model expects {} input channels, dataset has {}",
            spec.num_inputs,
            dataset.num_inputs()
        )));
    }
    match (spec.modality, dataset.modality) {
        (a, b) if a == b => {}
        _ => return Err(Error::Modality("dataset modality does not match observation head".into())),
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut params = init_params(spec, &mut rng)?;
    let mut optimizer = RAdam::default();
    let mut log = Vec::with_capacity(config.epochs);
    let mut lr_scale = 1.0;
    let mut rolled_back = false;

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.epochs, config.lr_start, config.lr_end) * lr_scale;
        let start = std::time::Instant::now();
        let epoch_snapshot = (params.clone(), optimizer.clone());
        let mut elbo_sum = 0.0;
        let mut failed = false;

        for batch_idx in 0..config.batches_per_epoch {
            let batch = sample_batch(dataset, config.batch_size, config.seq_len, &mut rng);
            let grad_seed = mix_seed(config.seed, (epoch * config.batches_per_epoch + batch_idx) as u64 + 1);
            match elbo_grad(&params, config.proposal, &batch, config.particles, grad_seed) {
                Ok((elbo, mut grads)) if elbo.is_finite() => {
                    elbo_sum += elbo;
                    clip_global_norm(&mut grads, 100.0);
                    // RAdam descends; flip sign to ascend the ELBO.
                    for (_, g) in grads.iter_mut() {
                        *g *= -1.0;
                    }
                    let mut blocks = params.blocks();
                    optimizer.step(&mut blocks, &grads, lr);
                    for (name, value) in &blocks {
                        params.set_block(name, value);
                    }
                }
                Ok(_) | Err(Error::NonFinite(_)) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        if failed {
            if rolled_back {
                return Err(Error::Training(format!(
                    "non-finite loss recurred at epoch {epoch}; aborting"
                )));
            }
            let (p, o) = epoch_snapshot;
            params = p;
            optimizer = o;
            lr_scale *= 0.5;
            rolled_back = true;
            log.push(EpochRecord {
                epoch,
                mean_elbo: f64::NAN,
                lr,
                wall_s: start.elapsed().as_secs_f64(),
            });
            continue;
        }

        log.push(EpochRecord {
            epoch,
            mean_elbo: elbo_sum / config.batches_per_epoch.max(1) as f64,
            lr,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }

    Ok((params, log))
}
