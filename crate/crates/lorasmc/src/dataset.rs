//! In-memory dataset container: trials × time × channels observations plus
//! optional stimulus streams and ground-truth latents.

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    /// One T×C matrix per trial.
    pub observations: Vec<DMatrix<f64>>,
    pub modality: Modality,
    /// Bin width in seconds.
    pub bin_seconds: f64,
    /// Optional per-trial T×N_s stimulus streams.
    pub stimulus: Option<Vec<DMatrix<f64>>>,
    /// Optional per-trial T×R ground-truth latents (teacher data).
    pub ground_truth_latents: Option<Vec<DMatrix<f64>>>,
    pub channel_names: Vec<String>,
}

impl DatasetBundle {
    pub fn num_trials(&self) -> usize {
        self.observations.len()
    }

    pub fn num_channels(&self) -> usize {
        self.observations.first().map_or(0, |m| m.ncols())
    }

    pub fn num_inputs(&self) -> usize {
        self.stimulus
            .as_ref()
            .and_then(|s| s.first())
            .map_or(0, |m| m.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_channels();
        for (i, obs) in self.observations.iter().enumerate() {
            if obs.ncols() != c {
                return Err(Error::Shape(format!("trial {i} has {} channels, expected {c}", obs.ncols())));
            }
            if obs.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("observations of trial {i}")));
            }
            if self.modality == Modality::Poisson
                && obs.iter().any(|v| *v < 0.0 || v.fract() != 0.0)
            {
                return Err(Error::InvalidParam(format!(
                    "trial {i}: Poisson observations must be nonnegative integers"
                )));
            }
        }
        if let Some(stim) = &self.stimulus {
            if stim.len() != self.observations.len() {
                return Err(Error::Shape("stimulus trial count".into()));
            }
            for (i, (s, o)) in stim.iter().zip(&self.observations).enumerate() {
                if s.nrows() != o.nrows() {
                    return Err(Error::Shape(format!("trial {i}: stimulus length")));
                }
            }
        }
        if let Some(lat) = &self.ground_truth_latents {
            if lat.len() != self.observations.len() {
                return Err(Error::Shape("latent trial count".into()));
            }
        }
        if !self.channel_names.is_empty() && self.channel_names.len() != c {
            return Err(Error::Shape("channel name count".into()));
        }
        if !(self.bin_seconds > 0.0) {
            return Err(Error::InvalidParam("bin width must be positive".into()));
        }
        Ok(())
    }

    /// Concatenate all trials along time (for long-recording statistics).
    pub fn concatenated(&self) -> DMatrix<f64> {
        let c = self.num_channels();
        let total: usize = self.observations.iter().map(|m| m.nrows()).sum();
        let mut out = DMatrix::zeros(total, c);
        let mut row = 0;
        for obs in &self.observations {
            out.rows_mut(row, obs.nrows()).copy_from(obs);
            row += obs.nrows();
        }
        out
    }
}
