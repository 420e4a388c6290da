//! Evaluation statistics: state-space divergence, spectral distance, spike
//! statistics, correlation/coherence/spectral tools and linear decoding.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::linalg::log_sum_exp;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricConfig {
    /// KDE kernel standard deviation for the state-space divergence.
    pub kde_sigma: f64,
    /// Monte Carlo sample count for the state-space divergence.
    pub mc_samples: usize,
    /// Gaussian smoothing width (in frequency bins) for spectral distances.
    pub spectral_smooth_sigma: f64,
    /// Hann window length for trace smoothing.
    pub hann_window: usize,
    /// Seed for the Monte Carlo draws.
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            kde_sigma: 1.0,
            mc_samples: 1000,
            spectral_smooth_sigma: 20.0,
            hann_window: 15,
            seed: 0,
        }
    }
}

/// Monte Carlo KL divergence between Gaussian KDEs of two state clouds:
/// samples are drawn from the truth rows (without replacement when enough
/// rows exist) and scored under both kernel densities.
pub fn d_stsp(truth: &DMatrix<f64>, gen: &DMatrix<f64>, cfg: &MetricConfig) -> Result<f64> {
    if truth.ncols() != gen.ncols() {
        return Err(Error::Shape("state clouds need matching channel counts".into()));
    }
    if truth.nrows() < 2 || gen.nrows() < 2 {
        return Err(Error::InvalidParam("need at least two states per cloud".into()));
    }
    // Cap the KDE support for very long recordings.
    let cap = 20_000;
    let truth_kde = subsample_rows(truth, cap, cfg.seed ^ 0x51);
    let gen_kde = subsample_rows(gen, cap, cfg.seed ^ 0x52);

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let n = cfg.mc_samples.min(truth_kde.nrows());
    let mut idx: Vec<usize> = (0..truth_kde.nrows()).collect();
    let samples: Vec<usize> = if truth_kde.nrows() >= cfg.mc_samples {
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx
    } else {
        (0..cfg.mc_samples).map(|_| rng.gen_range(0..truth_kde.nrows())).collect()
    };

    let mut acc = 0.0;
    for &s in &samples {
        let x = truth_kde.row(s).transpose();
        let lp = kde_log_density(&truth_kde, &x, cfg.kde_sigma);
        let lq = kde_log_density(&gen_kde, &x, cfg.kde_sigma);
        acc += lp - lq;
    }
    Ok(acc / samples.len() as f64)
}

fn subsample_rows(m: &DMatrix<f64>, cap: usize, seed: u64) -> DMatrix<f64> {
    if m.nrows() <= cap {
        return m.clone();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cap);
    idx.sort_unstable();
    let mut out = DMatrix::zeros(cap, m.ncols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from(&m.row(i));
    }
    out
}

fn kde_log_density(support: &DMatrix<f64>, x: &DVector<f64>, sigma: f64) -> f64 {
    let c = x.len() as f64;
    let t = support.nrows();
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut logs = Vec::with_capacity(t);
    for r in 0..t {
        let mut d2 = 0.0;
        for j in 0..x.len() {
            let d = x[j] - support[(r, j)];
            d2 += d * d;
        }
        logs.push(-d2 * inv2s2);
    }
    log_sum_exp(&logs) - (t as f64).ln() - 0.5 * c * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

/// Mean spectral Hellinger distance: per channel, FFT power spectrum,
/// Gaussian-smoothed, normalized to sum one, then (1/√2)‖√p−√q‖₂, averaged
/// over channels. Lies in [0, 1].
pub fn d_h(truth: &DMatrix<f64>, gen: &DMatrix<f64>, cfg: &MetricConfig) -> Result<f64> {
    if truth.ncols() != gen.ncols() {
        return Err(Error::Shape("spectral distance needs matching channels".into()));
    }
    if truth.nrows() < 64 || gen.nrows() < 64 {
        return Err(Error::InvalidParam("need T ≥ 64 for spectral distance".into()));
    }
    let c = truth.ncols();
    let mut acc = 0.0;
    for ch in 0..c {
        let p = normalized_smoothed_power(&column(truth, ch), cfg.spectral_smooth_sigma)?;
        let q = normalized_smoothed_power(&column(gen, ch), cfg.spectral_smooth_sigma)?;
        let m = p.len().min(q.len());
        let mut h2 = 0.0;
        for i in 0..m {
            let d = p[i].sqrt() - q[i].sqrt();
            h2 += d * d;
        }
        // Bins beyond the shorter spectrum contribute their full mass.
        for v in p.iter().skip(m) {
            h2 += v;
        }
        for v in q.iter().skip(m) {
            h2 += v;
        }
        acc += (h2 / 2.0).sqrt();
    }
    Ok(acc / c as f64)
}

fn column(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
    (0..m.nrows()).map(|r| m[(r, c)]).collect()
}

fn normalized_smoothed_power(x: &[f64], smooth_sigma: f64) -> Result<Vec<f64>> {
    let spec = periodogram(x);
    let smoothed = gaussian_smooth(&spec, smooth_sigma);
    let total: f64 = smoothed.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParam("zero-power channel".into()));
    }
    Ok(smoothed.iter().map(|v| v / total).collect())
}

/// One-sided periodogram |FFT|² at bins 0..T/2.
fn periodogram(x: &[f64]) -> Vec<f64> {
    let t = x.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(t);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    (0..=t / 2).map(|i| buf[i].norm_sqr() / t as f64).collect()
}

fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let half = (4.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, w) in weights.iter().enumerate() {
                let j = i + k as isize - half;
                if j >= 0 && j < n {
                    num += w * x[j as usize];
                    den += w;
                }
            }
            num / den
        })
        .collect()
}

/// Hann-window smoothing per channel with unit DC gain; edges renormalize
/// their partial windows.
pub fn hann_smooth(x: &DMatrix<f64>, window: usize) -> Result<DMatrix<f64>> {
    let t = x.nrows();
    if window == 0 || window > t {
        return Err(Error::InvalidParam(format!("window {window} vs length {t}")));
    }
    let w: Vec<f64> = (0..window)
        .map(|i| {
            if window == 1 {
                1.0
            } else {
                let arg = 2.0 * std::f64::consts::PI * i as f64 / (window as f64 - 1.0);
                0.5 * (1.0 - arg.cos())
            }
        })
        .collect();
    let half = window / 2;
    let mut out = DMatrix::zeros(t, x.ncols());
    for c in 0..x.ncols() {
        for i in 0..t {
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let j = i as isize + k as isize - half as isize;
                if j >= 0 && (j as usize) < t {
                    num += wk * x[(j as usize, c)];
                    den += wk;
                }
            }
            out[(i, c)] = if den > 0.0 { num / den } else { 0.0 };
        }
    }
    Ok(out)
}

/// Per-channel spike statistics from binned counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpikeStats {
    pub mean_rate_hz: f64,
    /// Mean inter-spike interval in seconds; absent below two spike bins.
    pub mean_isi_s: Option<f64>,
    /// Coefficient of variation of the ISI distribution.
    pub isi_cv: Option<f64>,
}

/// How bins holding several spikes enter the ISI distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiSpikeIsi {
    /// A bin with c ≥ 2 spikes contributes c−1 zero-length intervals.
    #[default]
    ZeroGap,
    /// Count occupied bins only.
    Ignore,
}

pub fn spike_stats(
    spikes: &DMatrix<f64>,
    bin_seconds: f64,
    multispike: MultiSpikeIsi,
) -> Result<Vec<ChannelSpikeStats>> {
    if spikes.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(Error::InvalidParam("spike counts must be nonnegative integers".into()));
    }
    let t = spikes.nrows();
    let total_time = t as f64 * bin_seconds;
    let mut out = Vec::with_capacity(spikes.ncols());
    for c in 0..spikes.ncols() {
        let total: f64 = (0..t).map(|r| spikes[(r, c)]).sum();
        let mean_rate_hz = total / total_time;
        let mut isis: Vec<f64> = Vec::new();
        let mut last_bin: Option<usize> = None;
        for r in 0..t {
            let count = spikes[(r, c)] as usize;
            if count == 0 {
                continue;
            }
            if let Some(prev) = last_bin {
                isis.push((r - prev) as f64 * bin_seconds);
            }
            if multispike == MultiSpikeIsi::ZeroGap {
                for _ in 1..count {
                    isis.push(0.0);
                }
            }
            last_bin = Some(r);
        }
        let (mean_isi_s, isi_cv) = if isis.is_empty() {
            (None, None)
        } else {
            let mean = isis.iter().sum::<f64>() / isis.len() as f64;
            let var =
                isis.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / isis.len() as f64;
            let cv = if mean > 0.0 { Some(var.sqrt() / mean) } else { None };
            (Some(mean), cv)
        };
        out.push(ChannelSpikeStats { mean_rate_hz, mean_isi_s, isi_cv });
    }
    Ok(out)
}

/// Pearson correlation matrix; zero-variance channels yield NaN entries.
pub fn pairwise_correlations(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.nrows();
    let c = x.ncols();
    let means: Vec<f64> = (0..c).map(|j| x.column(j).sum() / t as f64).collect();
    let sds: Vec<f64> = (0..c)
        .map(|j| {
            (x.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / t as f64).sqrt()
        })
        .collect();
    let mut out = DMatrix::zeros(c, c);
    for a in 0..c {
        for b in a..c {
            let cov = (0..t)
                .map(|r| (x[(r, a)] - means[a]) * (x[(r, b)] - means[b]))
                .sum::<f64>()
                / t as f64;
            let denom = sds[a] * sds[b];
            let val = if denom > 0.0 {
                cov / denom
            } else if a == b {
                f64::NAN
            } else {
                f64::NAN
            };
            out[(a, b)] = val;
            out[(b, a)] = val;
        }
    }
    for a in 0..c {
        if sds[a] > 0.0 {
            out[(a, a)] = 1.0;
        }
    }
    out
}

/// Segment-averaged autocorrelation: the signal is cut into windows of
/// length 2·max_lag, each is centered and correlated with itself, normalized
/// so lag 0 equals one, and the curves are averaged.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let seg_len = 2 * max_lag;
    if x.len() < seg_len {
        return Err(Error::InvalidParam(format!(
            "need T ≥ 2·max_lag = {seg_len}, got {}",
            x.len()
        )));
    }
    let n_segments = x.len() / seg_len;
    let mut acc = vec![0.0; max_lag + 1];
    let mut used = 0;
    for s in 0..n_segments {
        let seg = &x[s * seg_len..(s + 1) * seg_len];
        let mean = seg.iter().sum::<f64>() / seg_len as f64;
        let centered: Vec<f64> = seg.iter().map(|v| v - mean).collect();
        let denom: f64 = centered.iter().map(|v| v * v).sum();
        if denom <= 0.0 {
            continue;
        }
        for lag in 0..=max_lag {
            let num: f64 = (0..seg_len - lag).map(|i| centered[i] * centered[i + lag]).sum();
            acc[lag] += num / denom;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidParam("all segments have zero variance".into()));
    }
    for v in acc.iter_mut() {
        *v /= used as f64;
    }
    Ok(acc)
}

/// FFT periodogram with frequencies in the units implied by `fs`.
pub fn power_spectrum(x: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let spec = periodogram(x);
    let t = x.len() as f64;
    let freqs: Vec<f64> = (0..spec.len()).map(|i| i as f64 * fs / t).collect();
    (freqs, spec)
}

/// Frequency of the largest non-DC periodogram peak.
pub fn peak_frequency(x: &[f64], fs: f64) -> f64 {
    let (freqs, power) = power_spectrum(x, fs);
    let mut best = (0.0, 0.0);
    for i in 1..power.len() {
        if power[i] > best.1 {
            best = (freqs[i], power[i]);
        }
    }
    best.0
}

/// Welch magnitude-squared coherence on Hann-windowed segments with 50%
/// overlap. Values lie in [0, 1] per frequency bin.
pub fn coherence(x: &[f64], y: &[f64], fs: f64, nperseg: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::Shape("coherence needs equal-length signals".into()));
    }
    if nperseg > x.len() || nperseg < 4 {
        return Err(Error::InvalidParam(format!(
            "nperseg {nperseg} incompatible with T={}",
            x.len()
        )));
    }
    let step = nperseg / 2;
    let window: Vec<f64> = (0..nperseg)
        .map(|i| {
            let arg = 2.0 * std::f64::consts::PI * i as f64 / (nperseg as f64 - 1.0);
            0.5 * (1.0 - arg.cos())
        })
        .collect();
    let n_freq = nperseg / 2 + 1;
    let mut pxx = vec![0.0; n_freq];
    let mut pyy = vec![0.0; n_freq];
    let mut pxy = vec![Complex::new(0.0, 0.0); n_freq];
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nperseg);
    let mut segments = 0;
    let mut start = 0;
    while start + nperseg <= x.len() {
        let mut bx: Vec<Complex<f64>> = (0..nperseg)
            .map(|i| Complex::new(x[start + i] * window[i], 0.0))
            .collect();
        let mut by: Vec<Complex<f64>> = (0..nperseg)
            .map(|i| Complex::new(y[start + i] * window[i], 0.0))
            .collect();
        fft.process(&mut bx);
        fft.process(&mut by);
        for i in 0..n_freq {
            pxx[i] += bx[i].norm_sqr();
            pyy[i] += by[i].norm_sqr();
            pxy[i] += bx[i] * by[i].conj();
        }
        segments += 1;
        start += step;
    }
    if segments == 0 {
        return Err(Error::InvalidParam("no full segments".into()));
    }
    let freqs: Vec<f64> = (0..n_freq).map(|i| i as f64 * fs / nperseg as f64).collect();
    let coh: Vec<f64> = (0..n_freq)
        .map(|i| {
            let denom = pxx[i] * pyy[i];
            if denom > 0.0 {
                (pxy[i].norm_sqr() / denom).min(1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok((freqs, coh))
}

/// Ordinary least squares with intercept, scored as R² on a held-out split.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// (F+1)×G weights; the last row is the intercept.
    pub weights: DMatrix<f64>,
    pub r2: f64,
    /// The normal equations were rank deficient and a small ridge was used.
    pub ridge_fallback: bool,
}

pub fn linear_decode(
    train_features: &DMatrix<f64>,
    train_targets: &DMatrix<f64>,
    test_features: &DMatrix<f64>,
    test_targets: &DMatrix<f64>,
) -> Result<DecodeResult> {
    let t = train_features.nrows();
    let f = train_features.ncols();
    if t <= f {
        return Err(Error::InvalidParam(format!("need T > F, got T={t}, F={f}")));
    }
    if train_targets.nrows() != t {
        return Err(Error::Shape("target row count".into()));
    }
    let design = |x: &DMatrix<f64>| {
        let mut d = DMatrix::zeros(x.nrows(), f + 1);
        d.columns_mut(0, f).copy_from(x);
        d.column_mut(f).fill(1.0);
        d
    };
    let xd = design(train_features);
    let gram = xd.transpose() * &xd;
    let rhs = xd.transpose() * train_targets;
    let mut ridge_fallback = false;
    let weights = match nalgebra::Cholesky::new(gram.clone()) {
        Some(ch) => ch.solve(&rhs),
        None => {
            ridge_fallback = true;
            let mut g = gram;
            for i in 0..g.nrows() {
                g[(i, i)] += 1e-6;
            }
            nalgebra::Cholesky::new(g)
                .ok_or_else(|| Error::Singular("ridge-regularized normal equations".into()))?
                .solve(&rhs)
        }
    };

    let pred = design(test_features) * &weights;
    let resid = test_targets - &pred;
    let ss_res: f64 = resid.iter().map(|v| v * v).sum();
    let mut ss_tot = 0.0;
    for c in 0..test_targets.ncols() {
        let mean = test_targets.column(c).sum() / test_targets.nrows() as f64;
        ss_tot += test_targets.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    Ok(DecodeResult { weights, r2, ridge_fallback })
}
