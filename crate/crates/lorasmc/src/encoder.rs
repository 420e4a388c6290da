//! Causal 1-D convolutional encoder producing per-step diagonal Gaussian
//! encodings e(z_t | y_{t−t′:t}) for the product proposal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::{Error, Result};

/// How the left context before t=0 is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zero,
    Circular,
    Reflect,
}

/// Layer sizes of the causal CNN: a GeLU-activated trunk followed by two
/// affine output convolutions (mean and log-variance) sharing the last
/// kernel size.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CausalConvSpec {
    /// (kernel_size, in_channels, out_channels) per layer; the final entry
    /// describes both output heads, whose out_channels must equal the rank.
    pub layers: Vec<(usize, usize, usize)>,
    pub pad: PadMode,
}

impl CausalConvSpec {
    /// Standard three-stage spec: kernels/channels as (k1,c1), (k2,c2) trunk
    /// and a kernel-`k3` head with `rank` outputs.
    pub fn new(layers: Vec<(usize, usize, usize)>, pad: PadMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParam("encoder needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].2 != w[1].1 {
                return Err(Error::Shape(format!(
                    "channel mismatch between layers: {} out vs {} in",
                    w[0].2, w[1].1
                )));
            }
        }
        if layers.iter().any(|(k, ci, co)| *k == 0 || *ci == 0 || *co == 0) {
            return Err(Error::InvalidParam("zero-sized encoder layer".into()));
        }
        Ok(Self { layers, pad })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].1
    }

    pub fn rank(&self) -> usize {
        self.layers.last().unwrap().2
    }

    /// Receptive field t′+1 = 1 + Σ_l (kernel_l − 1).
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|(k, _, _)| k - 1).sum::<usize>()
    }
}

/// One convolution's parameters; weight is laid out C_out × (C_in·k) with
/// the kernel index fastest (column c·k + j holds tap j of input channel c).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub kernel: usize,
}

/// Full weight set: GeLU trunk plus separate mean / log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub trunk: Vec<ConvLayer>,
    pub mean_head: ConvLayer,
    pub logvar_head: ConvLayer,
    pub spec: CausalConvSpec,
}

/// Tanh approximation of GeLU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Index of the padded sample for a (possibly negative) time coordinate.
/// Returns None for zero padding outside the signal.
pub fn pad_index_pub(t: isize, t_len: usize, pad: PadMode) -> Option<usize> {
    if t >= 0 {
        return Some(t as usize);
    }
    match pad {
        PadMode::Zero => None,
        PadMode::Circular => {
            let m = t_len as isize;
            Some((((t % m) + m) % m) as usize)
        }
        PadMode::Reflect => {
            // Mirror excluding the edge sample: index −1 maps to 1.
            let r = (-t) as usize;
            Some(r.min(t_len - 1))
        }
    }
}

/// Causal convolution of `input` (T×C_in) with left padding of k−1 samples.
pub fn causal_conv(input: &DMatrix<f64>, layer: &ConvLayer, pad: PadMode) -> DMatrix<f64> {
    let t_len = input.nrows();
    let c_in = input.ncols();
    let c_out = layer.bias.len();
    let k = layer.kernel;
    let mut out = DMatrix::zeros(t_len, c_out);
    for t in 0..t_len {
        for co in 0..c_out {
            let mut acc = layer.bias[co];
            for j in 0..k {
                // Tap j looks back k−1−j samples.
                let src = t as isize - (k - 1 - j) as isize;
                if let Some(ts) = pad_index_pub(src, t_len, pad) {
                    for ci in 0..c_in {
                        acc += layer.weight[(co, ci * k + j)] * input[(ts, ci)];
                    }
                }
            }
            out[(t, co)] = acc;
        }
    }
    out
}

/// Forward pass: per-step diagonal Gaussian parameters (means, log-variances),
/// each T×R. Variance is exp(logvar).
pub fn encode(weights: &EncoderWeights, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if y.ncols() != weights.spec.in_channels() {
        return Err(Error::Shape(format!(
            "encoder expects {} channels, got {}",
            weights.spec.in_channels(),
            y.ncols()
        )));
    }
    let mut h = y.clone();
    for layer in &weights.trunk {
        h = causal_conv(&h, layer, weights.spec.pad);
        h.apply(|v| *v = gelu(*v));
    }
    let means = causal_conv(&h, &weights.mean_head, weights.spec.pad);
    let logvars = causal_conv(&h, &weights.logvar_head, weights.spec.pad);
    Ok((means, logvars))
}

/// Per-step variances from the log-variance head output.
pub fn variances(logvars: &DMatrix<f64>) -> DMatrix<f64> {
    logvars.map(f64::exp)
}

/// Fan-in uniform initialization (±1/√fan_in for weights and biases), with
/// the log-variance head bias shifted by log(0.01) so the encoder's initial
/// variance matches the initial transition noise.
pub fn init_encoder<R: Rng + ?Sized>(spec: &CausalConvSpec, rng: &mut R) -> Result<EncoderWeights> {
    let n_layers = spec.layers.len();
    let mut trunk = Vec::with_capacity(n_layers.saturating_sub(1));
    for &(k, c_in, c_out) in &spec.layers[..n_layers - 1] {
        trunk.push(init_layer(k, c_in, c_out, 0.0, rng));
    }
    let (k, c_in, c_out) = spec.layers[n_layers - 1];
    let mean_head = init_layer(k, c_in, c_out, 0.0, rng);
    let logvar_head = init_layer(k, c_in, c_out, 0.01f64.ln(), rng);
    Ok(EncoderWeights { trunk, mean_head, logvar_head, spec: spec.clone() })
}

fn init_layer<R: Rng + ?Sized>(
    k: usize,
    c_in: usize,
    c_out: usize,
    bias_offset: f64,
    rng: &mut R,
) -> ConvLayer {
    let bound = 1.0 / ((c_in * k) as f64).sqrt();
    let weight = DMatrix::from_fn(c_out, c_in * k, |_, _| rng.gen_range(-bound..bound));
    let bias = DVector::from_fn(c_out, |_, _| rng.gen_range(-bound..bound) + bias_offset);
    ConvLayer { weight, bias, kernel: k }
}
