//! Rectified-Adam updates and the learning-rate schedule.

use nalgebra::DMatrix;

use crate::training::graph::Blocks;

/// Rectified Adam: plain momentum-SGD while the variance estimate warms up,
/// the rectified adaptive step afterwards.
#[derive(Debug, Clone)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<(String, DMatrix<f64>)>,
    v: Vec<(String, DMatrix<f64>)>,
}

impl Default for RAdam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl RAdam {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> (u64, &[(String, DMatrix<f64>)], &[(String, DMatrix<f64>)]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(step: u64, m: Blocks, v: Blocks, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step, m, v }
    }

    /// Descent update: params ← params − Δ(grads). Callers maximizing an
    /// objective pass the negated gradient.
    pub fn step(&mut self, params: &mut Blocks, grads: &Blocks, lr: f64) {
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|(n, g)| (n.clone(), DMatrix::zeros(g.nrows(), g.ncols())))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let bias1 = 1.0 - b1.powf(t);
        let rectified = rho_t > 4.0;
        let r_t = if rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        } else {
            0.0
        };

        for (i, (name, g)) in grads.iter().enumerate() {
            debug_assert_eq!(&self.m[i].0, name);
            let m = &mut self.m[i].1;
            let v = &mut self.v[i].1;
            *m = &*m * b1 + g * (1.0 - b1);
            *v = &*v * b2 + g.component_mul(g) * (1.0 - b2);
            let p = &mut params[i].1;
            if rectified {
                let bias2 = 1.0 - b2t;
                for idx in 0..p.len() {
                    let m_hat = m[idx] / bias1;
                    let v_hat = (v[idx] / bias2).sqrt();
                    p[idx] -= lr * r_t * m_hat / (v_hat + self.eps);
                }
            } else {
                for idx in 0..p.len() {
                    p[idx] -= lr * m[idx] / bias1;
                }
            }
        }
    }
}

/// Geometric interpolation lr(e) = lr_start·(lr_end/lr_start)^(e/(E−1)).
pub fn lr_schedule(epoch: usize, epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    if epochs <= 1 {
        return lr_start;
    }
    let frac = epoch as f64 / (epochs as f64 - 1.0);
    lr_start * (lr_end / lr_start).powf(frac)
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Blocks, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn blocks_from(v: &[f64]) -> Blocks {
        vec![("p".into(), DMatrix::from_row_slice(1, v.len(), v))]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = blocks_from(&[1.0, -2.0]);
        let grads = blocks_from(&[0.0, 0.0]);
        let mut opt = RAdam::default();
        for _ in 0..10 {
            opt.step(&mut params, &grads, 1e-2);
        }
        assert_eq!(params[0].1[(0, 0)], 1.0);
        assert_eq!(params[0].1[(0, 1)], -2.0);
    }

    #[test]
    fn warmup_matches_momentum_sgd_reference() {
        // For small t, ρ_t ≤ 4 and the update must equal lr·m̂ computed from
        // the reference recursion.
        let mut params = blocks_from(&[0.5]);
        let mut opt = RAdam::default();
        let lr = 1e-2;
        let gs = [0.3, -0.1, 0.25, 0.4];
        let mut m_ref = 0.0;
        let mut x_ref = 0.5;
        for (t, g) in gs.iter().enumerate() {
            let grads = blocks_from(&[*g]);
            opt.step(&mut params, &grads, lr);
            m_ref = 0.9 * m_ref + 0.1 * g;
            let t1 = t as f64 + 1.0;
            // ρ_t stays below 4 for these first steps.
            let b2t = 0.999f64.powf(t1);
            let rho_t = (2.0 / (1.0 - 0.999) - 1.0) - 2.0 * t1 * b2t / (1.0 - b2t);
            assert!(rho_t <= 4.0, "expected warmup at t={t1}");
            x_ref -= lr * m_ref / (1.0 - 0.9f64.powf(t1));
            assert_relative_eq!(params[0].1[(0, 0)], x_ref, epsilon = 1e-14);
        }
    }

    #[test]
    fn rectified_step_matches_reference_formula() {
        let mut params = blocks_from(&[1.0]);
        let mut opt = RAdam::default();
        let lr = 1e-3;
        // Drive enough steps that ρ_t > 4, tracking the reference.
        let (mut m_ref, mut v_ref, mut x_ref) = (0.0f64, 0.0f64, 1.0f64);
        let rho_inf = 2.0 / (1.0 - 0.999) - 1.0;
        for t in 1..=10 {
            let g = 0.1 + 0.01 * t as f64;
            let grads = blocks_from(&[g]);
            opt.step(&mut params, &grads, lr);
            m_ref = 0.9 * m_ref + 0.1 * g;
            v_ref = 0.999 * v_ref + 0.001 * g * g;
            let tf = t as f64;
            let b2t = 0.999f64.powf(tf);
            let rho_t = rho_inf - 2.0 * tf * b2t / (1.0 - b2t);
            let m_hat = m_ref / (1.0 - 0.9f64.powf(tf));
            if rho_t > 4.0 {
                let r_t = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt();
                let v_hat = (v_ref / (1.0 - b2t)).sqrt();
                x_ref -= lr * r_t * m_hat / (v_hat + 1e-8);
            } else {
                x_ref -= lr * m_hat;
            }
            assert_relative_eq!(params[0].1[(0, 0)], x_ref, epsilon = 1e-13);
        }
        assert!(opt.step_count() == 10);
    }

    #[test]
    fn quadratic_descent_monotone_after_warmup() {
        // f(x) = Σ x², gradient 2x.
        let mut params = blocks_from(&[3.0, -2.0, 1.5]);
        let mut opt = RAdam::default();
        let loss = |b: &Blocks| b[0].1.iter().map(|v| v * v).sum::<f64>();
        let mut prev = loss(&params);
        let mut after_warmup = Vec::new();
        for t in 0..200 {
            let grads: Blocks =
                vec![("p".into(), params[0].1.map(|v| 2.0 * v))];
            opt.step(&mut params, &grads, 1e-3);
            let cur = loss(&params);
            if t >= 5 {
                after_warmup.push(prev - cur);
            }
            prev = cur;
        }
        assert!(after_warmup.iter().all(|d| *d >= -1e-12), "loss increased after warmup");
        assert!(prev < loss(&blocks_from(&[3.0, -2.0, 1.5])));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_relative_eq!(lr_schedule(0, 4, 1e-3, 1e-6), 1e-3);
        assert_relative_eq!(lr_schedule(3, 4, 1e-3, 1e-6), 1e-6, max_relative = 1e-12);
        assert_relative_eq!(lr_schedule(1, 4, 1e-3, 1e-6), 1e-4, max_relative = 1e-12);
        assert_relative_eq!(lr_schedule(0, 1, 5e-4, 1e-6), 5e-4);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = blocks_from(&[3.0, 4.0]);
        let norm = clip_global_norm(&mut grads, 100.0);
        assert_relative_eq!(norm, 5.0);
        assert_eq!(grads[0].1[(0, 0)], 3.0);
        let norm2 = clip_global_norm(&mut grads, 1.0);
        assert_relative_eq!(norm2, 5.0);
        let new_norm: f64 = grads[0].1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(new_norm, 1.0, epsilon = 1e-12);
    }
}
