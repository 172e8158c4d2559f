use crate::numcore::{Real, Tensor};

/// Linear ramp from 0 to `lambda` over `warmup_steps`, constant afterwards.
pub fn lambda_schedule(step: u64, lambda: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        lambda
    } else {
        lambda * step as f64 / warmup_steps as f64
    }
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`; `step` counts from 1.
pub fn lr_schedule(step: u64, d: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    (d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Adam with bias correction. Parameters that received no gradient in a
/// step are left untouched, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Per-parameter update count (bias correction is per parameter).
    pub t: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: vec![0; shapes.len()],
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Vec<T>>], lr: f64) {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = T::lit(1.0 / (1.0 - self.beta1.powi(t)));
            let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)));
            let lr = T::lit(lr);
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mhat = m[j] * c1;
                let vhat = v[j] * c2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
