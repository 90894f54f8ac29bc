//! AdamW and cosine schedules.

use std::f64::consts::PI;

use crate::autograd::ParamSet;
use crate::tensor::Matrix;

/// Cosine interpolation from `start` (step 0) to `end` (step `total`).
pub fn cosine_schedule(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    let p = (step.min(total) as f64) / total as f64;
    end + (start - end) * 0.5 * (1.0 + (PI * p).cos())
}

/// Decoupled-weight-decay Adam over a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-array decay flags, parallel to the parameter order.
    decay: Vec<bool>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

/// Biases, normalization gains, the class token and positional embeddings
/// are not decayed.
pub fn default_decay_mask(params: &ParamSet) -> Vec<bool> {
    params
        .iter()
        .map(|(name, _)| {
            !(name.ends_with(".bias")
                || name.contains("norm")
                || name == "cls_token"
                || name == "pos_embed")
        })
        .collect()
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay: default_decay_mask(params),
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`; `grads` follows parameter order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_schedule(0.996, 1.0, 0, 10), 0.996);
        assert!((cosine_schedule(0.996, 1.0, 10, 10) - 1.0).abs() < 1e-15);
        assert!((cosine_schedule(1.0, 0.0, 5, 10) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = ParamSet::new();
        p.insert("w.weight", Matrix::from_vec(1, 2, vec![1.0, -2.0]));
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.04);
        opt.step(&mut p, &[Matrix::from_vec(1, 2, vec![3.0, 4.0])], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("b.bias", Matrix::from_vec(1, 2, vec![0.0, 0.0]));
        let mut opt = AdamW::new(&p, 0.5);
        opt.step(&mut p, &[Matrix::from_vec(1, 2, vec![2.0, -0.1])], 0.01);
        let w = p.get("b.bias").unwrap();
        assert!((w[(0, 0)] + 0.01).abs() < 1e-9);
        assert!((w[(0, 1)] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x.weight", Matrix::from_vec(1, 1, vec![5.0]));
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..2000 {
            let x = p.get("x.weight").unwrap()[(0, 0)];
            opt.step(&mut p, &[Matrix::from_vec(1, 1, vec![2.0 * (x - 1.0)])], 0.01);
        }
        assert!((p.get("x.weight").unwrap()[(0, 0)] - 1.0).abs() < 1e-3);
    }
}
