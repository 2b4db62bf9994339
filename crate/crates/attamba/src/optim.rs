//! Adam with a warmup-then-cosine learning-rate schedule and global-norm
//! gradient clipping.

use attamba_core::model::ModelParams;
use attamba_core::numerics::Tensor;

/// Learning rate after `step` completed updates (0-based): linear warmup to
/// `peak` over `warmup` steps, then cosine decay to `peak · floor` at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let min = peak * floor;
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &ModelParams<Tensor<f32>>) -> f64 {
    let mut sum = 0.0f64;
    for (_, g) in grads.named() {
        sum += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    sum.sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.for_each_mut(|_, g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Adam without weight decay; moments are kept in [`ModelParams::named`] order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams<Tensor<f32>>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { beta1, beta2, eps, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams<Tensor<f32>>, grads: &ModelParams<Tensor<f32>>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = (1.0 - self.beta2.powi(self.t)) as f32;
        let step = (lr / c1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let grads = grads.named();
        let mut i = 0;
        params.for_each_mut(|_, p| {
            let (g, m, v) = (grads[i].1.data(), &mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                *w -= step * m[k] / ((v[k] / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use attamba_core::model::{init_params, ModelConfig};

    #[test]
    fn schedule_warms_up_then_decays_to_floor() {
        let lr = |s| lr_at(s, 1000, 100, 3e-3, 0.1);
        assert!((lr(0) - 3e-5).abs() < 1e-15);
        assert!((lr(99) - 3e-3).abs() < 1e-15);
        assert!((lr(100) - 3e-3).abs() < 1e-15);
        assert!((lr(550) - 0.5 * (3e-3 + 3e-4)).abs() < 1e-12);
        assert!((lr(1000) - 3e-4).abs() < 1e-15);
        assert!((1..1000).all(|s| s < 100 || lr(s) <= lr(s - 1)));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let cfg = ModelConfig { dim: 8, layers: 1, vocab: 11, ..Default::default() };
        let mut g = init_params::<f32>(&cfg, 3).unwrap();
        g.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|x| *x *= 1000.0));
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-5);
        let again = clip_global_norm(&mut g, 10.0);
        assert!((again - global_norm(&g)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_the_gradient_sign() {
        let cfg = ModelConfig { dim: 8, layers: 1, vocab: 11, ..Default::default() };
        let mut p = init_params::<f32>(&cfg, 1).unwrap();
        let before = p.clone();
        let g = p.map(|_, t| Tensor::from_fn(t.shape(), |k| if k % 2 == 0 { 0.5 } else { -2.0 }));
        let mut adam = Adam::new(&p, 0.9, 0.95, 1e-8);
        adam.step(&mut p, &g, 1e-2);
        for ((_, a), (_, b)) in before.named().iter().zip(p.named()) {
            for (k, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                let expect = if k % 2 == 0 { -1e-2 } else { 1e-2 };
                assert!((y - x - expect).abs() < 1e-6);
            }
        }
    }
}
