use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Adam with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: BTreeMap<ParamId, Vec<T>>,
    second: BTreeMap<ParamId, Vec<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Vec<T>>, lr: f64) {
        self.step_scaled(store, grads, 1.0, lr);
    }

    /// Like `step` with every gradient multiplied by `scale` first.
    pub fn step_scaled(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Vec<T>>, scale: f64, lr: f64) {
        self.steps += 1;
        let c = &self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (a1, a2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        // lr * (m / bc1) / (sqrt(v / bc2) + eps), constants hoisted
        let step_size = T::c(lr / bc1);
        let inv_root_bc2 = T::c(1.0 / bc2.sqrt());
        let (eps, s) = (T::c(c.eps), T::c(scale));
        for (&id, g) in grads {
            let param = store.get_mut(id);
            let decay = if param.decay { T::c(lr * c.weight_decay) } else { T::zero() };
            let w = param.data_mut();
            let m = self.first.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.second.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                let g = g * s;
                *m = b1 * *m + a1 * g;
                *v = b2 * *v + a2 * g * g;
                *w -= step_size * *m / (v.sqrt() * inv_root_bc2 + eps) + decay * *w;
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        LinearSchedule {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * (step + 1) as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let span = (self.total_steps - self.warmup_steps).max(1) as f64;
            self.peak * (self.total_steps - step) as f64 / span
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_on_square_matches_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", vec![1], vec![1.0], true).unwrap();
        let config = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(config);
        let lr = 0.1;
        // f(w) = w², grad 2w = 2
        let grads = BTreeMap::from([(id, vec![2.0])]);
        opt.step(&mut store, &grads, lr);
        // m̂ = 2, v̂ = 4 → update 2 / (2 + eps); decoupled decay wd·w
        let expected = 1.0 - lr * (2.0 / (2.0 + config.eps) + config.weight_decay);
        let w = store.get(id).data()[0];
        assert!((w - expected).abs() < 1e-14);
        assert!(w.abs() < 1.0);
    }

    #[test]
    fn no_decay_for_excluded_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("b", vec![1], vec![1.0], false).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &BTreeMap::from([(id, vec![0.0])]), 0.1);
        assert_eq!(store.get(id).data()[0], 1.0);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = LinearSchedule::new(1.0, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!(s.lr(50) < s.lr(20));
        assert_eq!(s.lr(100), 0.0);
        let no_warmup = LinearSchedule::new(2.0, 0.0, 4);
        assert_eq!(no_warmup.lr(0), 2.0);
    }
}
