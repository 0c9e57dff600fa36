use std::collections::BTreeMap;

use dot_core::tensor::{AdamW, AdamWConfig, ParamStore};
use proptest::prelude::*;

// Textbook AdamW, one scalar at a time.
fn reference(w0: f64, grads: &[f64], scale: f64, lr: f64, decay: bool, c: AdamWConfig) -> f64 {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let g = g * scale;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let m_hat = m / (1.0 - c.beta1.powi(t as i32 + 1));
        let v_hat = v / (1.0 - c.beta2.powi(t as i32 + 1));
        let wd = if decay { c.weight_decay * w } else { 0.0 };
        w -= lr * (m_hat / (v_hat.sqrt() + c.eps) + wd);
    }
    w
}

proptest! {
    #[test]
    fn matches_reference(
        w0 in -2.0f64..2.0,
        grads in prop::collection::vec(-3.0f64..3.0, 1..12),
        scale in 0.05f64..2.0,
        lr in 1e-5f64..1e-2,
        decay: bool,
    ) {
        let c = AdamWConfig::default();
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", vec![1], vec![w0], decay).unwrap();
        let mut adam = AdamW::new(c);
        for &g in &grads {
            adam.step_scaled(&mut store, &BTreeMap::from([(id, vec![g])]), scale, lr);
        }
        let want = reference(w0, &grads, scale, lr, decay, c);
        let got = store.get(id).data()[0];
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn untouched_without_gradient() {
    let mut store = ParamStore::<f32>::new();
    let a = store.insert("a", vec![2], vec![1.0, 2.0], true).unwrap();
    let b = store.insert("b", vec![1], vec![3.0], true).unwrap();
    let mut adam = AdamW::new(AdamWConfig::default());
    adam.step(&mut store, &BTreeMap::from([(a, vec![0.5, -0.5])]), 1e-3);
    assert_eq!(store.get(b).data(), &[3.0]);
    assert!(store.get(a).data()[0] < 1.0 && store.get(a).data()[1] > 2.0);
}
