use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{DotError, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Restrict the check to these parameters (all when `None`).
    pub params: Option<Vec<ParamId>>,
    /// Check at most this many evenly strided coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            params: None,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients with central differences.
///
/// `build` constructs the loss graph for the current parameter values. The
/// relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(store: &mut ParamStore<f64>, opts: &GradCheckOptions, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    if opts.eps <= 0.0 {
        return Err(DotError::Contract("gradient_check needs eps > 0".into()));
    }
    let analytic = {
        let (graph, loss) = build(store)?;
        finite(graph.scalar(loss))?;
        graph.backward(loss)?.into_params()
    };

    let ids: Vec<ParamId> = opts.params.clone().unwrap_or_else(|| store.ids().collect());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let (graph, loss) = build(store)?;
        finite(graph.scalar(loss))
    };

    for id in ids {
        let numel = store.get(id).numel();
        let stride = match opts.max_coords_per_param {
            Some(cap) if cap > 0 && numel > cap => numel.div_ceil(cap),
            _ => 1,
        };
        for i in (0..numel).step_by(stride) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(&id).map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DotError::GradCheck(format!("loss is not finite ({v})")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Degenerate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.insert("x", vec![4, 1], random(&mut rng, 4), true).unwrap();
        let a = random(&mut rng, 16);
        let report = gradient_check(&mut store, &GradCheckOptions::default(), |s| {
            let mut g = Graph::new();
            let xv = g.param(s, x);
            let am = g.constant(vec![4, 4], a.clone())?;
            let ax = g.matmul(am, xv)?;
            let prod = g.mul(ax, xv)?;
            let loss = g.sum(prod);
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn two_layer_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w1 = store.insert("w1", vec![3, 5], random(&mut rng, 15), true).unwrap();
        let b1 = store.insert("b1", vec![5], random(&mut rng, 5), false).unwrap();
        let w2 = store.insert("w2", vec![5, 4], random(&mut rng, 20), true).unwrap();
        let gain = store.insert("gain", vec![4], vec![1.2, 0.8, 1.0, 0.9], false).unwrap();
        let beta = store.insert("beta", vec![4], vec![0.1, -0.1, 0.0, 0.2], false).unwrap();
        let targets: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = random(&mut rng, 12);
        let report = gradient_check(&mut store, &GradCheckOptions::default(), |s| {
            let mut g = Graph::new();
            let xv = g.constant(vec![4, 3], x.clone())?;
            let (w1, b1, w2) = (g.param(s, w1), g.param(s, b1), g.param(s, w2));
            let h = g.matmul(xv, w1)?;
            let h = g.add_row_bcast(h, b1)?;
            let h = g.gelu(h);
            let h = g.tanh(h);
            let o = g.matmul(h, w2)?;
            let (gain, beta) = (g.param(s, gain), g.param(s, beta));
            let o = g.layer_norm(o, gain, beta, 1e-5)?;
            let p = g.softmax_rows(o, Degenerate::Error)?;
            let flat = g.reshape(p, vec![16])?;
            let loss = g.bce_with_logits(flat, &targets)?;
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn non_finite_loss_fails_the_check() {
        let mut store = ParamStore::new();
        let x = store.insert("x", vec![1], vec![1.0], true).unwrap();
        let err = gradient_check(&mut store, &GradCheckOptions::default(), |s| {
            let mut g = Graph::new();
            let xv = g.param(s, x);
            let loss = g.scale(xv, f64::INFINITY);
            Ok((g, loss))
        })
        .unwrap_err();
        assert!(matches!(err, DotError::GradCheck(_)));
    }
}
