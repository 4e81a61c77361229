//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of a coordinate is measured against the larger of the
//! two values being compared and the gradient's overall scale (the max-abs
//! analytic entry across all parameters). The global floor matters: central
//! differences cannot resolve a derivative below roughly |loss|·ulp/eps, so
//! a tensor whose true gradient sits near zero (e.g. attention score weights
//! under small-scale init, where the softmax is nearly uniform) reads as pure
//! cancellation noise. Measuring such coordinates against the gradient's own
//! magnitude reports what the probe can actually distinguish, while a wrong
//! formula still produces discrepancies on the order of the global scale and
//! is flagged. This is tighter than the common ‖av−fd‖∞ / max(‖av‖∞, ‖fd‖∞)
//! aggregate, which divides every coordinate's discrepancy by the same norm.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::graph::{Graph, NnError, NodeId};
use super::tensor::Tensor;

pub type BuildFn<'a> =
    dyn Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId, NnError> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences, perturbing every coordinate of every parameter.
///
/// Parameters are registered under their map keys, so a builder that looks
/// nodes up with `param_named` (rather than the `ids` argument) still binds
/// to the perturbed tensors.
pub fn check_gradients(
    params: &BTreeMap<String, Arc<Tensor<f64>>>,
    eps: f64,
    build: &BuildFn,
) -> Result<GradCheckReport, NnError> {
    // Analytic pass.
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.param_named(name, t.clone()));
    }
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let mut analytic: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for (name, id) in &ids {
        let grad = g
            .take_grad(*id)
            .unwrap_or_else(|| Tensor::zeros(params[name].shape()));
        analytic.insert(name.clone(), grad);
    }
    drop(g);

    let eval = |perturbed: &BTreeMap<String, Arc<Tensor<f64>>>| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, t) in perturbed {
            ids.insert(name.clone(), g.param_named(name, t.clone()));
        }
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let scale = analytic
        .values()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    let mut work: BTreeMap<String, Arc<Tensor<f64>>> = params.clone();
    for (name, base) in params {
        let a = &analytic[name];
        for i in 0..base.numel() {
            let orig = base.data()[i];
            let mut fd_at = |x: f64| -> Result<f64, NnError> {
                let mut t = (**base).clone();
                t.data_mut()[i] = x;
                work.insert(name.clone(), Arc::new(t));
                eval(&work)
            };
            let plus = fd_at(orig + eps)?;
            let minus = fd_at(orig - eps)?;
            let fd = (plus - minus) / (2.0 * eps);
            let av = a.data()[i];
            let rel = (av - fd).abs() / av.abs().max(fd.abs()).max(scale);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.coords_checked += 1;
        }
        work.insert(name.clone(), base.clone());
    }
    Ok(report)
}
