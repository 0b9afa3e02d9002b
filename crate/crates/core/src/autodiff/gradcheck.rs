use super::optim::{Bound, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter, flat index, tape gradient, finite difference)` at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub entries: usize,
}

/// Central-difference check of every trainable entry of `store`. The
/// relative error denominator is `max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, store: &ParameterStore, eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let root = f(&tape, &bound)?;
        let grads = tape.backward(root)?;
        bound.gradients(&grads)
    };
    let eval = |s: &ParameterStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind(&tape);
        Ok(f(&tape, &bound)?.item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let mut probe = store.clone();
    for (name, grad) in &analytic {
        let base = store.get(name)?.clone();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += eps;
            probe.set(name, plus)?;
            let fp = eval(&probe)?;
            let mut minus = base.clone();
            minus.data_mut()[k] -= eps;
            probe.set(name, minus)?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
        probe.set(name, base)?;
    }
    Ok(report)
}
