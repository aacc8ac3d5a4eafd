use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::Params;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all checked entries.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of a scalar loss against central
/// differences, at `f64`.
///
/// `loss` must build the same deterministic computation each time it is
/// called. With `max_entries` set, at most that many evenly spaced entries of
/// each tensor are perturbed; every tensor is still visited.
pub fn grad_check<F>(params: &Params<f64>, eps: f64, max_entries: Option<usize>, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Params<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    check_finite(g.value(out).data()[0], "loss")?;
    g.backward(out)?;
    let analytic = g.param_grads();

    let eval = |p: &Params<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, p)?;
        Ok(g.value(v).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let stride = match max_entries {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = tensor.data()[idx];
            probe.get_mut(name).expect("cloned").data_mut()[idx] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[idx] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic.get(name).map_or(0.0, |t| t.data()[idx]);
            check_finite(numeric, name)?;
            check_finite(exact, name)?;
            let rel = (exact - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}

fn check_finite(x: f64, name: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { name: name.to_string() })
    }
}
