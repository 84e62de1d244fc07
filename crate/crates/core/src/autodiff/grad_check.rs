use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat entry) of the worst entry
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) derivative at `worst`
    pub worst_values: Option<(f64, f64)>,
    pub pass: bool,
}

/// Below this magnitude a central difference with a 1e-5 step is dominated by
/// roundoff (about 1e-11 absolute), so errors are measured against the floor instead.
const ABS_FLOOR: f64 = 1e-6;

fn forward<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    if g.value(root).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    Ok(g.value(root).item())
}

/// Compares the reverse-mode gradient of `f` with central differences of step
/// `step`, entry by entry over every parameter tensor.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let base = g.value(root).item();
    if forward(&f, params)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "function is not deterministic: two forward passes disagree".into(),
        ));
    }
    g.backward(root)?;

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut worst_values = None;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var);
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            probe[pi].data_mut()[e] = orig + step;
            let up = forward(&f, &probe)?;
            probe[pi].data_mut()[e] = orig - step;
            let down = forward(&f, &probe)?;
            probe[pi].data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((pi, e));
                worst_values = Some((a, numeric));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        worst_values,
        pass: max_rel_err < tol,
    })
}
