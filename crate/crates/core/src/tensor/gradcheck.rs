use super::{Graph, Tensor, Var};
use crate::error::Result;

// Relative errors are taken against max(|analytic|, |numeric|, FLOOR) so
// that gradients which are zero up to rounding do not blow up the ratio.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_element: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from the bound parameter vars. Every element of every
/// parameter is perturbed by `±h`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck { index: pi, max_rel_err: 0.0, max_abs_err: 0.0, worst_element: 0 };
        for (e, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > check.max_rel_err || !rel.is_finite() {
                check.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                check.worst_element = e;
            }
            check.max_abs_err = check.max_abs_err.max(abs);
        }
        checks.push(check);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { params: checks, max_rel_err, tol, passed: max_rel_err <= tol })
}
