use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Checks every entry of `params` against `(f(θ+h) - f(θ-h)) / 2h`.
///
/// `f` builds a scalar from the bound parameters; relative error is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn grad_check<F>(params: &[Matrix], f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_terms(params, |t, v| Ok(vec![f(t, v)?]), step, tol)
}

/// [`grad_check`] for a function given as a sum of scalar terms.
///
/// The finite difference is taken term by term and then summed, so a small
/// term is not drowned by rounding in the larger ones.
pub fn grad_check_terms<F>(params: &[Matrix], f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Vec<Var<'t>>>,
{
    let analytic: Vec<Matrix> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let terms = f(&tape, &vars)?;
        let mut total = tape.scalar(0.0);
        for t in terms {
            if t.shape() != (1, 1) {
                return Err(Error::contract(format!(
                    "grad_check needs a scalar function, got {:?}",
                    t.shape()
                )));
            }
            total = total.add(t)?;
        }
        let grads = tape.backward(total)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |params: &[Matrix]| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.iter().map(|t| t.item()).collect())
    };

    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
        tol,
    };
    for (p, g_ad) in analytic.iter().enumerate() {
        for k in 0..g_ad.len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;

            let fd: f64 = plus
                .iter()
                .zip(&minus)
                .map(|(a, b)| (a - b) / (2.0 * step))
                .sum();
            let ad = g_ad.data()[k];
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            let rel = (ad - fd).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((p, k));
            }
        }
    }
    Ok(report)
}
