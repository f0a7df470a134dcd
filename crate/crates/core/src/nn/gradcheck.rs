//! Central finite-difference oracle used to validate analytic gradients.

use crate::error::Result;
use crate::nn::{ParamId, ParamSet};

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

/// Perturbs every scalar of every parameter and compares the central difference of
/// `loss` against `analytic` (indexed like `params`).
pub fn check_params(
    params: &mut ParamSet<f64>,
    analytic: &[Vec<f64>],
    h: f64,
    mut loss: impl FnMut(&ParamSet<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate().take(params.len()) {
        let id = ParamId(pi);
        for (i, &g) in grad.iter().enumerate() {
            let orig = params.get(id).tensor.data()[i];
            params.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = loss(params)?;
            params.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = loss(params)?;
            params.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(g, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{}[{i}] analytic={g} numeric={numeric}",
                    params.get(id).name
                );
            }
        }
    }
    Ok(report)
}
