use crate::error::Result;
use crate::numerics::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Largest `|analytic - numeric|` over all coordinates.
    pub max_abs_error: f64,
    /// Largest `|analytic|` over all coordinates.
    pub max_abs_grad: f64,
}

/// Compares the adjoints stored in `params` against central differences of
/// `loss_fn`, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// Parameters without a gradient slot are skipped.
pub fn finite_diff_check<F>(params: &ParamStore, step: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    check_with(params, step, false, loss_fn)
}

/// Like [`finite_diff_check`], but each derivative is the Richardson
/// combination `(4 D(h/2) - D(h)) / 3` of two central differences, which
/// cancels the `h^2` truncation term and allows a larger, roundoff-safe step.
pub fn finite_diff_check_extrapolated<F>(params: &ParamStore, step: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    check_with(params, step, true, loss_fn)
}

fn check_with<F>(params: &ParamStore, step: f64, extrapolate: bool, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        max_abs_error: 0.0,
        max_abs_grad: 0.0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let tensor = params.get(&name)?;
        let Some(analytic) = tensor.grad().map(<[f64]>::to_vec) else { continue };
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = tensor.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                probe.get_mut(&name)?.data_mut()[i] = x0 + h;
                let up = loss_fn(&probe)?;
                probe.get_mut(&name)?.data_mut()[i] = x0 - h;
                let down = loss_fn(&probe)?;
                probe.get_mut(&name)?.data_mut()[i] = x0;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = if extrapolate {
                let coarse = central(step)?;
                let fine = central(step / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                central(step)?
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
