use super::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Step for whole-model losses (magnitude ~10²), where `DEFAULT_FD_EPS`
/// lands on the roundoff floor for the smallest recurrent gradients.
pub const COMPOSED_FD_EPS: f64 = 5e-5;

/// Outcome of comparing stored analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(group, max relative error)` in group registration order.
    pub per_group: Vec<(String, f64)>,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the gradients currently held in `params` against central
/// differences of `loss_fn`.
///
/// The relative error per scalar is
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`. Every value is
/// restored after probing.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    eps: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut per_group: Vec<(String, f64)> = params.groups().into_iter().map(|g| (g, 0.0)).collect();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut worst_values = None;
    let mut checked = 0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.value(id).len() {
            let original = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = original + eps;
            let plus = loss_fn(params);
            params.value_mut(id).data_mut()[k] = original - eps;
            let minus = loss_fn(params);
            params.value_mut(id).data_mut()[k] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while probing {}[{k}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params.grad(id).data()[k];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((params.name(id).to_string(), k));
                worst_values = Some((analytic, numeric));
            }
            let group = params.group(id);
            if let Some(slot) = per_group.iter_mut().find(|(g, _)| g == group) {
                slot.1 = slot.1.max(rel);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_group,
        worst,
        worst_values,
        checked,
    })
}
