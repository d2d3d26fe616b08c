use crate::error::Result;
use crate::model::{ModelParams, TrainScope};

use super::LossOutput;

// Central differences at eps = 1e-5 carry ~1e-11 of rounding noise, so
// entries far below this are compared on an absolute scale instead.
const DENOM_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic and central-difference gradients
/// over every parameter in `scope`:
/// `|analytic - numeric| / max(|analytic|, |numeric|, DENOM_FLOOR)`.
pub fn grad_check<F>(loss: F, params: &ModelParams, scope: TrainScope, eps: f64) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<LossOutput>,
{
    assert!(eps > 0.0, "eps must be positive");
    let analytic = loss(params)?.grads;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let n_groups = params.groups().len();
    for gi in 0..n_groups {
        let (_, is_cls, values) = params.groups()[gi];
        if scope == TrainScope::ClassifierOnly && !is_cls {
            continue;
        }
        for k in 0..values.len() {
            let orig = values[k];
            probe.groups_mut()[gi].2[k] = orig + eps;
            let plus = loss(&probe)?.loss;
            probe.groups_mut()[gi].2[k] = orig - eps;
            let minus = loss(&probe)?.loss;
            probe.groups_mut()[gi].2[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.groups()[gi].2[k];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
