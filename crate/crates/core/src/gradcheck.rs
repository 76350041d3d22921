//! Central finite-difference gradient checker.
//!
//! Only the forward pass is used to build the numeric estimate, so the
//! check is independent of every backward rule it validates.

use crate::tensor::{Graph, NodeId, ParamId, ParamSet};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative-error denominators never drop below this, so gradients that are
/// zero up to round-off do not produce spurious failures.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares `backward` against central differences with step `h` for every
/// entry of every parameter (or at most `max_per_param` evenly spaced
/// entries when set).
pub fn check<F>(params: &mut ParamSet<f64>, h: f64, max_per_param: Option<usize>, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> NodeId,
{
    check_where(params, h, max_per_param, |_, _| true, build)
}

/// Like [`check`], but only entries for which `include(name, index)` holds
/// are compared. Useful for rows that are frozen by design.
pub fn check_where<F, P>(
    params: &mut ParamSet<f64>,
    h: f64,
    max_per_param: Option<usize>,
    include: P,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> NodeId,
    P: Fn(&str, usize) -> bool,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        g.backward(loss).expect("backward succeeds on a finite loss")
    };
    let loss_at = |params: &ParamSet<f64>| {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        g.scalar(loss)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..params.len() {
        let id = ParamId(p);
        let n = params.get(id).numel();
        let stride = max_per_param.map_or(1, |m| n.div_ceil(m).max(1));
        for i in (0..n).step_by(stride) {
            if !include(params.name(id), i) {
                continue;
            }
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let up = loss_at(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let down = loss_at(params);
            params.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    report
}
