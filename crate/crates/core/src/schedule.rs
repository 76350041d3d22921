//! Learning-rate decay on plateau, early stopping, and the shared
//! optimizer step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AdamState, Gradients, ParamSet};

/// Which direction of a metric counts as better.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    Minimize,
    Maximize,
}

/// Outcome of one epoch's validation metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Strictly better than everything seen so far.
    Improved,
    /// Not improved; `stop` is set once `patience` such epochs ran in a row.
    Plateau { stop: bool },
}

/// Tracks the best metric. One rule drives both lr decay and stopping:
/// a non-improving epoch halves the lr (via the caller), and `patience`
/// consecutive ones end training.
#[derive(Clone, Debug)]
pub struct Plateau {
    goal: Goal,
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(goal: Goal, patience: usize) -> Self {
        Plateau {
            goal,
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        let better = match (self.best, self.goal) {
            (None, _) => true,
            (Some(b), Goal::Minimize) => metric < b,
            (Some(b), Goal::Maximize) => metric > b,
        };
        if better {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            Verdict::Improved
        } else {
            self.bad_epochs += 1;
            Verdict::Plateau {
                stop: self.bad_epochs >= self.patience,
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Zeroes grads, adds `grads`, clips to `clip_norm` and applies one Adam
/// update. Returns the pre-clip gradient norm.
pub fn apply_update<T: Scalar>(
    params: &mut ParamSet<T>,
    adam: &mut AdamState<T>,
    grads: &Gradients<T>,
    clip_norm: f64,
) -> Result<f64> {
    params.zero_grads();
    params.accumulate(grads);
    let norm = params.clip_grad_norm(T::of(clip_norm)).as_f64();
    if !norm.is_finite() {
        return Err(Error::Numeric { op: "gradient norm" });
    }
    adam.step(params)?;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_metric_stops_at_epoch_four() {
        let mut p = Plateau::new(Goal::Minimize, 3);
        let verdicts: Vec<Verdict> = (1..=4).map(|e| p.observe(e, 10.0)).collect();
        assert_eq!(verdicts[0], Verdict::Improved);
        assert_eq!(verdicts[1], Verdict::Plateau { stop: false });
        assert_eq!(verdicts[2], Verdict::Plateau { stop: false });
        assert_eq!(verdicts[3], Verdict::Plateau { stop: true });
        assert_eq!(p.best_epoch(), 1);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut p = Plateau::new(Goal::Maximize, 2);
        assert_eq!(p.observe(1, 0.5), Verdict::Improved);
        assert_eq!(p.observe(2, 0.5), Verdict::Plateau { stop: false });
        assert_eq!(p.observe(3, 0.6), Verdict::Improved);
        assert_eq!(p.observe(4, 0.1), Verdict::Plateau { stop: false });
        assert_eq!(p.observe(5, 0.6), Verdict::Plateau { stop: true });
        assert_eq!(p.best(), Some(0.6));
    }

    #[test]
    fn monotone_run_never_plateaus() {
        let mut p = Plateau::new(Goal::Minimize, 3);
        assert!((1..20).all(|e| p.observe(e, 100.0 / e as f64) == Verdict::Improved));
    }
}
