//! Per-step metrics of a protection run.

use std::fmt::Write as _;

use crate::tensor::Tensor;

/// Absolute gradient values below this count as vanished.
pub const VANISHING_THRESHOLD: f64 = 1e-10;

pub const METRICS_HEADER: &str =
    "epoch,step,phase,t,loss,feat_loss,grad_abs_mean,grad_abs_max,frac_below_1e-10";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Surrogate,
    Attack,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Surrogate => "surrogate",
            Phase::Attack => "attack",
        }
    }
}

/// Gradient magnitude summary of one tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradSummary {
    pub abs_mean: f64,
    pub abs_max: f64,
    pub frac_below: f64,
}

impl GradSummary {
    pub fn of(grads: &[Tensor]) -> Self {
        let n: usize = grads.iter().map(Tensor::len).sum();
        let mut sum = 0.0;
        let mut max = 0.0f64;
        let mut below = 0usize;
        for v in grads.iter().flat_map(|g| g.data()) {
            let a = v.abs();
            sum += a;
            max = max.max(a);
            if a < VANISHING_THRESHOLD {
                below += 1;
            }
        }
        let n = n.max(1) as f64;
        Self {
            abs_mean: sum / n,
            abs_max: max,
            frac_below: below as f64 / n,
        }
    }
}

/// One row of the metrics CSV. Surrogate rows carry no timestep, feature
/// loss or input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub t: Option<usize>,
    pub loss: f64,
    pub feat_loss: Option<f64>,
    pub grad: Option<GradSummary>,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{},{},{},{}",
            r.epoch,
            r.step,
            r.phase.as_str(),
            opt(r.t),
            r.loss,
            opt(r.feat_loss.map(|v| format!("{v:e}"))),
            opt(r.grad.map(|g| format!("{:e}", g.abs_mean))),
            opt(r.grad.map(|g| format!("{:e}", g.abs_max))),
            opt(r.grad.map(|g| g.frac_below)),
        );
    }
    out
}

/// Mean of `grad_abs_mean` over the attack rows.
pub fn mean_attack_grad(records: &[StepRecord]) -> f64 {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.phase == Phase::Attack)
        .filter_map(|r| r.grad.map(|g| g.abs_mean))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}
