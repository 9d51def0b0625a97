//! Adaptive greedy time-interval selection.
//!
//! Each round draws five distinct timesteps from the pool and measures the
//! summed absolute input gradient of the denoising loss at each. The window
//! `(t - 20, t + 20)` around the weakest timestep is deleted from the pool,
//! and the working image takes one signed-gradient step at the strongest
//! one. The search stops once the pool holds at most 100 timesteps or the
//! iteration cap is reached.

use crate::attack::pool::TimestepPool;
use crate::diffusion::{as_batch, denoising_loss, Denoiser, NoiseSchedule};
use crate::error::Result;
use crate::graph::Graph;
use crate::rng::LabRng;
use crate::tensor::Tensor;

/// Timesteps evaluated per round.
pub const SAMPLES_PER_ROUND: usize = 5;
/// Half-width of the deleted window; the open interval `(t - 20, t + 20)`
/// removes at most 39 timesteps.
pub const WINDOW_RADIUS: usize = 20;
/// The search stops once the pool is no longer than this.
pub const MIN_POOL_LEN: usize = 100;

/// Source of per-timestep input gradients.
pub trait GradientOracle {
    /// Number of diffusion steps `T`; the search starts from `[0, T)`.
    fn timesteps(&self) -> usize;

    /// Sum of absolute gradient entries and the gradient itself at `t`.
    fn grad_abs_sum(&mut self, x: &Tensor, t: usize, rng: &mut LabRng) -> Result<(f64, Tensor)>;
}

/// Gradients of the (conditional) denoising loss of a model.
pub struct ModelOracle<'a> {
    pub model: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
    pub cond: Option<usize>,
}

impl GradientOracle for ModelOracle<'_> {
    fn timesteps(&self) -> usize {
        self.sched.steps()
    }

    fn grad_abs_sum(&mut self, x: &Tensor, t: usize, rng: &mut LabRng) -> Result<(f64, Tensor)> {
        grad_abs_sum(self.model, self.sched, x, t, self.cond, rng)
    }
}

/// Draws fresh noise and returns `sum |d loss / d x|` with the gradient.
/// `x` is an image `[1, S, S]` or a batch `[N, 1, S, S]`; the gradient has
/// the same shape.
pub fn grad_abs_sum(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x: &Tensor,
    t: usize,
    cond: Option<usize>,
    rng: &mut LabRng,
) -> Result<(f64, Tensor)> {
    let xb = as_batch(x)?;
    let n = xb.batch();
    let eps = Tensor::randn(xb.shape().to_vec(), rng);
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xv = g.leaf(xb);
    let lp = denoising_loss(&mut g, model, &p, sched, xv, &vec![t; n], &eps, &vec![cond; n], false)?;
    let mut grads = g.backward(lp.loss)?;
    let grad = grads
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        .reshape(x.shape().to_vec())?;
    Ok((grad.abs_sum(), grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// The pool reached [`MIN_POOL_LEN`] or fewer timesteps.
    PoolSmall,
    /// The iteration cap was hit.
    IterationCap,
    /// Deleting the next window would have emptied the pool.
    WouldEmpty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRound {
    /// `(timestep, gradient sum)` in draw order.
    pub probes: Vec<(usize, f64)>,
    pub weakest: usize,
    pub strongest: usize,
    /// Half-open range handed to the pool for deletion, after clamping.
    pub deleted: (usize, usize),
    pub pool_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub pool: TimestepPool,
    pub rounds: Vec<SelectionRound>,
    pub stop: StopReason,
}

/// Runs the greedy search from `[0, T)` for at most `max_rounds` rounds.
///
/// Ties in the gradient sums go to the smaller timestep. The working copy of
/// `x` accumulates the signed steps and is not projected onto any budget.
pub fn adaptive_select<O: GradientOracle>(
    oracle: &mut O,
    x: &Tensor,
    max_rounds: usize,
    alpha: f64,
    rng: &mut LabRng,
) -> Result<Selection> {
    let steps = oracle.timesteps();
    let mut pool = TimestepPool::full(steps);
    let mut work = x.clone();
    let mut rounds = Vec::new();
    let mut stop = StopReason::IterationCap;
    for _ in 0..max_rounds {
        if pool.len() <= MIN_POOL_LEN {
            stop = StopReason::PoolSmall;
            break;
        }
        let ts = pool.sample_distinct(SAMPLES_PER_ROUND, rng);
        let mut probes = Vec::with_capacity(ts.len());
        let mut grads = Vec::with_capacity(ts.len());
        for &t in &ts {
            let (s, g) = oracle.grad_abs_sum(&work, t, rng)?;
            probes.push((t, s));
            grads.push(g);
        }
        let order = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        let weakest = probes.iter().min_by(|a, b| order(a, b)).expect("probes").0;
        let strongest_idx = (0..probes.len())
            .max_by(|&i, &j| {
                probes[i]
                    .1
                    .total_cmp(&probes[j].1)
                    .then(probes[j].0.cmp(&probes[i].0))
            })
            .expect("probes");
        let strongest = probes[strongest_idx].0;

        let lo = weakest.saturating_sub(WINDOW_RADIUS - 1);
        let hi = (weakest + WINDOW_RADIUS).min(steps);
        let next = pool.without(lo, hi);
        if next.is_empty() {
            stop = StopReason::WouldEmpty;
            break;
        }
        pool = next;

        let g = &grads[strongest_idx];
        work = work.zip_map(g, |x, g| x + alpha * sign(g))?;
        rounds.push(SelectionRound {
            probes,
            weakest,
            strongest,
            deleted: (lo, hi),
            pool_len: pool.len(),
        });
    }
    if rounds.len() == max_rounds && pool.len() <= MIN_POOL_LEN {
        stop = StopReason::PoolSmall;
    }
    Ok(Selection { pool, rounds, stop })
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Oracle backed by a fixed gradient profile `g(t)`: the returned gradient is
/// a constant tensor whose absolute sum equals `g(t)`.
pub struct ProfileOracle<F: Fn(usize) -> f64> {
    pub profile: F,
    pub steps: usize,
}

impl<F: Fn(usize) -> f64> GradientOracle for ProfileOracle<F> {
    fn timesteps(&self) -> usize {
        self.steps
    }

    fn grad_abs_sum(&mut self, x: &Tensor, t: usize, _rng: &mut LabRng) -> Result<(f64, Tensor)> {
        let v = (self.profile)(t);
        let per = v / x.len() as f64;
        Ok((v.abs(), Tensor::full(x.shape().to_vec(), per)))
    }
}
