//! Per-timestep statistics of the input gradient of the denoising loss.

use std::fmt::Write as _;

use rand::Rng;

use crate::attack::GradientOracle;
use crate::error::{Error, Result};
use crate::rng::LabRng;
use crate::tensor::Tensor;

/// Statistics of `|grad|` for one timestep bucket, averaged over samples.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketStats {
    pub lo: usize,
    pub hi: usize,
    pub samples: usize,
    /// Mean number of entries with `|g| < threshold`.
    pub count_below: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub median_abs: f64,
    /// Entries per gradient tensor.
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientStats {
    pub threshold: f64,
    pub buckets: Vec<BucketStats>,
}

pub const GRADIENT_STATS_HEADER: &str =
    "t_lo,t_hi,samples,elements,threshold,count_below,max_abs,mean_abs,median_abs";

impl GradientStats {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRADIENT_STATS_HEADER}\n");
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{},{:e},{:e},{:e}",
                b.lo, b.hi, b.samples, b.elements, self.threshold, b.count_below, b.max_abs, b.mean_abs, b.median_abs
            );
        }
        out
    }
}

/// `n` equal-width buckets covering `[0, steps)`; the last absorbs the remainder.
pub fn even_buckets(steps: usize, n: usize) -> Vec<(usize, usize)> {
    let n = n.clamp(1, steps.max(1));
    let w = steps / n;
    (0..n)
        .map(|i| (i * w, if i + 1 == n { steps } else { (i + 1) * w }))
        .collect()
}

/// Samples `samples_per_bucket` timesteps uniformly inside each bucket and
/// averages the statistics of the returned gradients.
pub fn gradient_stats<O: GradientOracle>(
    oracle: &mut O,
    x: &Tensor,
    buckets: &[(usize, usize)],
    samples_per_bucket: usize,
    threshold: f64,
    rng: &mut LabRng,
) -> Result<GradientStats> {
    let steps = oracle.timesteps();
    check_partition(buckets, steps)?;
    if samples_per_bucket == 0 {
        return Err(Error::invalid("gradient_stats", "need at least one sample per bucket"));
    }
    let mut out = Vec::with_capacity(buckets.len());
    for &(lo, hi) in buckets {
        let mut acc = [0.0; 4];
        for _ in 0..samples_per_bucket {
            let t = rng.gen_range(lo..hi);
            let (_, g) = oracle.grad_abs_sum(x, t, rng)?;
            let mut abs: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
            abs.sort_by(f64::total_cmp);
            acc[0] += abs.iter().filter(|&&a| a < threshold).count() as f64;
            acc[1] += abs.last().copied().unwrap_or(0.0);
            acc[2] += abs.iter().sum::<f64>() / abs.len().max(1) as f64;
            acc[3] += median_sorted(&abs);
        }
        let k = samples_per_bucket as f64;
        out.push(BucketStats {
            lo,
            hi,
            samples: samples_per_bucket,
            count_below: acc[0] / k,
            max_abs: acc[1] / k,
            mean_abs: acc[2] / k,
            median_abs: acc[3] / k,
            elements: x.len(),
        });
    }
    Ok(GradientStats {
        threshold,
        buckets: out,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn check_partition(buckets: &[(usize, usize)], steps: usize) -> Result<()> {
    let mut next = 0;
    for &(lo, hi) in buckets {
        if lo != next || hi <= lo {
            return Err(Error::invalid(
                "gradient_stats",
                format!("buckets must partition [0, {steps}) in order"),
            ));
        }
        next = hi;
    }
    if next != steps {
        return Err(Error::invalid(
            "gradient_stats",
            format!("buckets must partition [0, {steps}) in order"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{ModelOracle, ProfileOracle};
    use crate::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
    use crate::rng::seeded;

    #[test]
    fn constant_model_has_only_vanished_gradients() {
        let mut m = Denoiser::new(DenoiserConfig::default(), &mut seeded(3));
        m.params_mut().get_mut("head.conv").unwrap().data_mut().fill(0.0);
        let sched = NoiseSchedule::standard();
        let mut oracle = ModelOracle {
            model: &m,
            sched: &sched,
            cond: None,
        };
        let x = Tensor::full(vec![1, 32, 32], 0.5);
        let s = gradient_stats(&mut oracle, &x, &even_buckets(1000, 5), 2, 1e-10, &mut seeded(4)).unwrap();
        for b in &s.buckets {
            assert_eq!(b.count_below, 1024.0);
            assert_eq!(b.max_abs, 0.0);
        }
    }

    #[test]
    fn huge_threshold_counts_everything() {
        let mut oracle = ProfileOracle {
            profile: |t| t as f64 + 1.0,
            steps: 100,
        };
        let x = Tensor::zeros(vec![1, 4, 4]);
        let s = gradient_stats(&mut oracle, &x, &even_buckets(100, 4), 3, f64::MAX, &mut seeded(5)).unwrap();
        assert!(s.buckets.iter().all(|b| b.count_below == 16.0));
        assert!(s.buckets.iter().all(|b| b.max_abs >= b.mean_abs && b.mean_abs >= 0.0));
    }

    #[test]
    fn buckets_must_partition() {
        let mut oracle = ProfileOracle {
            profile: |_| 1.0,
            steps: 100,
        };
        let x = Tensor::zeros(vec![1]);
        assert!(gradient_stats(&mut oracle, &x, &[(0, 50)], 1, 1e-10, &mut seeded(0)).is_err());
        assert!(gradient_stats(&mut oracle, &x, &[(0, 60), (50, 100)], 1, 1e-10, &mut seeded(0)).is_err());
        assert_eq!(even_buckets(1000, 3), vec![(0, 333), (333, 666), (666, 1000)]);
    }
}
