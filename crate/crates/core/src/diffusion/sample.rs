//! Ancestral DDPM sampling.

use rand::Rng;

use crate::diffusion::denoiser::Denoiser;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::Result;
use crate::tensor::Tensor;

/// Draws `n` images by ancestral sampling from `t = T-1` down to `0` using
/// the posterior mean plus `sqrt(beta_t)` noise (none at the last step).
/// Outputs are clamped to `[0, 1]` and returned as `[1, S, S]` tensors.
pub fn sample<R: Rng + ?Sized>(
    model: &Denoiser,
    sched: &NoiseSchedule,
    n: usize,
    cond: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let s = model.config().image_size;
    let mut x = Tensor::randn(vec![n, 1, s, s], rng);
    for t in (0..sched.steps()).rev() {
        let eps = model.predict(&x, t, cond)?;
        let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
        let k = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let mut next = x.zip_map(&eps, |xv, ev| inv * (xv - k * ev))?;
        if t > 0 {
            let sigma = beta.sqrt();
            let z = Tensor::randn(next.shape().to_vec(), rng);
            next = next.zip_map(&z, |m, z| m + sigma * z)?;
        }
        x = next;
    }
    let x = x.map(|v| v.clamp(0.0, 1.0));
    Ok((0..n)
        .map(|i| {
            x.batch_item(i)
                .reshape(vec![1, s, s])
                .expect("image shape")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::rng::seeded;

    #[test]
    fn deterministic_and_clamped() {
        let m = Denoiser::new(DenoiserConfig::default(), &mut seeded(1));
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let a = sample(&m, &sched, 3, Some(2), &mut seeded(9)).unwrap();
        let b = sample(&m, &sched, 3, Some(2), &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for img in &a {
            assert_eq!(img.shape(), &[1, 32, 32]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
