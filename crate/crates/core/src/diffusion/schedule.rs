//! Noise schedule and the closed-form forward process.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step variances `beta_t`, `alpha_t = 1 - beta_t` and their cumulative
/// products `alpha_bar_t`, indexed `0..steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("schedule_linear", "need at least 2 steps"));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::invalid(
                "schedule_linear",
                format!("need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// 1000 steps, betas 1e-4 to 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(
                "timestep",
                format!("t = {t} outside [0, {})", self.steps()),
            ));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn mix(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
        .map_err(|_| Error::shape("forward_sample", x0.shape(), eps.shape()))
}

/// Samples `x_t ~ q(x_t | x_0)` with the supplied noise.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    mix(x0, eps, sched.alpha_bar(t))
}

/// Inverts the forward process given a noise estimate.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    if ab < 1e-12 {
        return Err(Error::invalid(
            "predict_x0",
            format!("alpha_bar({t}) = {ab:e} is too small to invert"),
        ));
    }
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - sb * e) / sa)
        .map_err(|_| Error::shape("predict_x0", x_t.shape(), eps_hat.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn first_alpha_bar() {
        let s = NoiseSchedule::standard();
        assert!((s.alpha_bar(0) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_exact_product() {
        let s = NoiseSchedule::standard();
        let mut prod = 1.0;
        for t in 0..s.steps() {
            prod *= 1.0 - s.beta(t);
            assert_eq!(prod, s.alpha_bar(t));
            if t > 0 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
    }

    #[test]
    fn final_alpha_bar_is_tiny() {
        // Direct product in log space: sum of ln(1 - beta_t).
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let s = NoiseSchedule::standard();
        assert!((s.alpha_bar(999).ln() - log).abs() < 1e-9);
        assert!(s.alpha_bar(999) < 5e-5, "{}", s.alpha_bar(999));
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn zero_noise_limits() {
        let mut rng = seeded(1);
        let x0 = Tensor::uniform(vec![1, 4, 4], 0.0, 1.0, &mut rng);
        let eps = Tensor::randn(vec![1, 4, 4], &mut rng);
        assert_eq!(mix(&x0, &eps, 1.0).unwrap(), x0);
        let s = NoiseSchedule::standard();
        let zero = Tensor::zeros(vec![1, 4, 4]);
        let xt = forward_sample(&x0, 300, &zero, &s).unwrap();
        let a = s.alpha_bar(300).sqrt();
        for (x, o) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*x, a * o);
        }
        assert!(forward_sample(&x0, 1000, &zero, &s).is_err());
    }

    #[test]
    fn predict_x0_inverts_forward_sample() {
        let s = NoiseSchedule::standard();
        let mut rng = seeded(2);
        for _ in 0..100 {
            let t = rng.gen_range(0..1000);
            let x0 = Tensor::uniform(vec![1, 3, 3], 0.0, 1.0, &mut rng);
            let eps = Tensor::randn(vec![1, 3, 3], &mut rng);
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn predict_x0_with_zero_eps_rescales() {
        let s = NoiseSchedule::standard();
        let xt = Tensor::full(vec![2], 0.5);
        let out = predict_x0(&xt, &Tensor::zeros(vec![2]), 10, &s).unwrap();
        assert_eq!(out.data()[0], 0.5 / s.alpha_bar(10).sqrt());
    }

    #[test]
    fn predict_x0_refuses_singular_schedule() {
        let s = NoiseSchedule::linear(4000, 0.01, 0.5).unwrap();
        let x = Tensor::zeros(vec![1]);
        assert!(predict_x0(&x, &x, 3999, &s).is_err());
    }
}
