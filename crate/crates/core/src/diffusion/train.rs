//! Denoising loss, training loops and fine-tuning.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffusion::denoiser::{batch_images, Bound, Denoiser, DenoiserPass};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// One training image with its (optional) subject condition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub image: Tensor,
    pub cond: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of dropping the subject condition for an item.
    pub uncond_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 2e-3,
            batch_size: 16,
            uncond_prob: 0.1,
        }
    }
}

/// Graph values of one denoising-loss evaluation.
#[derive(Clone, Debug)]
pub struct LossPass {
    pub loss: Var,
    pub x_t: Var,
    pub pass: DenoiserPass,
}

/// Builds `mse(eps, eps_theta(x_t, t, c))` with `x_t` sampled from `x0` by
/// the forward process, inside `g`. `x0` is an `[N, 1, S, S]` batch and
/// `timesteps`, `conds` hold one entry per item.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss(
    g: &mut Graph,
    model: &Denoiser,
    params: &Bound,
    sched: &NoiseSchedule,
    x0: Var,
    timesteps: &[usize],
    eps: &Tensor,
    conds: &[Option<usize>],
    capture: bool,
) -> Result<LossPass> {
    let shape = g.shape(x0).to_vec();
    if eps.shape() != shape.as_slice() {
        return Err(Error::shape("training_loss", &shape, eps.shape()));
    }
    let n = shape[0];
    if timesteps.len() != n {
        return Err(Error::invalid("training_loss", "one timestep per batch item required"));
    }
    for &t in timesteps {
        sched.check_timestep(t)?;
    }
    let per = eps.len() / n;
    let coef = Tensor::from_fn(shape.clone(), |i| sched.alpha_bar(timesteps[i / per]).sqrt());
    let noise = Tensor::from_fn(shape.clone(), |i| {
        (1.0 - sched.alpha_bar(timesteps[i / per])).sqrt() * eps.data()[i]
    });
    let coef = g.constant(coef);
    let noise = g.constant(noise);
    let scaled = g.mul(x0, coef)?;
    let x_t = g.add(scaled, noise)?;
    let pass = model.forward(g, params, x_t, timesteps, conds, capture)?;
    let target = g.constant(eps.clone());
    let loss = g.mse(target, pass.eps)?;
    Ok(LossPass { loss, x_t, pass })
}

/// Scalar training loss at a single timestep for a batch (or single image).
pub fn training_loss(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: Option<usize>,
) -> Result<f64> {
    let x0 = crate::diffusion::denoiser::as_batch(x0)?;
    let eps = eps.clone().reshape(x0.shape().to_vec())?;
    let n = x0.batch();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(x0);
    let lp = denoising_loss(&mut g, model, &p, sched, x, &vec![t; n], &eps, &vec![cond; n], false)?;
    Ok(g.value(lp.loss).item())
}

/// Adam-driven training state that persists across calls.
#[derive(Clone, Debug)]
pub struct Trainer {
    opt: Adam,
}

impl Trainer {
    pub fn new(lr: f64) -> Self {
        Self { opt: Adam::new(lr) }
    }

    /// One optimisation step on a batch with random timesteps and noise.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &mut Denoiser,
        sched: &NoiseSchedule,
        x0: &Tensor,
        conds: &[Option<usize>],
        rng: &mut R,
    ) -> Result<f64> {
        let n = x0.batch();
        let timesteps: Vec<usize> = (0..n).map(|_| rng.gen_range(0..sched.steps())).collect();
        let eps = Tensor::randn(x0.shape().to_vec(), rng);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let x = g.constant(x0.clone());
        let lp = denoising_loss(&mut g, model, &p, sched, x, &timesteps, &eps, conds, false)?;
        let loss = g.value(lp.loss).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step: 0, loss });
        }
        let mut grads = g.backward(lp.loss)?;
        let named: BTreeMap<String, Tensor> = p
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect();
        self.opt.step(model.params_mut(), &named);
        Ok(loss)
    }
}

/// Trains on `data` for `cfg.steps` minibatch steps. Returns the per-step loss.
pub fn train<R: Rng + ?Sized>(
    model: &mut Denoiser,
    sched: &NoiseSchedule,
    data: &[TrainItem],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let mut trainer = Trainer::new(cfg.lr);
    let bs = cfg.batch_size.clamp(1, data.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<&TrainItem> = (0..bs).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let x0 = batch_images(&picks.iter().map(|it| &it.image).collect::<Vec<_>>())?;
        let conds: Vec<Option<usize>> = picks
            .iter()
            .map(|it| {
                if cfg.uncond_prob > 0.0 && rng.gen_bool(cfg.uncond_prob) {
                    None
                } else {
                    it.cond
                }
            })
            .collect();
        let loss = trainer
            .step(model, sched, &x0, &conds, rng)
            .map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { step, loss },
                other => other,
            })?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Subject fine-tuning: every image is paired with the fixed condition `subject`.
pub fn finetune<R: Rng + ?Sized>(
    model: &mut Denoiser,
    sched: &NoiseSchedule,
    images: &[Tensor],
    subject: usize,
    steps: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let data: Vec<TrainItem> = images
        .iter()
        .map(|im| TrainItem {
            image: im.clone(),
            cond: Some(subject),
        })
        .collect();
    let cfg = TrainConfig {
        steps,
        lr,
        batch_size: data.len(),
        uncond_prob: 0.0,
    };
    train(model, sched, &data, &cfg, rng)
}

/// Mean loss on a fixed set of `(t, eps)` draws derived from `seed`, so that
/// evaluations before and after training are comparable.
pub fn fixed_eval_loss(
    model: &Denoiser,
    sched: &NoiseSchedule,
    data: &[TrainItem],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = crate::rng::seeded(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..draws {
        for item in data {
            let t = rng.gen_range(0..sched.steps());
            let eps = Tensor::randn(item.image.shape().to_vec(), &mut rng);
            total += training_loss(model, sched, &item.image, t, &eps, item.cond)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::gradcheck::{autodiff_grad, numeric_grad, max_relative_error};
    use crate::rng::seeded;

    fn tiny() -> Denoiser {
        Denoiser::new(
            DenoiserConfig {
                conditions: 4,
                ..Default::default()
            },
            &mut seeded(11),
        )
    }

    #[test]
    fn zero_output_model_loss_is_eps_energy() {
        let mut m = tiny();
        for (k, t) in m.params_mut().iter_mut() {
            if k.starts_with("head") {
                t.data_mut().fill(0.0);
            }
        }
        let mut rng = seeded(12);
        let x0 = Tensor::uniform(vec![1, 32, 32], 0.0, 1.0, &mut rng);
        let eps = Tensor::randn(vec![1, 32, 32], &mut rng);
        let sched = NoiseSchedule::standard();
        let loss = training_loss(&m, &sched, &x0, 400, &eps, None).unwrap();
        let energy = eps.data().iter().map(|e| e * e).sum::<f64>() / eps.len() as f64;
        assert!((loss - energy).abs() < 1e-12);
        assert!((energy - 1.0).abs() < 0.15);
    }

    #[test]
    fn gradient_wrt_image_matches_finite_differences() {
        let m = tiny();
        let sched = NoiseSchedule::standard();
        let mut rng = seeded(13);
        let x0 = Tensor::uniform(vec![1, 1, 32, 32], 0.0, 1.0, &mut rng);
        let eps = Tensor::randn(vec![1, 1, 32, 32], &mut rng);
        let f = |g: &mut Graph, x: Var| -> Result<Var> {
            let p = m.bind(g, false);
            Ok(denoising_loss(g, &m, &p, &sched, x, &[250], &eps, &[Some(1)], false)?.loss)
        };
        let ad = autodiff_grad(&f, &x0).unwrap();
        let full = numeric_grad(&f, &x0, 1e-5).unwrap();
        let err = max_relative_error(ad.data(), &full);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let mut m = tiny();
        let before = m.clone();
        let data = vec![TrainItem {
            image: Tensor::full(vec![1, 32, 32], 0.5),
            cond: None,
        }];
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        train(&mut m, &NoiseSchedule::standard(), &data, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<TrainItem> = (0..4)
            .map(|i| TrainItem {
                image: Tensor::full(vec![1, 32, 32], 0.2 * i as f64),
                cond: Some(i % 2),
            })
            .collect();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            ..Default::default()
        };
        let sched = NoiseSchedule::standard();
        let mut a = tiny();
        let mut b = tiny();
        train(&mut a, &sched, &data, &cfg, &mut seeded(5)).unwrap();
        train(&mut b, &sched, &data, &cfg, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, tiny());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = tiny();
        let r = train(&mut m, &NoiseSchedule::standard(), &[], &TrainConfig::default(), &mut seeded(0));
        assert!(r.is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny();
        m.params_mut().get_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
        let data = vec![TrainItem {
            image: Tensor::full(vec![1, 32, 32], 0.5),
            cond: None,
        }];
        let cfg = TrainConfig {
            steps: 3,
            ..Default::default()
        };
        let err = train(&mut m, &NoiseSchedule::standard(), &data, &cfg, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }
}
