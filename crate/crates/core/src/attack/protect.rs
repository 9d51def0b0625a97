//! Alternating surrogate training and perturbation optimisation.

use crate::attack::config::AttackConfig;
use crate::attack::log::{GradSummary, Phase, StepRecord};
use crate::attack::loss::objective_grad;
use crate::attack::pgd::Perturbation;
use crate::attack::pool::TimestepPool;
use crate::attack::select::{adaptive_select, ModelOracle, Selection};
use crate::diffusion::{batch_images, Denoiser, NoiseSchedule, Trainer};
use crate::error::Result;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ProtectOutcome {
    pub perturbation: Perturbation,
    pub surrogate: Denoiser,
    /// Timesteps the attack drew from.
    pub pool: TimestepPool,
    /// Search trace, present when selection ran.
    pub selection: Option<Selection>,
    pub log: Vec<StepRecord>,
}

/// Protects `images` of one subject against fine-tuning.
///
/// The timestep search runs once on the first image with the initial
/// surrogate. Each epoch then trains the surrogate on the current perturbed
/// images and takes PGD steps on the combined objective, one timestep per
/// step drawn uniformly from the pool. The search and the attack share the
/// attack stream; surrogate training uses the surrogate stream.
pub fn protect(
    surrogate: &Denoiser,
    sched: &NoiseSchedule,
    images: &[Tensor],
    subject: Option<usize>,
    cfg: &AttackConfig,
) -> Result<ProtectOutcome> {
    cfg.validate()?;
    let mut pert = Perturbation::new(images.to_vec(), cfg.eta)?;
    let mut model = surrogate.clone();
    let mut attack_rng = stream(cfg.seed, Stream::Attack);
    let mut train_rng = stream(cfg.seed, Stream::Surrogate);

    let selection = match (cfg.selection_enabled, images.first()) {
        (true, Some(first)) => {
            let mut oracle = ModelOracle {
                model: &model,
                sched,
                cond: subject,
            };
            Some(adaptive_select(&mut oracle, first, cfg.search_steps, cfg.alpha, &mut attack_rng)?)
        }
        _ => None,
    };
    let pool = selection
        .as_ref()
        .map_or_else(|| TimestepPool::full(sched.steps()), |s| s.pool.clone());

    let mut trainer = Trainer::new(cfg.surrogate_lr);
    let mut log = Vec::new();
    let n = images.len();
    let conds = vec![subject; n];
    let epochs = if n == 0 { 0 } else { cfg.epochs };
    let clean = if n == 0 {
        Tensor::zeros(vec![1])
    } else {
        batch_images(&images.iter().collect::<Vec<_>>())?
    };

    for epoch in 0..epochs {
        for step in 0..cfg.surrogate_steps_per_epoch {
            let x = batch_images(&pert.perturbed().iter().collect::<Vec<_>>())?;
            let loss = trainer.step(&mut model, sched, &x, &conds, &mut train_rng)?;
            log.push(StepRecord {
                epoch,
                step,
                phase: Phase::Surrogate,
                t: None,
                loss,
                feat_loss: None,
                grad: None,
            });
        }
        for step in 0..cfg.attack_steps_per_epoch {
            let t = pool.sample_uniform(&mut attack_rng);
            let x = batch_images(&pert.perturbed().iter().collect::<Vec<_>>())?;
            let eps = Tensor::randn(x.shape().to_vec(), &mut attack_rng);
            let e = objective_grad(
                &model,
                sched,
                &x,
                &clean,
                t,
                &eps,
                subject,
                cfg.lambda,
                &cfg.tap_layers,
            )?;
            let grads: Vec<Tensor> = (0..n)
                .map(|i| e.grad.batch_item(i).reshape(images[i].shape().to_vec()))
                .collect::<Result<_>>()?;
            pert.pgd_step(&grads, cfg.alpha)?;
            log.push(StepRecord {
                epoch,
                step,
                phase: Phase::Attack,
                t: Some(t),
                loss: e.loss,
                feat_loss: (cfg.lambda != 0.0).then_some(e.feature),
                grad: Some(GradSummary::of(&grads)),
            });
        }
    }
    Ok(ProtectOutcome {
        perturbation: pert,
        surrogate: model,
        pool,
        selection,
        log,
    })
}
