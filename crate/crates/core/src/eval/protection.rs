//! Victim fine-tuning and protection metrics.

use std::fmt::Write as _;

use rand::Rng;

use crate::analysis::{fft2d, radial_profile, ring_count, SpectrumStat};
use crate::attack::Perturbation;
use crate::diffusion::{finetune, sample, training_loss, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::encoder::{cosine, IdentityEncoder};
use crate::eval::subject::Subject;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Generated images per victim.
    pub samples: usize,
    /// Noise draws per held-out image for the reconstruction error.
    pub recon_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            finetune_steps: 1000,
            finetune_lr: 1e-4,
            samples: 30,
            recon_draws: 8,
        }
    }
}

/// Metrics of one fine-tuned victim.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmReport {
    /// Mean cosine similarity between generated images and the clean subject
    /// reference embedding.
    pub ism_proxy: f64,
    /// Mean high-frequency share of the generated images' spectra.
    pub artifact_energy: f64,
    /// Mean denoising loss on held-out clean subject images.
    pub recon_error: f64,
}

/// Clean-trained versus protected-trained victims under identical seeds.
/// `ism_proxy` and `artifact_energy` are proxies: no face detector or
/// quality assessor exists at this scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionReport {
    pub clean: ArmReport,
    pub protected: ArmReport,
}

impl ProtectionReport {
    /// Clean minus protected identity similarity; positive means protection.
    pub fn ism_drop(&self) -> f64 {
        self.clean.ism_proxy - self.protected.ism_proxy
    }

    pub fn artifact_delta(&self) -> f64 {
        self.protected.artifact_energy - self.clean.artifact_energy
    }

    pub fn recon_gap(&self) -> f64 {
        self.protected.recon_error - self.clean.recon_error
    }
}

pub const REPORT_HEADER: &str = "arm,ism_proxy,artifact_energy,recon_error";

pub fn report_csv(r: &ProtectionReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for (name, a) in [("clean", &r.clean), ("protected", &r.protected)] {
        let _ = writeln!(out, "{name},{},{},{}", a.ism_proxy, a.artifact_energy, a.recon_error);
    }
    let _ = writeln!(out, "# ism_drop={} artifact_delta={} recon_gap={}", r.ism_drop(), r.artifact_delta(), r.recon_gap());
    out
}

/// Mean cosine similarity of each generated image's embedding with the
/// normalised mean embedding of `references`.
pub fn ism_proxy(encoder: &IdentityEncoder, generated: &[Tensor], references: &[Tensor]) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::invalid("ism_proxy", "need generated and reference images"));
    }
    let refs = encoder.embed(references)?;
    let mut centre = vec![0.0; refs[0].len()];
    for r in &refs {
        for (c, v) in centre.iter_mut().zip(r) {
            *c += v;
        }
    }
    let gen = encoder.embed(generated)?;
    Ok(gen.iter().map(|e| cosine(e, &centre)).sum::<f64>() / gen.len() as f64)
}

/// Mean share of spectral amplitude above half the maximum radius, after
/// removing each image's mean.
pub fn artifact_energy(images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("artifact_energy", "no images"));
    }
    let mut total = 0.0;
    for im in images {
        let m = im.mean();
        let spec = fft2d(&im.map(|v| v - m))?;
        total += radial_profile(&spec, ring_count(&spec), SpectrumStat::Amplitude)?.high_share();
    }
    Ok(total / images.len() as f64)
}

/// Mean denoising loss of `model` on `images` under draws fixed by `seed`.
pub fn recon_error(
    model: &Denoiser,
    sched: &NoiseSchedule,
    images: &[Tensor],
    cond: Option<usize>,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, Stream::Eval);
    let mut total = 0.0;
    let mut n = 0usize;
    for _ in 0..draws {
        for im in images {
            let t = rng.gen_range(0..sched.steps());
            let eps = Tensor::randn(im.shape().to_vec(), &mut rng);
            total += training_loss(model, sched, im, t, &eps, cond)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Fine-tunes a copy of `base` on `images` bound to the subject's condition,
/// then generates and scores. Fine-tuning draws from the victim stream of
/// `victim_seed`; generation and metrics draw from its eval stream, so two
/// arms with the same seed differ only in their training images.
pub fn evaluate_arm(
    base: &Denoiser,
    sched: &NoiseSchedule,
    subject: &Subject,
    images: &[Tensor],
    encoder: &IdentityEncoder,
    victim_seed: u64,
    cfg: &EvalConfig,
) -> Result<(ArmReport, Denoiser)> {
    let mut victim = base.clone();
    let mut rng = stream(victim_seed, Stream::Victim);
    finetune(&mut victim, sched, images, subject.id, cfg.finetune_steps, cfg.finetune_lr, &mut rng)?;
    let mut gen_rng = stream(victim_seed, Stream::Eval);
    let generated = sample(&victim, sched, cfg.samples, Some(subject.id), &mut gen_rng)?;
    let report = ArmReport {
        ism_proxy: ism_proxy(encoder, &generated, &subject.train)?,
        artifact_energy: artifact_energy(&generated)?,
        recon_error: recon_error(&victim, sched, &subject.held_out, Some(subject.id), cfg.recon_draws, victim_seed)?,
    };
    Ok((report, victim))
}

/// Compares a victim fine-tuned on the clean training images with one
/// fine-tuned on the perturbed images. Without a perturbation both arms
/// train on clean images.
pub fn evaluate_protection(
    base: &Denoiser,
    sched: &NoiseSchedule,
    subject: &Subject,
    pert: Option<&Perturbation>,
    encoder: &IdentityEncoder,
    victim_seed: u64,
    cfg: &EvalConfig,
) -> Result<ProtectionReport> {
    let (clean, _) = evaluate_arm(base, sched, subject, &subject.train, encoder, victim_seed, cfg)?;
    let protected = protected_arm(base, sched, subject, pert, encoder, victim_seed, cfg)?;
    Ok(ProtectionReport { clean, protected })
}

/// The protected arm alone, for callers that reuse one clean arm.
pub fn protected_arm(
    base: &Denoiser,
    sched: &NoiseSchedule,
    subject: &Subject,
    pert: Option<&Perturbation>,
    encoder: &IdentityEncoder,
    victim_seed: u64,
    cfg: &EvalConfig,
) -> Result<ArmReport> {
    let images = match pert {
        Some(p) => {
            if p.base() != subject.train.as_slice() {
                return Err(Error::invalid(
                    "evaluate_protection",
                    "perturbation does not belong to the subject's training images",
                ));
            }
            p.perturbed()
        }
        None => subject.train.clone(),
    };
    Ok(evaluate_arm(base, sched, subject, &images, encoder, victim_seed, cfg)?.0)
}
