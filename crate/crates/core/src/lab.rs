//! Experiment stages wired to an [`ExperimentConfig`]: the same steps the
//! command line runs, with the seed-to-stream mapping fixed in one place.

use crate::config::ExperimentConfig;
use crate::diffusion::{train, Denoiser, DenoiserConfig, NoiseSchedule, TrainItem};
use crate::error::{Error, Result};
use crate::eval::{synth_corpus, train_identity_encoder, Corpus, IdentityEncoder, Subject};
use crate::rng::{stream, Stream};

pub fn corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    synth_corpus(cfg.data.subjects, cfg.data.per_subject, &mut stream(cfg.seed, Stream::Dataset))
}

/// Training images of subjects `0..base_subjects`, each bound to its id.
pub fn base_items(cfg: &ExperimentConfig, corpus: &Corpus) -> Vec<TrainItem> {
    corpus
        .subjects
        .iter()
        .filter(|s| s.id < cfg.data.base_subjects)
        .flat_map(|s| {
            s.train.iter().map(|im| TrainItem {
                image: im.clone(),
                cond: Some(s.id),
            })
        })
        .collect()
}

/// Initialises and trains a base model from the base stream of `seed`.
/// Returns the model and its per-step loss.
pub fn train_base(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64) -> Result<(Denoiser, Vec<f64>)> {
    let items = base_items(cfg, corpus);
    let size = items
        .first()
        .map(|it| it.image.shape()[1])
        .ok_or_else(|| Error::invalid("train_base", "no base subjects"))?;
    let mcfg = DenoiserConfig {
        image_size: size,
        ..DenoiserConfig::default()
    };
    if corpus.subjects.len() > mcfg.conditions {
        return Err(Error::invalid(
            "train_base",
            format!("{} subjects exceed {} condition slots", corpus.subjects.len(), mcfg.conditions),
        ));
    }
    let mut rng = stream(seed, Stream::Base);
    let mut model = Denoiser::new(mcfg, &mut rng);
    let losses = train(&mut model, &NoiseSchedule::standard(), &items, &cfg.train, &mut rng)?;
    Ok((model, losses))
}

pub fn encoder(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<IdentityEncoder> {
    train_identity_encoder(corpus, &cfg.encoder, &mut stream(cfg.seed, Stream::Encoder))
}

pub fn protect_subject<'a>(cfg: &ExperimentConfig, corpus: &'a Corpus) -> Result<&'a Subject> {
    corpus.subject(cfg.data.protect_subject)
}
