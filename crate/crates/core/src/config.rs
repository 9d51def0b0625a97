//! Whole-experiment configuration as one flat `key = value` file.
//!
//! `seed` is required; every other key falls back to its default. Unknown
//! keys are rejected.

use crate::analysis::SpectrumStat;
use crate::attack::AttackConfig;
use crate::diffusion::TrainConfig;
use crate::error::Result;
use crate::eval::{tap_group, AblationGrid, EncoderConfig, EvalConfig};
use crate::kv::{cfg_err, require, KvDoc, KvWriter};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub subjects: usize,
    pub per_subject: usize,
    /// Subjects `0..base_subjects` train the base model; the rest stay
    /// unseen by it.
    pub base_subjects: usize,
    /// Subject whose images are protected and fine-tuned on.
    pub protect_subject: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            subjects: 20,
            per_subject: 5,
            base_subjects: 16,
            protect_subject: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub grad_buckets: usize,
    pub grad_samples: usize,
    pub grad_threshold: f64,
    /// Inclusive timestep ranges.
    pub freq_ranges: Vec<(usize, usize)>,
    pub freq_samples: usize,
    pub spectrum: SpectrumStat,
    pub pca_timesteps: Vec<usize>,
    pub pca_layers: Vec<usize>,
    pub pca_components: usize,
    pub theorem1_seeds: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            grad_buckets: 10,
            grad_samples: 8,
            grad_threshold: 1e-10,
            freq_ranges: vec![(0, 100), (700, 800)],
            freq_samples: 100,
            spectrum: SpectrumStat::Amplitude,
            pca_timesteps: vec![150, 350, 550, 750],
            pca_layers: vec![0, 1, 2, 3, 4, 5],
            pca_components: 3,
            theorem1_seeds: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seed of the independently trained victim base model.
    pub victim_seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub encoder: EncoderConfig,
    pub analysis: AnalysisConfig,
    pub ablation: AblationGrid,
}

impl ExperimentConfig {
    /// Defaults for every key, with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            victim_seed: seed.wrapping_add(1),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig {
                seed,
                ..AttackConfig::default()
            },
            eval: EvalConfig::default(),
            encoder: EncoderConfig::default(),
            analysis: AnalysisConfig::default(),
            ablation: AblationGrid::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_seed(text, None)
    }

    /// Parses `text` with `seed` replacing its seed, which then becomes
    /// optional. Keys derived from the seed follow the override.
    pub fn parse_with_seed(text: &str, seed: Option<u64>) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let own = doc.take_u64("seed")?;
        let seed = match seed {
            Some(s) => s,
            None => require("seed", own)?,
        };
        let mut c = Self::with_seed(seed);
        if let Some(v) = doc.take_u64("victim_seed")? {
            c.victim_seed = v;
        }

        let d = &mut c.data;
        set(&mut d.subjects, doc.take_usize("subjects")?);
        set(&mut d.per_subject, doc.take_usize("per_subject")?);
        set(&mut d.base_subjects, doc.take_usize("base_subjects")?);
        set(&mut d.protect_subject, doc.take_usize("protect_subject")?);

        let t = &mut c.train;
        set(&mut t.steps, doc.take_usize("base_steps")?);
        set(&mut t.lr, doc.take_f64("base_lr")?);
        set(&mut t.batch_size, doc.take_usize("base_batch")?);
        set(&mut t.uncond_prob, doc.take_f64("uncond_prob")?);

        c.attack = AttackConfig {
            seed,
            ..AttackConfig::take_from(&mut doc)?
        };

        let e = &mut c.eval;
        set(&mut e.finetune_steps, doc.take_usize("finetune_steps")?);
        set(&mut e.finetune_lr, doc.take_f64("finetune_lr")?);
        set(&mut e.samples, doc.take_usize("samples")?);
        set(&mut e.recon_draws, doc.take_usize("recon_draws")?);

        let en = &mut c.encoder;
        set(&mut en.steps, doc.take_usize("encoder_steps")?);
        set(&mut en.batch_size, doc.take_usize("encoder_batch")?);
        set(&mut en.lr, doc.take_f64("encoder_lr")?);

        let a = &mut c.analysis;
        set(&mut a.grad_buckets, doc.take_usize("grad_buckets")?);
        set(&mut a.grad_samples, doc.take_usize("grad_samples")?);
        set(&mut a.grad_threshold, doc.take_f64("grad_threshold")?);
        if let Some(v) = doc.take_usize_list("freq_ranges")? {
            if v.len() % 2 != 0 || v.chunks(2).any(|p| p[0] > p[1]) {
                return Err(cfg_err("freq_ranges", "expected lo,hi pairs with lo <= hi"));
            }
            a.freq_ranges = v.chunks(2).map(|p| (p[0], p[1])).collect();
        }
        set(&mut a.freq_samples, doc.take_usize("freq_samples")?);
        if let Some(v) = doc.take_raw("spectrum") {
            a.spectrum = SpectrumStat::parse(&v).map_err(|_| cfg_err("spectrum", "expected amplitude or power"))?;
        }
        set(&mut a.pca_timesteps, doc.take_usize_list("pca_timesteps")?);
        set(&mut a.pca_layers, doc.take_usize_list("pca_layers")?);
        set(&mut a.pca_components, doc.take_usize("pca_components")?);
        set(&mut a.theorem1_seeds, doc.take_usize("theorem1_seeds")?);

        let g = &mut c.ablation;
        set(&mut g.etas, doc.take_f64_list("ablate_etas")?);
        set(&mut g.lambdas, doc.take_f64_list("ablate_lambdas")?);
        set(&mut g.epochs, doc.take_usize_list("ablate_epochs")?);
        set(&mut g.selection, doc.take_bool_list("ablate_selection")?);
        if let Some(v) = doc.take_raw("ablate_taps") {
            g.tap_groups = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        doc.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.subjects < 2 {
            return Err(cfg_err("subjects", "need at least 2"));
        }
        if d.per_subject < 4 {
            return Err(cfg_err("per_subject", "need at least 4"));
        }
        if d.base_subjects == 0 || d.base_subjects > d.subjects {
            return Err(cfg_err("base_subjects", "must lie in 1..=subjects"));
        }
        if d.protect_subject >= d.subjects {
            return Err(cfg_err("protect_subject", "no such subject"));
        }
        if !(0.0..=1.0).contains(&self.train.uncond_prob) {
            return Err(cfg_err("uncond_prob", "must lie in [0, 1]"));
        }
        if self.analysis.grad_buckets == 0 {
            return Err(cfg_err("grad_buckets", "must be positive"));
        }
        if self.analysis.pca_components == 0 {
            return Err(cfg_err("pca_components", "must be positive"));
        }
        for g in &self.ablation.tap_groups {
            tap_group(g).map_err(|_| cfg_err("ablate_taps", format!("unknown group `{g}`")))?;
        }
        self.attack.validate()
    }

    /// Canonical text; `parse(dump(c)) == c`.
    pub fn dump(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("experiment").put("seed", self.seed).put("victim_seed", self.victim_seed);
        let d = &self.data;
        w.comment("data")
            .put("subjects", d.subjects)
            .put("per_subject", d.per_subject)
            .put("base_subjects", d.base_subjects)
            .put("protect_subject", d.protect_subject);
        let t = &self.train;
        w.comment("base model")
            .put("base_steps", t.steps)
            .put_f64("base_lr", t.lr)
            .put("base_batch", t.batch_size)
            .put_f64("uncond_prob", t.uncond_prob);
        w.comment("protection");
        self.attack.write_fields(&mut w);
        let e = &self.eval;
        w.comment("victim")
            .put("finetune_steps", e.finetune_steps)
            .put_f64("finetune_lr", e.finetune_lr)
            .put("samples", e.samples)
            .put("recon_draws", e.recon_draws);
        let en = &self.encoder;
        w.comment("identity encoder")
            .put("encoder_steps", en.steps)
            .put("encoder_batch", en.batch_size)
            .put_f64("encoder_lr", en.lr);
        let a = &self.analysis;
        let ranges: Vec<usize> = a.freq_ranges.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
        w.comment("analysis")
            .put("grad_buckets", a.grad_buckets)
            .put("grad_samples", a.grad_samples)
            .put_f64("grad_threshold", a.grad_threshold)
            .put_list("freq_ranges", &ranges)
            .put("freq_samples", a.freq_samples)
            .put("spectrum", a.spectrum.as_str())
            .put_list("pca_timesteps", &a.pca_timesteps)
            .put_list("pca_layers", &a.pca_layers)
            .put("pca_components", a.pca_components)
            .put("theorem1_seeds", a.theorem1_seeds);
        let g = &self.ablation;
        w.comment("ablation grid")
            .put_f64_list("ablate_etas", &g.etas)
            .put_f64_list("ablate_lambdas", &g.lambdas)
            .put_list("ablate_epochs", &g.epochs)
            .put_list("ablate_selection", &g.selection)
            .put_list("ablate_taps", &g.tap_groups);
        w.finish()
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let err = ExperimentConfig::parse("eta = 16/255").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn dump_parse_fixed_point() {
        let c = ExperimentConfig::with_seed(42);
        let text = c.dump();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dump(), text);
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        assert!(ExperimentConfig::parse("seed = 1\nbogus = 2").is_err());
        assert!(ExperimentConfig::parse("seed = x").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nsamples = -3").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nfreq_ranges = 1,2,3").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nablate_taps = deepest").is_err());
    }

    #[test]
    fn seed_override() {
        let c = ExperimentConfig::parse_with_seed("seed = 1\nsamples = 3", Some(9)).unwrap();
        assert_eq!((c.seed, c.victim_seed, c.attack.seed, c.eval.samples), (9, 10, 9, 3));
        assert_eq!(ExperimentConfig::parse_with_seed("", Some(2)).unwrap(), ExperimentConfig::with_seed(2));
    }

    #[test]
    fn rational_budget() {
        let c = ExperimentConfig::parse("seed = 3\neta = 16/255\nablate_etas = 4/255, 8/255").unwrap();
        assert_eq!(c.attack.eta, 16.0 / 255.0);
        assert_eq!(c.attack.seed, 3);
        assert_eq!(c.ablation.etas, vec![4.0 / 255.0, 8.0 / 255.0]);
    }
}
