use crate::diffusion::DECODER_LAYERS;
use crate::error::Result;
use crate::kv::{cfg_err, KvDoc, KvWriter};

/// Settings of one protection run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// L-infinity budget as a fraction of the `[0, 1]` pixel range.
    pub eta: f64,
    /// Signed-gradient step size, shared by PGD and the greedy search.
    pub alpha: f64,
    pub epochs: usize,
    pub surrogate_steps_per_epoch: usize,
    pub attack_steps_per_epoch: usize,
    /// Weight of the feature interference term.
    pub lambda: f64,
    /// Decoder layers compared by the feature interference term.
    pub tap_layers: Vec<usize>,
    /// Iteration cap of the adaptive timestep search.
    pub search_steps: usize,
    pub selection_enabled: bool,
    /// Learning rate of the surrogate's alternating training steps.
    pub surrogate_lr: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eta: 16.0 / 255.0,
            alpha: 0.005,
            epochs: 50,
            surrogate_steps_per_epoch: 3,
            attack_steps_per_epoch: 9,
            lambda: 1.0,
            tap_layers: vec![4, 5],
            search_steps: 50,
            selection_enabled: true,
            surrogate_lr: 1e-4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(cfg_err("eta", "must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(cfg_err("alpha", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(cfg_err("lambda", "must be non-negative"));
        }
        if let Some(&l) = self.tap_layers.iter().find(|&&l| l >= DECODER_LAYERS) {
            return Err(cfg_err(
                "tap_layers",
                format!("layer {l} outside 0..{DECODER_LAYERS}"),
            ));
        }
        if self.lambda > 0.0 && self.tap_layers.is_empty() {
            return Err(cfg_err("tap_layers", "needed when lambda > 0"));
        }
        Ok(())
    }

    /// Reads the keys this struct owns from `doc`, keeping defaults for
    /// absent ones.
    pub fn take_from(doc: &mut KvDoc) -> Result<Self> {
        let mut c = Self::default();
        if let Some(v) = doc.take_f64("eta")? {
            c.eta = v;
        }
        if let Some(v) = doc.take_f64("alpha")? {
            c.alpha = v;
        }
        if let Some(v) = doc.take_usize("epochs")? {
            c.epochs = v;
        }
        if let Some(v) = doc.take_usize("surrogate_steps_per_epoch")? {
            c.surrogate_steps_per_epoch = v;
        }
        if let Some(v) = doc.take_usize("attack_steps_per_epoch")? {
            c.attack_steps_per_epoch = v;
        }
        if let Some(v) = doc.take_f64("lambda")? {
            c.lambda = v;
        }
        if let Some(v) = doc.take_usize_list("tap_layers")? {
            c.tap_layers = v;
        }
        if let Some(v) = doc.take_usize("search_steps")? {
            c.search_steps = v;
        }
        if let Some(v) = doc.take_bool("selection_enabled")? {
            c.selection_enabled = v;
        }
        if let Some(v) = doc.take_f64("surrogate_lr")? {
            c.surrogate_lr = v;
        }
        if let Some(v) = doc.take_u64("seed")? {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let c = Self::take_from(&mut doc)?;
        doc.finish()?;
        Ok(c)
    }

    pub fn write_into(&self, w: &mut KvWriter) {
        self.write_fields(w);
        w.put("seed", self.seed);
    }

    /// Every key except `seed`.
    pub fn write_fields(&self, w: &mut KvWriter) {
        w.put_f64("eta", self.eta)
            .put_f64("alpha", self.alpha)
            .put("epochs", self.epochs)
            .put("surrogate_steps_per_epoch", self.surrogate_steps_per_epoch)
            .put("attack_steps_per_epoch", self.attack_steps_per_epoch)
            .put_f64("lambda", self.lambda)
            .put_list("tap_layers", &self.tap_layers)
            .put("search_steps", self.search_steps)
            .put("selection_enabled", self.selection_enabled)
            .put_f64("surrogate_lr", self.surrogate_lr);
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("protection run");
        self.write_into(&mut w);
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = AttackConfig::default();
        assert_eq!(AttackConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_rational_budget() {
        let c = AttackConfig::parse("eta = 16/255\ntap_layers = 3,4,5\n").unwrap();
        assert_eq!(c.eta, 16.0 / 255.0);
        assert_eq!(c.tap_layers, vec![3, 4, 5]);
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(AttackConfig::parse("eta = 0").is_err());
        assert!(AttackConfig::parse("lambda = -1").is_err());
        assert!(AttackConfig::parse("tap_layers = 9").is_err());
        assert!(AttackConfig::parse("bogus = 1").is_err());
    }
}
