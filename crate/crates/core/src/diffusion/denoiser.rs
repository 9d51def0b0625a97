//! Small encoder-decoder noise predictor with addressable decoder taps.
//!
//! Layout for a 32x32 single-channel input (channel widths 8/16/32):
//!
//! ```text
//! enc0  conv s2  1 -> 8     32x32 -> 16x16
//! enc1  conv s2  8 -> 16    16x16 -> 8x8
//! enc2  conv s2 16 -> 32     8x8  -> 4x4
//! dec0  conv    32 -> 16     4x4
//! dec1  up + enc1, conv 16 -> 16   8x8
//! dec2  conv    16 -> 8      8x8
//! dec3  up + enc0, conv 8 -> 8     16x16
//! dec4  conv     8 -> 8     16x16
//! dec5  up, conv 8 -> 8     32x32
//! head  concat(dec5, x_t), conv 9 -> 1
//! ```
//!
//! Every conv is followed by an additive projection of the conditioning
//! embedding (sinusoidal timestep + optional subject vector) and a SiLU.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Number of decoder layers, and so of feature taps.
pub const DECODER_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: [usize; 3],
    pub emb_dim: usize,
    /// Rows of the subject-embedding table.
    pub conditions: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: [8, 16, 32],
            emb_dim: 32,
            conditions: 32,
        }
    }
}

/// Decoder features of one forward pass, keyed by decoder layer index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet(pub BTreeMap<usize, Tensor>);

impl FeatureSet {
    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.0.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Graph handles produced by [`Denoiser::forward`].
#[derive(Clone, Debug)]
pub struct DenoiserPass {
    pub eps: Var,
    pub taps: BTreeMap<usize, Var>,
}

/// Parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.0[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: BTreeMap<String, Tensor>,
}

struct LayerSpec {
    name: String,
    cin: usize,
    cout: usize,
}

fn layer_specs(cfg: &DenoiserConfig) -> Vec<LayerSpec> {
    let [c0, c1, c2] = cfg.channels;
    let spec = |name: &str, cin, cout| LayerSpec {
        name: name.to_string(),
        cin,
        cout,
    };
    vec![
        spec("enc0", 1, c0),
        spec("enc1", c0, c1),
        spec("enc2", c1, c2),
        spec("dec0", c2, c1),
        spec("dec1", c1, c1),
        spec("dec2", c1, c0),
        spec("dec3", c0, c0),
        spec("dec4", c0, c0),
        spec("dec5", c0, c0),
    ]
}

impl Denoiser {
    /// Randomly initialised model (He-normal convolutions, zero subject table).
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, rng: &mut R) -> Self {
        let mut params = BTreeMap::new();
        let d = cfg.emb_dim;
        let mut normal = |shape: Vec<usize>, std: f64| {
            Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        params.insert("emb.w".into(), normal(vec![d, d], (1.0 / d as f64).sqrt()));
        params.insert("emb.b".into(), Tensor::zeros(vec![d]));
        for spec in layer_specs(&cfg) {
            let fan_in = (spec.cin * 9) as f64;
            params.insert(
                format!("{}.conv", spec.name),
                normal(vec![spec.cout, spec.cin, 3, 3], (2.0 / fan_in).sqrt()),
            );
            params.insert(
                format!("{}.proj.w", spec.name),
                normal(vec![d, spec.cout], (1.0 / d as f64).sqrt()),
            );
            params.insert(format!("{}.proj.b", spec.name), Tensor::zeros(vec![spec.cout]));
        }
        let c0 = cfg.channels[0];
        params.insert(
            "head.conv".into(),
            normal(vec![1, c0 + 1, 3, 3], (1.0 / ((c0 + 1) * 9) as f64).sqrt()),
        );
        params.insert("head.b".into(), Tensor::zeros(vec![1]));
        params.insert("cond.table".into(), Tensor::zeros(vec![cfg.conditions, d]));
        Self { cfg, params }
    }

    /// Rebuilds a model from named parameters, inferring the configuration
    /// from their shapes. Parameters do not fix the image size; it defaults
    /// to 32 and can be changed with [`Denoiser::with_image_size`].
    pub fn from_params(params: BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))
        };
        let table = get("cond.table")?;
        let c0 = get("enc0.conv")?.shape()[0];
        let c1 = get("enc1.conv")?.shape()[0];
        let c2 = get("enc2.conv")?.shape()[0];
        let cfg = DenoiserConfig {
            image_size: 32,
            channels: [c0, c1, c2],
            emb_dim: table.shape()[1],
            conditions: table.shape()[0],
        };
        let reference = Self::new(cfg.clone(), &mut crate::rng::seeded(0));
        for (name, t) in &reference.params {
            if get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    params[name].shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        Ok(Self { cfg, params })
    }

    /// Same weights, generating `size x size` images. The network is fully
    /// convolutional, so only sampling depends on the size.
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.cfg.image_size = size;
        self
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Puts every parameter into `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|(k, t)| {
                    let v = if trainable {
                        g.leaf(t.clone())
                    } else {
                        g.constant(t.clone())
                    };
                    (k.clone(), v)
                })
                .collect(),
        )
    }

    /// Spatial size of each decoder tap for the configured image size.
    pub fn tap_resolutions(&self) -> [usize; DECODER_LAYERS] {
        let s = self.cfg.image_size;
        [s / 8, s / 4, s / 4, s / 2, s / 2, s]
    }

    /// Predicts the noise in `x_t` (shape `[N, 1, S, S]`). `timesteps` and
    /// `conds` carry one entry per batch item. When `capture` is set, every
    /// decoder layer output is returned as a tap.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_t: Var,
        timesteps: &[usize],
        conds: &[Option<usize>],
        capture: bool,
    ) -> Result<DenoiserPass> {
        let xs = g.shape(x_t).to_vec();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != xs[3] || xs[2] == 0 || !xs[2].is_multiple_of(8) {
            return Err(Error::invalid(
                "denoiser",
                format!("expected [N, 1, S, S] input with S a multiple of 8, got {xs:?}"),
            ));
        }
        let n = xs[0];
        if timesteps.len() != n || conds.len() != n {
            return Err(Error::invalid(
                "denoiser",
                format!(
                    "batch of {n} needs as many timesteps and conditions, got {} and {}",
                    timesteps.len(),
                    conds.len()
                ),
            ));
        }
        let temb = g.constant(timestep_embedding(timesteps, self.cfg.emb_dim));
        let cemb = g.select_rows(p.get("cond.table"), conds)?;
        let e = g.add(temb, cemb)?;
        let e = g.matmul(e, p.get("emb.w"))?;
        let e = g.row_add(e, p.get("emb.b"))?;
        let h = g.silu(e);

        let layer = |g: &mut Graph, name: &str, input: Var, stride: usize| -> Result<Var> {
            let y = g.conv2d(input, p.get(&format!("{name}.conv")), stride, 1)?;
            let proj = g.matmul(h, p.get(&format!("{name}.proj.w")))?;
            let proj = g.row_add(proj, p.get(&format!("{name}.proj.b")))?;
            let y = g.channel_add(y, proj)?;
            Ok(g.silu(y))
        };

        let e0 = layer(g, "enc0", x_t, 2)?;
        let e1 = layer(g, "enc1", e0, 2)?;
        let e2 = layer(g, "enc2", e1, 2)?;

        let mut taps = BTreeMap::new();
        let mut tap = |i: usize, v: Var| {
            if capture {
                taps.insert(i, v);
            }
            v
        };
        let d0 = layer(g, "dec0", e2, 1)?;
        let d0 = tap(0, d0);
        let u = g.upsample2x(d0)?;
        let u = g.add(u, e1)?;
        let d1 = layer(g, "dec1", u, 1)?;
        let d1 = tap(1, d1);
        let d2 = layer(g, "dec2", d1, 1)?;
        let d2 = tap(2, d2);
        let u = g.upsample2x(d2)?;
        let u = g.add(u, e0)?;
        let d3 = layer(g, "dec3", u, 1)?;
        let d3 = tap(3, d3);
        let d4 = layer(g, "dec4", d3, 1)?;
        let d4 = tap(4, d4);
        let u = g.upsample2x(d4)?;
        let d5 = layer(g, "dec5", u, 1)?;
        let d5 = tap(5, d5);

        let cat = g.concat_channels(d5, x_t)?;
        let out = g.conv2d(cat, p.get("head.conv"), 1, 1)?;
        let eps = g.channel_add(out, p.get("head.b"))?;
        Ok(DenoiserPass { eps, taps })
    }

    /// Noise prediction for a batch at one timestep, no gradient tracking.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: Option<usize>) -> Result<Tensor> {
        let (eps, _) = self.run(x_t, t, cond, false)?;
        Ok(eps)
    }

    /// Noise prediction plus every decoder layer output.
    pub fn denoise_with_features(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<usize>,
    ) -> Result<(Tensor, FeatureSet)> {
        self.run(x_t, t, cond, true)
    }

    fn run(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<usize>,
        capture: bool,
    ) -> Result<(Tensor, FeatureSet)> {
        let x_t = as_batch(x_t)?;
        let n = x_t.batch();
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(x_t);
        let pass = self.forward(&mut g, &p, x, &vec![t; n], &vec![cond; n], capture)?;
        let feats = pass
            .taps
            .iter()
            .map(|(&i, &v)| (i, g.value(v).clone()))
            .collect();
        Ok((g.value(pass.eps).clone(), FeatureSet(feats)))
    }
}

/// Accepts `[1, S, S]` or `[N, 1, S, S]` image tensors and returns the batched form.
pub fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        4 => Ok(x.clone()),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            x.clone().reshape(shape)
        }
        _ => Err(Error::invalid(
            "denoiser",
            format!("expected an image or image batch, got shape {:?}", x.shape()),
        )),
    }
}

/// Stacks `[1, S, S]` images into an `[N, 1, S, S]` batch.
pub fn batch_images(images: &[&Tensor]) -> Result<Tensor> {
    let items: Vec<Tensor> = images.iter().map(|t| as_batch(t)).collect::<Result<_>>()?;
    Tensor::stack(&items)
}

/// Sinusoidal embedding: first half sines, second half cosines, geometric
/// frequencies from 1 down to 1/10000.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; timesteps.len() * dim];
    for (row, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[row * dim + i] = arg.sin();
            out[row * dim + half + i] = arg.cos();
        }
    }
    Tensor::new(vec![timesteps.len(), dim], out).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn model() -> Denoiser {
        Denoiser::new(DenoiserConfig::default(), &mut seeded(3))
    }

    #[test]
    fn output_matches_input_shape() {
        let m = model();
        let x = Tensor::uniform(vec![2, 1, 32, 32], 0.0, 1.0, &mut seeded(4));
        let eps = m.predict(&x, 10, Some(1)).unwrap();
        assert_eq!(eps.shape(), x.shape());
    }

    #[test]
    fn taps_cover_every_layer_with_growing_resolution() {
        let m = model();
        let x = Tensor::uniform(vec![1, 32, 32], 0.0, 1.0, &mut seeded(5));
        let (_, feats) = m.denoise_with_features(&x, 500, None).unwrap();
        assert_eq!(feats.len(), DECODER_LAYERS);
        assert_eq!(feats.layers().collect::<Vec<_>>(), (0..DECODER_LAYERS).collect::<Vec<_>>());
        let res: Vec<usize> = (0..DECODER_LAYERS).map(|l| feats.get(l).unwrap().shape()[2]).collect();
        assert!(res.windows(2).all(|w| w[0] <= w[1]), "{res:?}");
        assert_eq!(res, m.tap_resolutions());
    }

    #[test]
    fn capture_does_not_change_prediction() {
        let m = model();
        let x = Tensor::uniform(vec![1, 32, 32], 0.0, 1.0, &mut seeded(6));
        let plain = m.predict(&x, 123, Some(0)).unwrap();
        let (tapped, _) = m.denoise_with_features(&x, 123, Some(0)).unwrap();
        let same = plain
            .data()
            .iter()
            .zip(tapped.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn features_depend_on_timestep() {
        let m = model();
        let x = Tensor::uniform(vec![1, 32, 32], 0.0, 1.0, &mut seeded(7));
        let (_, a) = m.denoise_with_features(&x, 100, None).unwrap();
        let (_, b) = m.denoise_with_features(&x, 800, None).unwrap();
        for l in 0..DECODER_LAYERS {
            assert_ne!(a.get(l), b.get(l), "layer {l}");
        }
    }

    #[test]
    fn rejects_wrong_input() {
        let m = model();
        assert!(m.predict(&Tensor::zeros(vec![1, 12, 12]), 0, None).is_err());
        assert!(m.predict(&Tensor::zeros(vec![1, 16, 32]), 0, None).is_err());
        assert_eq!(m.predict(&Tensor::zeros(vec![1, 16, 16]), 0, None).unwrap().shape(), &[1, 1, 16, 16]);
        assert!(m.predict(&Tensor::zeros(vec![1, 32, 32]), 0, Some(99)).is_err());
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(&[0], 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
