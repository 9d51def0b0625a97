//! Small convolutional subject classifier whose penultimate activations
//! serve as identity embeddings.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::batch_images;
use crate::error::{Error, Result};
use crate::eval::subject::Corpus;
use crate::graph::{Graph, Var};
use crate::optim::Adam;
use crate::rng::LabRng;
use crate::tensor::Tensor;

pub const EMBEDDING_DIM: usize = 32;
/// Minimum held-out top-1 accuracy of a usable encoder.
pub const ACCURACY_FLOOR: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            lr: 3e-3,
        }
    }
}

/// Frozen classifier over subject ids.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEncoder {
    params: BTreeMap<String, Tensor>,
    /// Subject id of each output class.
    classes: Vec<usize>,
    /// Held-out top-1 accuracy measured after training.
    pub accuracy: f64,
}

const CONVS: [(&str, usize, usize); 3] = [("c0", 1, 8), ("c1", 8, 16), ("c2", 16, 16)];
const FLAT: usize = 16 * 4 * 4;

struct Pass {
    embedding: Var,
    logits: Var,
}

impl IdentityEncoder {
    fn init(classes: Vec<usize>, rng: &mut LabRng) -> Self {
        let mut params = BTreeMap::new();
        let mut normal = |shape: Vec<usize>, fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        for (name, cin, cout) in CONVS {
            params.insert(format!("{name}.w"), normal(vec![cout, cin, 3, 3], cin * 9));
            params.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
        }
        params.insert("emb.w".into(), normal(vec![FLAT, EMBEDDING_DIM], FLAT));
        params.insert("emb.b".into(), Tensor::zeros(vec![EMBEDDING_DIM]));
        params.insert("cls.w".into(), normal(vec![EMBEDDING_DIM, classes.len()], EMBEDDING_DIM));
        params.insert("cls.b".into(), Tensor::zeros(vec![classes.len()]));
        Self {
            params,
            classes,
            accuracy: 0.0,
        }
    }

    fn forward(&self, g: &mut Graph, vars: &BTreeMap<String, Var>, x: Var) -> Result<Pass> {
        let mut h = x;
        for (name, _, _) in CONVS {
            h = g.conv2d(h, vars[&format!("{name}.w")], 2, 1)?;
            h = g.channel_add(h, vars[&format!("{name}.b")])?;
            h = g.silu(h);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, vec![n, FLAT])?;
        let e = g.matmul(flat, vars["emb.w"])?;
        let embedding = g.row_add(e, vars["emb.b"])?;
        let a = g.silu(embedding);
        let l = g.matmul(a, vars["cls.w"])?;
        let logits = g.row_add(l, vars["cls.b"])?;
        Ok(Pass { embedding, logits })
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Unit-norm embeddings of `[1, S, S]` images.
    pub fn embed(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (emb, _) = self.run(images)?;
        Ok(emb.data().chunks(EMBEDDING_DIM).map(normalize).collect())
    }

    /// Predicted subject id of each image.
    pub fn classify(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (_, logits) = self.run(images)?;
        let k = self.classes.len();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).expect("classes");
                self.classes[best]
            })
            .collect())
    }

    fn run(&self, images: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let x = batch_images(&images.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x);
        let p = self.forward(&mut g, &vars, xv)?;
        Ok((g.value(p.embedding).clone(), g.value(p.logits).clone()))
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|a| a / n).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Trains on every subject's training images and scores top-1 accuracy on
/// the held-out images. Fails when accuracy is below [`ACCURACY_FLOOR`].
pub fn train_identity_encoder(corpus: &Corpus, cfg: &EncoderConfig, rng: &mut LabRng) -> Result<IdentityEncoder> {
    if corpus.subjects.len() < 2 {
        return Err(Error::invalid("identity_encoder", "need at least two subjects"));
    }
    let classes: Vec<usize> = corpus.subjects.iter().map(|s| s.id).collect();
    let data: Vec<(&Tensor, usize)> = corpus
        .subjects
        .iter()
        .enumerate()
        .flat_map(|(c, s)| s.train.iter().map(move |im| (im, c)))
        .collect();
    let mut enc = IdentityEncoder::init(classes, rng);
    let mut opt = Adam::new(cfg.lr);
    for _ in 0..cfg.steps {
        let picks: Vec<(&Tensor, usize)> = (0..cfg.batch_size.max(1))
            .map(|_| data[rng.gen_range(0..data.len())])
            .collect();
        let x = batch_images(&picks.iter().map(|p| p.0).collect::<Vec<_>>())?;
        let labels: Vec<usize> = picks.iter().map(|p| p.1).collect();
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, true);
        let xv = g.constant(x);
        let p = enc.forward(&mut g, &vars, xv)?;
        let loss = g.cross_entropy(p.logits, &labels)?;
        let mut grads = g.backward(loss)?;
        let named: BTreeMap<String, Tensor> = vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect();
        opt.step(&mut enc.params, &named);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in &corpus.subjects {
        let pred = enc.classify(&s.held_out)?;
        correct += pred.iter().filter(|&&p| p == s.id).count();
        total += pred.len();
    }
    enc.accuracy = correct as f64 / total.max(1) as f64;
    if enc.accuracy < ACCURACY_FLOOR {
        return Err(Error::EncoderAccuracy {
            accuracy: enc.accuracy,
            floor: ACCURACY_FLOOR,
        });
    }
    Ok(enc)
}
