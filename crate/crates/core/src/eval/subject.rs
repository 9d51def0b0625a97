//! Procedural subjects: each identity is a fixed arrangement of Gaussian
//! blobs over an oriented stripe texture. Images of one subject differ only
//! by a small translation and pixel noise.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::LabRng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
/// Held-out images drawn per subject in addition to the training images.
pub const HELD_OUT: usize = 4;
/// Largest translation in pixels along each axis.
pub const MAX_JITTER: f64 = 2.0;
/// Standard deviation of the additive pixel noise.
pub const PIXEL_NOISE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Generator parameters of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectParams {
    pub blobs: Vec<Blob>,
    /// Cycles per pixel.
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub stripe_phase: f64,
    pub stripe_amplitude: f64,
    pub contrast: f64,
    pub background: f64,
}

impl SubjectParams {
    pub fn random(rng: &mut LabRng) -> Self {
        let n_blobs = rng.gen_range(2..=3);
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                x: rng.gen_range(7.0..25.0),
                y: rng.gen_range(7.0..25.0),
                sigma: rng.gen_range(2.5..5.0),
                amplitude: if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.5..1.0),
            })
            .collect();
        Self {
            blobs,
            stripe_freq: rng.gen_range(0.05..0.15),
            stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
            stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            stripe_amplitude: rng.gen_range(0.1..0.25),
            contrast: rng.gen_range(0.25..0.4),
            background: rng.gen_range(0.35..0.65),
        }
    }

    /// Noise-free rendering shifted by `(dx, dy)` pixels, clamped to `[0, 1]`.
    pub fn render(&self, dx: f64, dy: f64) -> Tensor {
        let s = IMAGE_SIZE;
        let (ca, sa) = (self.stripe_angle.cos(), self.stripe_angle.sin());
        Tensor::from_fn(vec![1, s, s], |i| {
            let (py, px) = ((i / s) as f64 - dy, (i % s) as f64 - dx);
            let mut v = 0.0;
            for b in &self.blobs {
                let r2 = (px - b.x).powi(2) + (py - b.y).powi(2);
                v += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            let u = px * ca + py * sa;
            v += self.stripe_amplitude * (std::f64::consts::TAU * self.stripe_freq * u + self.stripe_phase).sin();
            (self.background + self.contrast * v).clamp(0.0, 1.0)
        })
    }

    /// One jittered, noisy image.
    pub fn draw(&self, rng: &mut LabRng) -> Tensor {
        let dx = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
        let dy = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
        let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid normal");
        let mut im = self.render(dx, dy);
        for v in im.data_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
        im
    }

    pub fn describe(&self) -> String {
        let mut out = format!(
            "stripe_freq={:.4} stripe_angle={:.4} stripe_phase={:.4} stripe_amplitude={:.4} contrast={:.4} background={:.4}",
            self.stripe_freq, self.stripe_angle, self.stripe_phase, self.stripe_amplitude, self.contrast, self.background
        );
        for b in &self.blobs {
            let _ = write!(out, " blob=({:.3},{:.3},{:.3},{:.3})", b.x, b.y, b.sigma, b.amplitude);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: usize,
    /// Absent for subjects read back from disk.
    pub params: Option<SubjectParams>,
    pub train: Vec<Tensor>,
    pub held_out: Vec<Tensor>,
}

/// A new identity with `per_subject` training and [`HELD_OUT`] held-out images.
pub fn synth_subject(id: usize, per_subject: usize, rng: &mut LabRng) -> Subject {
    let params = SubjectParams::random(rng);
    let train = (0..per_subject).map(|_| params.draw(rng)).collect();
    let held_out = (0..HELD_OUT).map(|_| params.draw(rng)).collect();
    Subject {
        id,
        params: Some(params),
        train,
        held_out,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub subjects: Vec<Subject>,
}

/// `n_subjects` identities with ids `0..n_subjects`.
pub fn synth_corpus(n_subjects: usize, per_subject: usize, rng: &mut LabRng) -> Result<Corpus> {
    if n_subjects == 0 {
        return Err(Error::invalid("synth_corpus", "need at least one subject"));
    }
    if per_subject < 4 {
        return Err(Error::invalid("synth_corpus", "need at least 4 training images per subject"));
    }
    Ok(Corpus {
        subjects: (0..n_subjects).map(|id| synth_subject(id, per_subject, rng)).collect(),
    })
}

impl Corpus {
    pub fn subject(&self, id: usize) -> Result<&Subject> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::invalid("corpus", format!("no subject {id}")))
    }

    /// Writes `subject_<id>/{train,held}_<i>.tns` plus an `index.txt`.
    /// Returns every written path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut index = String::new();
        for s in &self.subjects {
            let sd = dir.join(format!("subject_{:03}", s.id));
            std::fs::create_dir_all(&sd)?;
            for (kind, list) in [("train", &s.train), ("held", &s.held_out)] {
                for (i, im) in list.iter().enumerate() {
                    let p = sd.join(format!("{kind}_{i:03}.tns"));
                    im.save(&p)?;
                    written.push(p);
                }
            }
            let _ = writeln!(
                index,
                "subject {} train {} held {} {}",
                s.id,
                s.train.len(),
                s.held_out.len(),
                s.params.as_ref().map(SubjectParams::describe).unwrap_or_default()
            );
        }
        let ip = dir.join("index.txt");
        std::fs::write(&ip, index)?;
        written.push(ip);
        Ok(written)
    }

    /// Reads a corpus written by [`Corpus::save`]; generator parameters are
    /// not restored.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = std::fs::read_to_string(dir.join("index.txt"))?;
        let mut subjects = Vec::new();
        for line in index.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let parse = |i: usize| -> Result<usize> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad index line `{line}`")))
            };
            if f.first() != Some(&"subject") {
                return Err(Error::Format(format!("bad index line `{line}`")));
            }
            let (id, n_train, n_held) = (parse(1)?, parse(3)?, parse(5)?);
            let sd = dir.join(format!("subject_{id:03}"));
            let read = |kind: &str, n: usize| -> Result<Vec<Tensor>> {
                (0..n).map(|i| Tensor::load(sd.join(format!("{kind}_{i:03}.tns")))).collect()
            };
            subjects.push(Subject {
                id,
                params: None,
                train: read("train", n_train)?,
                held_out: read("held", n_held)?,
            });
        }
        if subjects.is_empty() {
            return Err(Error::Format("empty corpus index".into()));
        }
        Ok(Self { subjects })
    }
}

/// Root-mean-square pixel distance.
pub fn pixel_distance(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}
