//! Centred 2-D spectra, radial profiles and reconstruction residual spectra.

use std::fmt::Write as _;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::diffusion::{as_batch, mix, predict_x0, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::LabRng;
use crate::tensor::Tensor;

/// A DC-centred spectrum of an `H x W` image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    /// Index of the DC coefficient after centring.
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    /// Largest distance of any coefficient from the centre.
    pub fn max_radius(&self) -> f64 {
        let (cy, cx) = self.center();
        let dy = cy.max(self.height - 1 - cy) as f64;
        let dx = cx.max(self.width - 1 - cx) as f64;
        dy.hypot(dx)
    }

    pub fn radius(&self, row: usize, col: usize) -> f64 {
        let (cy, cx) = self.center();
        (row as f64 - cy as f64).hypot(col as f64 - cx as f64)
    }
}

/// Whether spectra aggregate `|F|` or `|F|^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpectrumStat {
    #[default]
    Amplitude,
    Power,
}

impl SpectrumStat {
    pub fn apply(self, c: Complex64) -> f64 {
        match self {
            SpectrumStat::Amplitude => c.norm(),
            SpectrumStat::Power => c.norm_sqr(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(Self::Amplitude),
            "power" => Ok(Self::Power),
            _ => Err(Error::invalid("spectrum", format!("unknown statistic `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpectrumStat::Amplitude => "amplitude",
            SpectrumStat::Power => "power",
        }
    }
}

/// Unnormalised forward DFT of a `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`
/// tensor with the DC term moved to `(H / 2, W / 2)`.
pub fn fft2d(x: &Tensor) -> Result<Spectrum> {
    let shape = x.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::invalid("fft2d", format!("expected a single image, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < 2 || w < 2 {
        return Err(Error::invalid("fft2d", "height and width must be at least 2"));
    }
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let mut data = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            data[((r + h / 2) % h) * w + (c + w / 2) % w] = buf[r * w + c];
        }
    }
    Ok(Spectrum {
        height: h,
        width: w,
        data,
    })
}

/// Spectral mass per radial bin around the DC term.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    /// `n + 1` increasing radii; bin `i` covers `[edges[i], edges[i + 1])`,
    /// the last bin closed on the right.
    pub bin_edges: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub max_radius: f64,
}

impl RadialSpectrum {
    pub fn total(&self) -> f64 {
        self.magnitudes.iter().sum()
    }

    /// Share of mass in bins starting at or beyond `max_radius / 2`.
    pub fn high_share(&self) -> f64 {
        let cut = self.max_radius / 2.0;
        self.share(|lo, _| lo >= cut)
    }

    /// Share of mass in bins ending at or below `max_radius / 4`.
    pub fn low_share(&self) -> f64 {
        let cut = self.max_radius / 4.0;
        self.share(|_, hi| hi <= cut)
    }

    fn share(&self, keep: impl Fn(f64, f64) -> bool) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        let part: f64 = self
            .magnitudes
            .iter()
            .enumerate()
            .filter(|&(i, _)| keep(self.bin_edges[i], self.bin_edges[i + 1]))
            .map(|(_, m)| m)
            .sum();
        part / total
    }

    /// Bin-wise mean of equally binned profiles.
    pub fn average(items: &[RadialSpectrum]) -> Result<RadialSpectrum> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("radial_profile", "nothing to average"))?;
        let mut mags = vec![0.0; first.magnitudes.len()];
        for it in items {
            if it.bin_edges != first.bin_edges {
                return Err(Error::invalid("radial_profile", "bin edges differ"));
            }
            for (a, m) in mags.iter_mut().zip(&it.magnitudes) {
                *a += m;
            }
        }
        let k = items.len() as f64;
        Ok(RadialSpectrum {
            bin_edges: first.bin_edges.clone(),
            magnitudes: mags.into_iter().map(|m| m / k).collect(),
            max_radius: first.max_radius,
        })
    }
}

/// Number of unit-width rings needed to cover the spectrum.
pub fn ring_count(spec: &Spectrum) -> usize {
    spec.max_radius().floor() as usize + 1
}

/// Sums `stat(F)` into `n_bins` equal-width rings covering radii
/// `0..=floor(max_radius) + 1`. With [`ring_count`] bins each ring is one
/// unit wide, so coefficient `F` lands in bin `floor(r)`.
pub fn radial_profile(spec: &Spectrum, n_bins: usize, stat: SpectrumStat) -> Result<RadialSpectrum> {
    if n_bins < 1 {
        return Err(Error::invalid("radial_profile", "n_bins must be at least 1"));
    }
    let rings = ring_count(spec);
    let width = rings as f64 / n_bins as f64;
    let mut magnitudes = vec![0.0; n_bins];
    for r in 0..spec.height {
        for c in 0..spec.width {
            let ring = spec.radius(r, c).floor() as usize;
            let bin = ((ring * n_bins) / rings).min(n_bins - 1);
            magnitudes[bin] += stat.apply(spec.get(r, c));
        }
    }
    Ok(RadialSpectrum {
        bin_edges: (0..=n_bins).map(|i| i as f64 * width).collect(),
        magnitudes,
        max_radius: spec.max_radius(),
    })
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    /// `x_t` is an `[N, 1, S, S]` batch.
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: Option<usize>) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: Option<usize>) -> Result<Tensor> {
        self.predict(x_t, t, cond)
    }
}

/// Average radial spectrum of the one-shot reconstruction residual in one
/// timestep range.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSpectrum {
    /// Inclusive timestep range.
    pub range: (usize, usize),
    pub samples: usize,
    pub spectrum: RadialSpectrum,
}

pub const RESIDUAL_HEADER: &str = "t_lo,t_hi,samples,bin,r_lo,r_hi,magnitude";

/// For each inclusive range draws `samples` pairs `(t, eps)`, reconstructs
/// `x0` from `x_t` in one step and averages the radial spectra of the
/// residual. Images in `x0s` are used in turn.
#[allow(clippy::too_many_arguments)]
pub fn freq_residual_study<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    x0s: &[Tensor],
    cond: Option<usize>,
    ranges: &[(usize, usize)],
    samples: usize,
    stat: SpectrumStat,
    rng: &mut LabRng,
) -> Result<Vec<ResidualSpectrum>> {
    if x0s.is_empty() || samples == 0 {
        return Err(Error::invalid("freq_residual_study", "need images and samples"));
    }
    let mut out = Vec::with_capacity(ranges.len());
    for &(lo, hi) in ranges {
        if lo > hi {
            return Err(Error::invalid("freq_residual_study", format!("empty range {lo}..={hi}")));
        }
        sched.check_timestep(hi)?;
        let mut profiles = Vec::with_capacity(samples);
        for i in 0..samples {
            let x0 = as_batch(&x0s[i % x0s.len()])?;
            let t = rng.gen_range(lo..=hi);
            let eps = Tensor::randn(x0.shape().to_vec(), rng);
            let x_t = mix(&x0, &eps, sched.alpha_bar(t))?;
            let eps_hat = model.predict_noise(&x_t, t, cond)?;
            let rec = predict_x0(&x_t, &eps_hat, t, sched)?;
            let residual = rec.zip_map(&x0, |a, b| a - b)?;
            let spec = fft2d(&residual)?;
            profiles.push(radial_profile(&spec, ring_count(&spec), stat)?);
        }
        out.push(ResidualSpectrum {
            range: (lo, hi),
            samples,
            spectrum: RadialSpectrum::average(&profiles)?,
        });
    }
    Ok(out)
}

pub fn residual_csv(study: &[ResidualSpectrum]) -> String {
    let mut out = format!("{RESIDUAL_HEADER}\n");
    for r in study {
        for (i, m) in r.spectrum.magnitudes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:e}",
                r.range.0,
                r.range.1,
                r.samples,
                i,
                r.spectrum.bin_edges[i],
                r.spectrum.bin_edges[i + 1],
                m
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn constant_image_is_pure_dc() {
        let spec = fft2d(&Tensor::full(vec![8, 8], 0.25)).unwrap();
        let prof = radial_profile(&spec, ring_count(&spec), SpectrumStat::Amplitude).unwrap();
        assert!((prof.magnitudes[0] - 16.0).abs() < 1e-12);
        assert!(prof.magnitudes[1..].iter().all(|&m| m.abs() < 1e-12));
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut x = Tensor::zeros(vec![6, 10]);
        x.data_mut()[2 * 10 + 7] = 1.5;
        let spec = fft2d(&x).unwrap();
        assert!(spec.data.iter().all(|c| (c.norm() - 1.5).abs() < 1e-12));
    }

    #[test]
    fn profile_conserves_mass_for_any_binning() {
        let x = Tensor::uniform(vec![1, 16, 16], -1.0, 1.0, &mut seeded(2));
        let spec = fft2d(&x).unwrap();
        let total: f64 = spec.data.iter().map(|c| c.norm()).sum();
        for n in [1, 3, 7, ring_count(&spec), 40] {
            let p = radial_profile(&spec, n, SpectrumStat::Amplitude).unwrap();
            assert_eq!(p.magnitudes.len(), n);
            assert!((p.total() - total).abs() < 1e-9);
        }
        assert!(radial_profile(&spec, 0, SpectrumStat::Amplitude).is_err());
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(fft2d(&Tensor::zeros(vec![1, 8])).is_err());
        assert!(fft2d(&Tensor::zeros(vec![2, 8, 8])).is_err());
    }

    struct Perfect<'a> {
        x0: &'a Tensor,
        sched: &'a NoiseSchedule,
    }

    impl NoisePredictor for Perfect<'_> {
        fn predict_noise(&self, x_t: &Tensor, t: usize, _: Option<usize>) -> Result<Tensor> {
            let ab = self.sched.alpha_bar(t);
            let x0 = as_batch(self.x0)?;
            x_t.zip_map(&x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
        }
    }

    #[test]
    fn perfect_denoiser_leaves_no_residual() {
        let sched = NoiseSchedule::standard();
        let x0 = Tensor::uniform(vec![1, 16, 16], 0.0, 1.0, &mut seeded(8));
        let p = Perfect { x0: &x0, sched: &sched };
        let study = freq_residual_study(
            &p,
            &sched,
            std::slice::from_ref(&x0),
            None,
            &[(0, 100), (700, 800)],
            10,
            SpectrumStat::Amplitude,
            &mut seeded(9),
        )
        .unwrap();
        for r in &study {
            assert!(r.spectrum.magnitudes.iter().all(|&m| m < 1e-6), "{:?}", r.spectrum.magnitudes);
        }
    }

    #[test]
    fn shares_split_the_unit_interval() {
        let x = Tensor::uniform(vec![32, 32], -1.0, 1.0, &mut seeded(4));
        let spec = fft2d(&x).unwrap();
        let p = radial_profile(&spec, ring_count(&spec), SpectrumStat::Power).unwrap();
        let (hi, lo) = (p.high_share(), p.low_share());
        assert!((0.0..=1.0).contains(&hi) && (0.0..=1.0).contains(&lo));
        assert!(hi + lo <= 1.0);
    }
}
