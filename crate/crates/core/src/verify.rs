//! Self-check suite: reference oracles for the numeric kernels plus the
//! invariants every run relies on. Each check is small and seeded.

use std::fmt;

use rustfft::num_complex::Complex64;

use crate::analysis::{fft2d, pca_features, theorem1_oracle, Profile};
use crate::attack::{adaptive_select, objective_grad, protect, AttackConfig, ProfileOracle, TimestepPool};
use crate::config::ExperimentConfig;
use crate::diffusion::{
    denoising_loss, forward_sample, read_checkpoint, write_checkpoint, Denoiser, DenoiserConfig, NoiseSchedule,
};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Graph, Var};
use crate::rng::{seeded, LabRng};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Reference implementations written for clarity, not speed.
pub mod oracle {
    use super::*;

    /// Direct convolution of `[N, C, H, W]` by `[O, C, KH, KW]` with zero
    /// padding.
    pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    let r = (i * stride + di) as isize - pad as isize;
                                    let q = (j * stride + dj) as isize - pad as isize;
                                    if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * c + ic) * h + r as usize) * w + q as usize];
                                    let kv = k.data()[((oc * c + ic) * kh + di) * kw + dj];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    /// Direct DFT of an `[H, W]` image, DC moved to `(H / 2, W / 2)`.
    pub fn dft2d(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let phase = -std::f64::consts::TAU * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        acc += x[r * w + c] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[((u + h / 2) % h) * w + (v + w / 2) % w] = acc;
            }
        }
        out
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
    /// descending.
    pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q] == 0.0 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    /// Channel-covariance eigenvalues of a `[1, C, H, W]` feature map: rows
    /// are channels centred across channels, matrix `X X^T / (C - 1)`.
    pub fn pca_eigenvalues(f: &Tensor) -> Vec<f64> {
        let (c, p) = (f.shape()[1], f.shape()[2] * f.shape()[3]);
        let d = f.data();
        let mean: Vec<f64> = (0..p).map(|j| (0..c).map(|i| d[i * p + j]).sum::<f64>() / c as f64).collect();
        let gram = (0..c)
            .map(|a| {
                (0..c)
                    .map(|b| (0..p).map(|j| (d[a * p + j] - mean[j]) * (d[b * p + j] - mean[j])).sum::<f64>() / (c - 1) as f64)
                    .collect()
            })
            .collect();
        jacobi_eigenvalues(gram)
    }
}

fn small_model(rng: &mut LabRng) -> Denoiser {
    Denoiser::new(
        DenoiserConfig {
            image_size: 16,
            conditions: 4,
            ..DenoiserConfig::default()
        },
        rng,
    )
}

/// Random two-layer conv nets: largest relative autodiff error over `nets`
/// networks.
pub fn gradient_check(nets: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for i in 0..nets {
        let stride = 1 + i % 2;
        let x = Tensor::randn(vec![1, 2, 5, 5], &mut rng);
        let k1 = Tensor::randn(vec![3, 2, 3, 3], &mut rng);
        let b1 = Tensor::randn(vec![3], &mut rng);
        let k2 = Tensor::randn(vec![2, 3, 3, 3], &mut rng).map(|v| 0.5 * v);
        let target = Tensor::randn(vec![1, 2, if stride == 1 { 5 } else { 3 }, if stride == 1 { 5 } else { 3 }], &mut rng);
        let f = |g: &mut Graph, x: Var| -> Result<Var> {
            let k1 = g.constant(k1.clone());
            let b1 = g.constant(b1.clone());
            let k2 = g.constant(k2.clone());
            let h = g.conv2d(x, k1, stride, 1)?;
            let h = g.channel_add(h, b1)?;
            let h = g.silu(h);
            let y = g.conv2d(h, k2, 1, 1)?;
            let t = g.constant(target.clone());
            g.mse(y, t)
        };
        worst = worst.max(grad_check(f, &x, 1e-5)?);
    }
    Ok(worst)
}

/// Worst relative error of Monte Carlo forward-process moments against
/// `sqrt(abar) x0` and `1 - abar`, per pixel, at each of `timesteps`.
pub fn forward_moments(timesteps: &[usize], samples: usize, seed: u64) -> Result<(f64, f64)> {
    let sched = NoiseSchedule::standard();
    let mut rng = seeded(seed);
    let x0 = Tensor::new(vec![1, 2, 2], vec![0.8, 0.85, 0.9, 1.0])?;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for &t in timesteps {
        let mut sum = vec![0.0; x0.len()];
        let mut sq = vec![0.0; x0.len()];
        for _ in 0..samples {
            let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
            let xt = forward_sample(&x0, t, &eps, &sched)?;
            for (i, v) in xt.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let ab = sched.alpha_bar(t);
        for (i, &x) in x0.data().iter().enumerate() {
            let m = sum[i] / samples as f64;
            let var = sq[i] / samples as f64 - m * m;
            let want_m = ab.sqrt() * x;
            worst_mean = worst_mean.max((m - want_m).abs() / want_m.abs());
            worst_var = worst_var.max((var - (1.0 - ab)).abs() / (1.0 - ab));
        }
    }
    Ok((worst_mean, worst_var))
}

/// Largest absolute difference between graph convolution and the direct loop.
pub fn conv_oracle_error(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for (n, c, h, w, o, k, stride, pad) in [
        (2, 3, 7, 6, 4, 3, 1, 1),
        (1, 2, 8, 8, 3, 3, 2, 1),
        (3, 1, 5, 5, 2, 1, 1, 0),
        (1, 4, 9, 7, 2, 3, 2, 0),
    ] {
        let x = Tensor::randn(vec![n, c, h, w], &mut rng);
        let kt = Tensor::randn(vec![o, c, k, k], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kt.clone());
        let y = g.conv2d(xv, kv, stride, pad)?;
        let want = oracle::conv2d(&x, &kt, stride, pad);
        let got = g.value(y);
        worst = worst.max(
            got.data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(worst)
}

/// Largest absolute difference between `fft2d` and the direct DFT.
pub fn fft_oracle_error(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for (h, w) in [(8, 8), (6, 10), (32, 32), (5, 3)] {
        let x = Tensor::uniform(vec![h, w], -1.0, 1.0, &mut rng);
        let spec = fft2d(&x)?;
        let want = oracle::dft2d(x.data(), h, w);
        worst = worst.max(spec.data.iter().zip(&want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
    }
    Ok(worst)
}

/// Largest absolute eigenvalue difference between `pca_features` and the
/// Jacobi oracle, plus the worst component orthonormality defect.
pub fn pca_oracle_error(seed: u64) -> Result<(f64, f64)> {
    let mut rng = seeded(seed);
    let (mut ev_err, mut ortho) = (0.0f64, 0.0f64);
    for (c, h, w) in [(6, 4, 4), (8, 3, 5), (5, 6, 6)] {
        let f = Tensor::randn(vec![1, c, h, w], &mut rng);
        let k = 3;
        let mut set = crate::diffusion::FeatureSet::default();
        set.0.insert(0, f.clone());
        let pca = pca_features(&set, &[0], k)?;
        let layer = &pca.0[&0];
        let want = oracle::pca_eigenvalues(&f);
        for (a, b) in layer.eigenvalues.iter().zip(&want) {
            ev_err = ev_err.max((a - b).abs());
        }
        for (i, a) in layer.components.iter().enumerate() {
            for (j, b) in layer.components.iter().enumerate() {
                let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                ortho = ortho.max((d - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    Ok((ev_err, ortho))
}

/// `|combined - (denoise + lambda * feature)|` over random inputs and weights.
pub fn loss_additivity_error(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let model = small_model(&mut rng);
    let sched = NoiseSchedule::standard();
    let mut worst = 0.0f64;
    for (i, lambda) in [0.5, 1.0, 3.0].into_iter().enumerate() {
        let clean = Tensor::uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let adv = clean.zip_map(&Tensor::uniform(vec![2, 1, 16, 16], -0.06, 0.06, &mut rng), |a, b| a + b)?;
        let eps = Tensor::randn(vec![2, 1, 16, 16], &mut rng);
        let t = 100 + 300 * i;
        let e = objective_grad(&model, &sched, &adv, &clean, t, &eps, Some(1), lambda, &[3, 4, 5])?;
        worst = worst.max((e.loss - (e.denoise + lambda * e.feature)).abs());
    }
    Ok(worst)
}

/// Whether the `lambda = 0` objective reproduces the plain denoising loss
/// and its input gradient bit for bit.
pub fn lambda_zero_is_plain_loss(seed: u64) -> Result<bool> {
    let mut rng = seeded(seed);
    let model = small_model(&mut rng);
    let sched = NoiseSchedule::standard();
    let x = Tensor::uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng);
    let eps = Tensor::randn(vec![2, 1, 16, 16], &mut rng);
    let e = objective_grad(&model, &sched, &x, &x, 321, &eps, Some(2), 0.0, &[4, 5])?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xv = g.leaf(x.clone());
    let lp = denoising_loss(&mut g, &model, &p, &sched, xv, &[321, 321], &eps, &[Some(2), Some(2)], false)?;
    let loss = g.value(lp.loss).item();
    let grad = g.backward(lp.loss)?.take(xv).expect("input gradient");
    Ok(loss.to_bits() == e.loss.to_bits() && grad == e.grad)
}

/// Worst budget and pixel-range violations over short protect runs; both
/// must be exactly zero.
pub fn budget_violation(seed: u64) -> Result<(f64, f64, bool)> {
    let mut rng = seeded(seed);
    let model = small_model(&mut rng);
    let sched = NoiseSchedule::standard();
    let mut images = vec![Tensor::uniform(vec![1, 16, 16], 0.0, 1.0, &mut rng)];
    images.push(Tensor::from_fn(vec![1, 16, 16], |i| (i % 2) as f64));
    let (mut over_budget, mut out_of_range) = (0.0f64, 0.0f64);
    let mut deterministic = true;
    for (eta, selection) in [(16.0 / 255.0, true), (4.0 / 255.0, false), (0.3, true)] {
        let cfg = AttackConfig {
            eta,
            alpha: 0.02,
            epochs: 2,
            surrogate_steps_per_epoch: 1,
            attack_steps_per_epoch: 4,
            search_steps: 3,
            selection_enabled: selection,
            seed,
            ..AttackConfig::default()
        };
        let out = protect(&model, &sched, &images, Some(1), &cfg)?;
        let again = protect(&model, &sched, &images, Some(1), &cfg)?;
        deterministic &= out.perturbation == again.perturbation && out.log == again.log;
        over_budget = over_budget.max(out.perturbation.max_abs_delta() - eta);
        for p in out.perturbation.perturbed() {
            for &v in p.data() {
                out_of_range = out_of_range.max(-v).max(v - 1.0);
            }
        }
    }
    Ok((over_budget.max(0.0), out_of_range.max(0.0), deterministic))
}

/// Replays every selection round on a fresh pool and checks that each one
/// shrinks the pool by at most one window around its weakest probe.
pub fn pool_monotone(seeds: u64) -> Result<bool> {
    let x = Tensor::zeros(vec![1]);
    for profile in Profile::SUITE {
        for seed in 0..seeds {
            let mut oracle = ProfileOracle {
                profile: |t| profile.value(t, 1000),
                steps: 1000,
            };
            let sel = adaptive_select(&mut oracle, &x, 50, 0.005, &mut seeded(seed))?;
            let mut pool = TimestepPool::full(1000);
            for r in &sel.rounds {
                let next = pool.without(r.deleted.0, r.deleted.1);
                let removed = pool.len() - next.len();
                let ok = next.is_subset_of(&pool)
                    && removed > 0
                    && removed <= 39
                    && next.len() == r.pool_len
                    && (r.deleted.0..r.deleted.1).contains(&r.weakest);
                if !ok {
                    return Ok(false);
                }
                pool = next;
            }
            if pool != sel.pool {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Lowest win rate of the selected pool over the full range across the
/// bundled profiles.
pub fn theorem1_min_win_rate(seeds: u64) -> Result<f64> {
    let mut worst = 1.0f64;
    for profile in Profile::SUITE {
        let out = theorem1_oracle(|t| profile.value(t, 1000), 1000, 0..seeds, 50, 0.005)?;
        worst = worst.min(out.win_rate());
    }
    Ok(worst)
}

fn formats_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = seeded(seed);
    let t = Tensor::randn(vec![2, 3, 4], &mut rng);
    let back = Tensor::read_from(&mut t.to_bytes().as_slice())?;
    let model = small_model(&mut rng);
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf)?;
    let m2 = read_checkpoint(&mut buf.as_slice())?.with_image_size(model.config().image_size);
    let cfg = ExperimentConfig::with_seed(seed);
    let text = cfg.dump();
    let parsed = ExperimentConfig::parse(&text)?;
    let rejects = ExperimentConfig::parse(&format!("{text}unknown_key = 1\n")).is_err()
        && ExperimentConfig::parse("eta = 16/255\n").is_err();
    let parts = [
        ("tensor", back == t),
        ("checkpoint", m2 == model),
        ("config", parsed == cfg && parsed.dump() == text),
        ("config rejections", rejects),
    ];
    let failed: Vec<&str> = parts.iter().filter(|p| !p.1).map(|p| p.0).collect();
    let detail = if failed.is_empty() {
        "tensor, checkpoint and config round trips hold".to_string()
    } else {
        format!("broken: {}", failed.join(", "))
    };
    Ok((failed.is_empty(), detail))
}

/// Runs every check. Nothing here trains a full model; the whole suite takes
/// seconds.
pub fn run_suite(seed: u64) -> Vec<Check> {
    vec![
        check(
            "gradient",
            gradient_check(10, seed).map(|e| (e < 1e-5, format!("max relative error {e:.3e} over 10 nets"))),
        ),
        check(
            "forward_moments",
            forward_moments(&[1, 50, 100, 200, 300], 10_000, seed)
                .map(|(m, v)| (m < 0.05 && v < 0.05, format!("mean error {m:.4}, variance error {v:.4}"))),
        ),
        check(
            "conv_oracle",
            conv_oracle_error(seed).map(|e| (e <= 1e-12, format!("max abs difference {e:.3e}"))),
        ),
        check(
            "fft_oracle",
            fft_oracle_error(seed).map(|e| (e <= 1e-9, format!("max abs difference {e:.3e}"))),
        ),
        check(
            "pca_oracle",
            pca_oracle_error(seed).map(|(e, o)| {
                (e <= 1e-9 && o <= 1e-9, format!("eigenvalue difference {e:.3e}, orthonormality defect {o:.3e}"))
            }),
        ),
        check(
            "loss_additivity",
            loss_additivity_error(seed).map(|e| (e <= 1e-12, format!("max defect {e:.3e}"))),
        ),
        check(
            "lambda_zero",
            lambda_zero_is_plain_loss(seed).map(|ok| (ok, format!("bit-exact: {ok}"))),
        ),
        check(
            "budget",
            budget_violation(seed).map(|(b, r, d)| {
                (
                    b == 0.0 && r == 0.0 && d,
                    format!("budget excess {b:e}, range excess {r:e}, deterministic {d}"),
                )
            }),
        ),
        check(
            "pool_monotone",
            pool_monotone(20).map(|ok| (ok, format!("60 selections replayed: {ok}"))),
        ),
        check(
            "theorem1",
            theorem1_min_win_rate(200).map(|w| (w >= 0.95, format!("lowest win rate {w:.3} over 200 seeds"))),
        ),
        check(
            "formats",
            formats_round_trip(seed),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalises_a_known_matrix() {
        let ev = oracle::jacobi_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((ev[0] - 3.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14, "{ev:?}");
    }

    #[test]
    fn naive_dft_of_an_impulse_is_flat() {
        let mut x = vec![0.0; 12];
        x[0] = 1.0;
        assert!(oracle::dft2d(&x, 3, 4).iter().all(|c| (c - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn suite_passes() {
        let checks = run_suite(0);
        for c in &checks {
            assert!(c.passed, "{c}");
        }
        assert_eq!(checks.len(), 11);
    }
}
