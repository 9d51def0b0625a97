//! Effect of the timestep search on the expected gradient magnitude, checked
//! against synthetic gradient profiles with a zero-gradient tail.

use std::fmt::Write as _;

use crate::attack::{adaptive_select, ProfileOracle, TimestepPool};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Named synthetic profile `g(t) >= 0` over `[0, steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 1 on `[0, T/2)`, 0 afterwards.
    Step500,
    /// Decreases linearly from 1 to 0 over `[0, 0.7 T)`, 0 afterwards.
    Monotone,
    /// Gaussian bump centred at `0.3 T` on `[0, 0.7 T)`, 0 afterwards.
    Bump,
    /// 1 everywhere: no zero region.
    Flat,
}

impl Profile {
    /// Profiles that all carry a zero tail.
    pub const SUITE: [Profile; 3] = [Profile::Step500, Profile::Monotone, Profile::Bump];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Step500 => "step500",
            Profile::Monotone => "monotone",
            Profile::Bump => "bump",
            Profile::Flat => "flat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Profile::Step500, Profile::Monotone, Profile::Bump, Profile::Flat]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("theorem1", format!("unknown profile `{s}`")))
    }

    pub fn value(self, t: usize, steps: usize) -> f64 {
        let x = t as f64 / steps as f64;
        match self {
            Profile::Step500 => {
                if 2 * t < steps {
                    1.0
                } else {
                    0.0
                }
            }
            Profile::Monotone => {
                if x < 0.7 {
                    1.0 - x / 0.7
                } else {
                    0.0
                }
            }
            Profile::Bump => {
                if x < 0.7 {
                    (-((x - 0.3) / 0.15).powi(2)).exp()
                } else {
                    0.0
                }
            }
            Profile::Flat => 1.0,
        }
    }
}

/// Mean of `g` under uniform sampling from `pool`.
pub fn pool_expectation(g: impl Fn(usize) -> f64, pool: &TimestepPool) -> f64 {
    if pool.is_empty() {
        return 0.0;
    }
    pool.iter().map(&g).sum::<f64>() / pool.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Outcome {
    /// Expectation over the full range `[0, T)`.
    pub e_full: f64,
    /// Expectation over each seed's post-search pool.
    pub e_selected: Vec<f64>,
    pub pool_lengths: Vec<usize>,
}

impl Theorem1Outcome {
    pub fn e_selected_mean(&self) -> f64 {
        self.e_selected.iter().sum::<f64>() / self.e_selected.len().max(1) as f64
    }

    /// Fraction of seeds with `E_selected > E_full`.
    pub fn win_rate(&self) -> f64 {
        let wins = self.e_selected.iter().filter(|&&e| e > self.e_full).count();
        wins as f64 / self.e_selected.len().max(1) as f64
    }
}

/// Runs the timestep search against `g` for every seed and compares the
/// uniform expectation of `g` before and after.
pub fn theorem1_oracle<F: Fn(usize) -> f64 + Copy>(
    g: F,
    steps: usize,
    seeds: impl IntoIterator<Item = u64>,
    search_steps: usize,
    alpha: f64,
) -> Result<Theorem1Outcome> {
    let full = TimestepPool::full(steps);
    let e_full = pool_expectation(g, &full);
    let x = Tensor::zeros(vec![1]);
    let mut e_selected = Vec::new();
    let mut pool_lengths = Vec::new();
    for seed in seeds {
        let mut oracle = ProfileOracle { profile: g, steps };
        let mut rng = stream(seed, Stream::Analysis);
        let sel = adaptive_select(&mut oracle, &x, search_steps, alpha, &mut rng)?;
        e_selected.push(pool_expectation(g, &sel.pool));
        pool_lengths.push(sel.pool.len());
    }
    Ok(Theorem1Outcome {
        e_full,
        e_selected,
        pool_lengths,
    })
}

pub const THEOREM1_HEADER: &str = "profile,seeds,e_full,e_selected_mean,win_rate,mean_pool_len";

pub fn theorem1_csv(rows: &[(Profile, Theorem1Outcome)]) -> String {
    let mut out = format!("{THEOREM1_HEADER}\n");
    for (p, o) in rows {
        let mean_len = o.pool_lengths.iter().sum::<usize>() as f64 / o.pool_lengths.len().max(1) as f64;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.name(),
            o.e_selected.len(),
            o.e_full,
            o.e_selected_mean(),
            o.win_rate(),
            mean_len
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn flat_profile_is_unchanged() {
        let o = theorem1_oracle(|t| Profile::Flat.value(t, 1000), 1000, 0..20, 50, 0.005).unwrap();
        let ratio = o.e_selected_mean() / o.e_full;
        assert!((0.8..=1.25).contains(&ratio));
    }

    #[test]
    fn closed_form_full_expectation_matches_sampling() {
        for p in Profile::SUITE {
            let g = |t| p.value(t, 1000);
            let analytic = pool_expectation(g, &TimestepPool::full(1000));
            let mut rng = crate::rng::seeded(5);
            let n = 200_000;
            let mc = (0..n).map(|_| g(rng.gen_range(0..1000))).sum::<f64>() / n as f64;
            assert!((mc - analytic).abs() / analytic < 0.02, "{} {mc} {analytic}", p.name());
        }
        let step = pool_expectation(|t| Profile::Step500.value(t, 1000), &TimestepPool::full(1000));
        assert_eq!(step, 0.5);
    }

    #[test]
    fn profiles_vanish_only_on_the_tail() {
        for p in Profile::SUITE {
            let zero_from = (0..1000).find(|&t| p.value(t, 1000) == 0.0).unwrap();
            assert!((0..zero_from).all(|t| p.value(t, 1000) > 0.0));
            assert!((zero_from..1000).all(|t| p.value(t, 1000) == 0.0));
        }
    }
}
