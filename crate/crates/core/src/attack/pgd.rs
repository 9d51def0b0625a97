//! L-infinity bounded perturbations and the projected signed-gradient step.

use std::path::Path;

use crate::attack::select::sign;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive perturbation `delta` of a set of `[0, 1]` images.
///
/// Every step keeps `|delta| <= eta` and `base + delta` inside `[0, 1]`,
/// both exactly in floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    base: Vec<Tensor>,
    delta: Vec<Tensor>,
    eta: f64,
}

impl Perturbation {
    /// Zero perturbation of `images`.
    pub fn new(images: Vec<Tensor>, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::invalid("perturbation", "eta must be positive"));
        }
        for im in &images {
            if im.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("perturbation", "images must lie in [0, 1]"));
            }
        }
        let delta = images.iter().map(|im| Tensor::zeros(im.shape().to_vec())).collect();
        Ok(Self {
            base: images,
            delta,
            eta,
        })
    }

    /// Rebuilds a perturbation from stored parts, checking both invariants.
    pub fn from_parts(base: Vec<Tensor>, delta: Vec<Tensor>, eta: f64) -> Result<Self> {
        if base.len() != delta.len() {
            return Err(Error::invalid("perturbation", "one delta per image required"));
        }
        let mut p = Self::new(base, eta)?;
        for (b, d) in p.base.iter().zip(&delta) {
            if b.shape() != d.shape() {
                return Err(Error::shape("perturbation", b.shape(), d.shape()));
            }
        }
        p.delta = delta;
        if !p.satisfies_budget() {
            return Err(Error::invalid("perturbation", "delta violates the budget"));
        }
        Ok(p)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn base(&self) -> &[Tensor] {
        &self.base
    }

    pub fn delta(&self) -> &[Tensor] {
        &self.delta
    }

    /// `base + delta` for every image.
    pub fn perturbed(&self) -> Vec<Tensor> {
        self.base
            .iter()
            .zip(&self.delta)
            .map(|(b, d)| b.zip_map(d, |b, d| b + d).expect("matching shapes"))
            .collect()
    }

    /// Largest `|delta|` over all images.
    pub fn max_abs_delta(&self) -> f64 {
        self.delta.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// Checks `|delta| <= eta` and `0 <= base + delta <= 1` with no tolerance.
    pub fn satisfies_budget(&self) -> bool {
        self.base.iter().zip(&self.delta).all(|(b, d)| {
            b.data().iter().zip(d.data()).all(|(&b, &d)| {
                let x = b + d;
                d.abs() <= self.eta && (0.0..=1.0).contains(&x)
            })
        })
    }

    /// One ascent step `delta += alpha * sgn(grad)` followed by projection
    /// onto the budget. `grads` holds one tensor per image.
    pub fn pgd_step(&mut self, grads: &[Tensor], alpha: f64) -> Result<()> {
        if grads.len() != self.delta.len() {
            return Err(Error::invalid("pgd_step", "one gradient per image required"));
        }
        for ((b, d), g) in self.base.iter().zip(self.delta.iter_mut()).zip(grads) {
            if g.shape() != d.shape() {
                return Err(Error::shape("pgd_step", d.shape(), g.shape()));
            }
            for ((dv, &bv), &gv) in d.data_mut().iter_mut().zip(b.data()).zip(g.data()) {
                *dv = project(bv, *dv + alpha * sign(gv), self.eta);
            }
        }
        Ok(())
    }

    /// Writes `delta_<i>.tns` and `perturbed_<i>.tns` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (i, (d, x)) in self.delta.iter().zip(self.perturbed()).enumerate() {
            let dp = dir.join(format!("delta_{i:03}.tns"));
            d.save(&dp)?;
            let xp = dir.join(format!("perturbed_{i:03}.tns"));
            x.save(&xp)?;
            written.push(dp);
            written.push(xp);
        }
        Ok(written)
    }

    /// Reads the `delta_<i>.tns` files written by [`Perturbation::save`] for
    /// `base` and checks them against the budget.
    pub fn load(dir: impl AsRef<Path>, base: Vec<Tensor>, eta: f64) -> Result<Self> {
        let dir = dir.as_ref();
        let delta = (0..base.len())
            .map(|i| Tensor::load(dir.join(format!("delta_{i:03}.tns"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(base, delta, eta)
    }
}

/// Clips `d` to `[-eta, eta]` and then to the range keeping `base + d` in
/// `[0, 1]`. The result is nudged by single ulps where rounding of `base + d`
/// would otherwise leave `[0, 1]`.
pub fn project(base: f64, d: f64, eta: f64) -> f64 {
    let lo = (-eta).max(-base);
    let hi = eta.min(1.0 - base);
    let mut d = d.clamp(lo, hi);
    while base + d > 1.0 {
        d = d.next_down();
    }
    while base + d < 0.0 {
        d = d.next_up();
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pert(v: f64) -> Perturbation {
        Perturbation::new(vec![Tensor::full(vec![1, 2, 2], v)], 16.0 / 255.0).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pert(0.5);
        p.pgd_step(&[Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 0.0, 2.0]).unwrap()], 0.01).unwrap();
        assert_eq!(p.save(dir.path()).unwrap().len(), 2);
        let back = Perturbation::load(dir.path(), p.base().to_vec(), p.eta()).unwrap();
        assert_eq!(back, p);
        assert!(Perturbation::load(dir.path(), p.base().to_vec(), 0.001).is_err());
    }

    #[test]
    fn zero_gradient_leaves_delta() {
        let mut p = pert(0.5);
        p.pgd_step(&[Tensor::full(vec![1, 2, 2], 1.0)], 0.005).unwrap();
        let before = p.clone();
        p.pgd_step(&[Tensor::zeros(vec![1, 2, 2])], 0.005).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn saturates_at_eta_without_overshoot() {
        let mut p = pert(0.5);
        let g = [Tensor::full(vec![1, 2, 2], 1.0)];
        let mut steps = 0;
        while p.max_abs_delta() < p.eta() {
            p.pgd_step(&g, 0.005).unwrap();
            steps += 1;
        }
        assert_eq!(steps, 13);
        for _ in 0..20 {
            p.pgd_step(&g, 0.005).unwrap();
            assert_eq!(p.max_abs_delta(), 16.0 / 255.0);
        }
        assert!(p.satisfies_budget());
    }

    #[test]
    fn pixel_range_wins_over_eta() {
        let mut p = pert(0.99);
        for _ in 0..30 {
            p.pgd_step(&[Tensor::full(vec![1, 2, 2], 1.0)], 0.005).unwrap();
        }
        assert!(p.perturbed()[0].data().iter().all(|&x| x <= 1.0));
        assert!(p.satisfies_budget());
    }

    #[test]
    fn rejects_out_of_range_images() {
        assert!(Perturbation::new(vec![Tensor::full(vec![1], 1.5)], 0.1).is_err());
        assert!(Perturbation::new(vec![Tensor::full(vec![1], 0.5)], 0.0).is_err());
    }
}
