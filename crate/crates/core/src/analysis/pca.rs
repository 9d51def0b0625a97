//! Principal components of decoder feature maps.
//!
//! Each channel of a `[1, C, H, W]` feature is one observation over the
//! `H * W` spatial positions. Components are spatial maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::diffusion::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Top components of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPca {
    /// Unit-norm `[H, W]` component maps, orthogonal to each other.
    pub components: Vec<Tensor>,
    /// Covariance eigenvalues of the returned components.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue over total variance; zero when the layer has no variance.
    pub ratios: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PcaMap(pub BTreeMap<usize, LayerPca>);

pub const PCA_HEADER: &str = "layer,component,eigenvalue,variance_ratio";

impl PcaMap {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{PCA_HEADER}\n");
        for (l, p) in &self.0 {
            for (i, (e, r)) in p.eigenvalues.iter().zip(&p.ratios).enumerate() {
                let _ = writeln!(out, "{l},{i},{e:e},{r}");
            }
        }
        out
    }

    /// Writes `layer<l>_pc<i>.pgm` for every component.
    pub fn write_images(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (l, p) in &self.0 {
            for (i, c) in p.components.iter().enumerate() {
                let path = dir.join(format!("layer{l}_pc{i}.pgm"));
                write_pgm(&path, c)?;
                paths.push(path);
            }
        }
        Ok(paths)
    }
}

/// PCA of each requested layer, keeping the top `k` components.
pub fn pca_features(feats: &FeatureSet, layers: &[usize], k: usize) -> Result<PcaMap> {
    let mut out = BTreeMap::new();
    for &l in layers {
        let f = feats.get(l).ok_or(Error::MissingLayer(l))?;
        out.insert(l, pca_layer(f, k)?);
    }
    Ok(PcaMap(out))
}

fn pca_layer(f: &Tensor, k: usize) -> Result<LayerPca> {
    let s = f.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid("pca_features", format!("expected [1, C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let p = h * w;
    if c < k {
        return Err(Error::invalid(
            "pca_features",
            format!("{c} channels cannot yield {k} components"),
        ));
    }
    if k > p {
        return Err(Error::invalid("pca_features", "more components than positions"));
    }
    // Rows are channels, centred across channels.
    let mut x = DMatrix::from_row_slice(c, p, f.data());
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let denom = (c.max(2) - 1) as f64;
    // Covariance over positions is X^T X / (C - 1); its nonzero spectrum
    // matches the C x C Gram matrix X X^T / (C - 1).
    let gram = (&x * x.transpose()) / denom;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);

    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let lambda = eig.eigenvalues[i].max(0.0);
        let significant = lambda > 0.0 && lambda > 1e-12 * top;
        let v = significant
            .then(|| {
                let u = x.transpose() * eig.eigenvectors.column(i);
                orthonormalize(u.iter().copied().collect(), &comps)
            })
            .flatten()
            .unwrap_or_else(|| complete_basis(&comps, p));
        comps.push(v);
        eigenvalues.push(if significant { lambda } else { 0.0 });
    }
    let ratios = eigenvalues
        .iter()
        .map(|&e| if total > 0.0 { e / total } else { 0.0 })
        .collect();
    let components = comps
        .into_iter()
        .map(|v| Tensor::new(vec![h, w], v))
        .collect::<Result<_>>()?;
    Ok(LayerPca {
        components,
        eigenvalues,
        ratios,
    })
}

/// Removes projections on `basis` and renormalises; `None` if nothing is left.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(b) {
                *a -= d * b;
            }
        }
    }
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (n > 1e-8).then(|| v.into_iter().map(|a| a / n).collect())
}

/// First standard basis direction independent of `basis`, orthonormalised.
fn complete_basis(basis: &[Vec<f64>], p: usize) -> Vec<f64> {
    (0..p)
        .find_map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            orthonormalize(e, basis)
        })
        .expect("basis smaller than the space")
}

/// Binary greyscale PGM, min-max scaled to `0..=255`.
pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let s = img.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        _ => return Err(Error::invalid("write_pgm", format!("expected an image, got {s:?}"))),
    };
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        img.data()
            .iter()
            .map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn set(t: Tensor) -> FeatureSet {
        FeatureSet(BTreeMap::from([(0, t)]))
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn single_channel_is_rank_one() {
        let pattern: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut data = vec![0.0; 4 * 16];
        data[2 * 16..3 * 16].copy_from_slice(&pattern);
        let f = Tensor::new(vec![1, 4, 4, 4], data).unwrap();
        let m = pca_features(&set(f), &[0], 3).unwrap();
        let p = &m.0[&0];
        assert!((p.ratios[0] - 1.0).abs() < 1e-12);
        let pat = Tensor::new(vec![4, 4], pattern).unwrap();
        let cos = dot(&p.components[0], &pat) / dot(&pat, &pat).sqrt();
        assert!((cos.abs() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&p.components[i], &p.components[j]) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn random_components_are_orthonormal_and_ordered() {
        let f = Tensor::uniform(vec![1, 8, 4, 4], -1.0, 1.0, &mut seeded(6));
        let p = &pca_features(&set(f), &[0], 3).unwrap().0[&0];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&p.components[i], &p.components[j]) - want).abs() < 1e-8);
            }
        }
        assert!(p.ratios.windows(2).all(|w| w[0] >= w[1]));
        assert!(p.ratios.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn too_few_channels() {
        let f = Tensor::zeros(vec![1, 2, 4, 4]);
        assert!(pca_features(&set(f.clone()), &[0], 3).is_err());
        assert!(matches!(pca_features(&set(f), &[1], 1), Err(Error::MissingLayer(1))));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &Tensor::new(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 51, 102, 153, 204, 255]);
    }
}
