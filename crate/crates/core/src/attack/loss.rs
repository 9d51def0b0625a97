//! Feature interference and combined attack objectives.

use crate::diffusion::{as_batch, denoising_loss, mix, Bound, Denoiser, FeatureSet, LossPass, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Mean over `layers` of the mean squared difference between each tapped
/// feature `feats[l]` and its reference. References enter as constants.
pub fn feature_loss(
    g: &mut Graph,
    feats: &std::collections::BTreeMap<usize, Var>,
    reference: &FeatureSet,
    layers: &[usize],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("feature_loss", "no layers requested"));
    }
    let mut total: Option<Var> = None;
    for &l in layers {
        let f = *feats.get(&l).ok_or(Error::MissingLayer(l))?;
        let r = reference.get(l).ok_or(Error::MissingLayer(l))?;
        let r = g.constant(r.clone());
        let term = g.mse(f, r)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / layers.len() as f64))
}

/// Plain-tensor variant of [`feature_loss`].
pub fn feature_distance(feats: &FeatureSet, reference: &FeatureSet, layers: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = feats
        .0
        .iter()
        .map(|(&l, t)| (l, g.constant(t.clone())))
        .collect();
    let loss = feature_loss(&mut g, &vars, reference, layers)?;
    Ok(g.value(loss).item())
}

/// Graph values of one combined-objective evaluation.
#[derive(Clone, Debug)]
pub struct CombinedPass {
    pub loss: Var,
    pub denoise: Var,
    /// Absent when the feature term is switched off.
    pub feature: Option<Var>,
    pub x_adv: Var,
}

/// Denoising loss of `x_adv` plus `lambda` times the feature interference
/// term against the clean images, both at timestep `t` with the same noise
/// `eps`. With `lambda == 0` the result is the denoising loss itself.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    g: &mut Graph,
    model: &Denoiser,
    params: &Bound,
    sched: &NoiseSchedule,
    x_adv: &Tensor,
    x_clean: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: Option<usize>,
    lambda: f64,
    layers: &[usize],
) -> Result<CombinedPass> {
    let xa = as_batch(x_adv)?;
    let xc = as_batch(x_clean)?;
    if xa.shape() != xc.shape() {
        return Err(Error::shape("combined_loss", xa.shape(), xc.shape()));
    }
    let n = xa.batch();
    let eps = eps.clone().reshape(xa.shape().to_vec())?;
    let use_features = lambda != 0.0;
    let xv = g.leaf(xa);
    let LossPass { loss, pass, .. } = denoising_loss(
        g,
        model,
        params,
        sched,
        xv,
        &vec![t; n],
        &eps,
        &vec![cond; n],
        use_features,
    )?;
    if !use_features {
        return Ok(CombinedPass {
            loss,
            denoise: loss,
            feature: None,
            x_adv: xv,
        });
    }
    sched.check_timestep(t)?;
    let x_t_clean = mix(&xc, &eps, sched.alpha_bar(t))?;
    let (_, reference) = model.denoise_with_features(&x_t_clean, t, cond)?;
    let feat = feature_loss(g, &pass.taps, &reference, layers)?;
    let weighted = g.scale(feat, lambda);
    let total = g.add(loss, weighted)?;
    Ok(CombinedPass {
        loss: total,
        denoise: loss,
        feature: Some(feat),
        x_adv: xv,
    })
}

/// Value and input gradient of the combined objective.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub denoise: f64,
    pub feature: f64,
    pub grad: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn objective_grad(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x_adv: &Tensor,
    x_clean: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: Option<usize>,
    lambda: f64,
    layers: &[usize],
) -> Result<ObjectiveEval> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let c = combined_loss(&mut g, model, &p, sched, x_adv, x_clean, t, eps, cond, lambda, layers)?;
    let loss = g.value(c.loss).item();
    let denoise = g.value(c.denoise).item();
    let feature = c.feature.map_or(0.0, |f| g.value(f).item());
    let mut grads = g.backward(c.loss)?;
    let grad = grads
        .take(c.x_adv)
        .unwrap_or_else(|| Tensor::zeros(x_adv.shape().to_vec()))
        .reshape(x_adv.shape().to_vec())?;
    Ok(ObjectiveEval {
        loss,
        denoise,
        feature,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{training_loss, DenoiserConfig};
    use crate::rng::seeded;
    use std::collections::BTreeMap;

    fn setup() -> (Denoiser, NoiseSchedule, Tensor, Tensor, Tensor) {
        let mut rng = seeded(11);
        let model = Denoiser::new(DenoiserConfig::default(), &mut rng);
        let sched = NoiseSchedule::standard();
        let clean = Tensor::uniform(vec![1, 32, 32], 0.0, 1.0, &mut rng);
        let adv = clean.zip_map(&Tensor::uniform(vec![1, 32, 32], -0.05, 0.05, &mut rng), |a, b| a + b).unwrap();
        let eps = Tensor::randn(vec![1, 32, 32], &mut rng);
        (model, sched, clean, adv, eps)
    }

    #[test]
    fn identical_features_give_zero() {
        let f = FeatureSet(BTreeMap::from([(4, Tensor::full(vec![1, 2, 2, 2], 0.3))]));
        assert_eq!(feature_distance(&f, &f, &[4]).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_of_two_gives_four() {
        let a = FeatureSet(BTreeMap::from([(1, Tensor::full(vec![1, 3, 2, 2], 2.5))]));
        let b = FeatureSet(BTreeMap::from([(1, Tensor::full(vec![1, 3, 2, 2], 0.5))]));
        assert_eq!(feature_distance(&a, &b, &[1]).unwrap(), 4.0);
    }

    #[test]
    fn missing_layer_is_reported() {
        let a = FeatureSet(BTreeMap::from([(1, Tensor::zeros(vec![1]))]));
        assert!(matches!(feature_distance(&a, &a, &[2]), Err(Error::MissingLayer(2))));
    }

    #[test]
    fn lambda_zero_is_the_denoising_loss() {
        let (model, sched, clean, adv, eps) = setup();
        let e = objective_grad(&model, &sched, &adv, &clean, 300, &eps, Some(2), 0.0, &[4, 5]).unwrap();
        let plain = training_loss(&model, &sched, &adv, 300, &eps, Some(2)).unwrap();
        assert_eq!(e.loss.to_bits(), plain.to_bits());
    }

    #[test]
    fn clean_input_has_no_feature_term() {
        let (model, sched, clean, _, eps) = setup();
        let e = objective_grad(&model, &sched, &clean, &clean, 300, &eps, None, 1.0, &[4, 5]).unwrap();
        assert_eq!(e.feature, 0.0);
        assert_eq!(e.loss, e.denoise);
    }

    #[test]
    fn terms_add_up() {
        let (model, sched, clean, adv, eps) = setup();
        let e = objective_grad(&model, &sched, &adv, &clean, 300, &eps, None, 1.0, &[4, 5]).unwrap();
        assert!(e.feature > 0.0 && e.denoise > 0.0);
        let denoise = training_loss(&model, &sched, &adv, 300, &eps, None).unwrap();
        let x_t = |x: &Tensor| mix(&as_batch(x).unwrap(), &eps.clone().reshape(vec![1, 1, 32, 32]).unwrap(), sched.alpha_bar(300)).unwrap();
        let (_, fa) = model.denoise_with_features(&x_t(&adv), 300, None).unwrap();
        let (_, fc) = model.denoise_with_features(&x_t(&clean), 300, None).unwrap();
        let feat = feature_distance(&fa, &fc, &[4, 5]).unwrap();
        assert!((e.loss - (denoise + feat)).abs() < 1e-12);
    }
}
