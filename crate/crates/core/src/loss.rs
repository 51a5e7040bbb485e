//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::arch::{ForwardOptions, Model, ModelOutput, ParamRole, ShieldState};
use crate::data::Batch;
use crate::disentangle::ModalityTag;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::aux_loss;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_disc: f64,
    pub lambda_aux: f64,
    pub lambda_img: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_disc: 1.0,
            lambda_aux: 0.01,
            lambda_img: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("lambda_disc", self.lambda_disc),
            ("lambda_aux", self.lambda_aux),
            ("lambda_img", self.lambda_img),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be a nonnegative number")));
            }
        }
        Ok(())
    }

    /// Weighted sum of plain loss values; zero-weight terms are skipped.
    pub fn combine(&self, disc: f64, aux: f64, img: f64) -> f64 {
        let mut total = 0.0;
        for (w, v) in [(self.lambda_disc, disc), (self.lambda_aux, aux), (self.lambda_img, img)] {
            if w != 0.0 {
                total += w * v;
            }
        }
        total
    }
}

/// Mean cross-entropy of `logits [M x V]` against `targets`.
pub fn discrete_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Rectified-flow velocity regression: MSE between `pred` and
/// `sample - noise`. Rejects any flow time outside the open unit interval.
pub fn flow_matching_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, sample: &[f64], noise: &[f64], t: &[f64]) -> Result<Var> {
    if let Some(&bad) = t.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Contract(format!("flow time {bad} outside (0, 1)")));
    }
    if sample.len() != noise.len() {
        return Err(Error::Shape("sample and noise lengths differ".into()));
    }
    let shape = g.shape(pred).to_vec();
    let target: Vec<f64> = sample.iter().zip(noise).map(|(x, n)| x - n).collect();
    let target = g.constant(Tensor::from_f64(&shape, &target)?);
    g.mse(pred, target)
}

/// Graph handles of the loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub disc: Option<Var>,
    pub aux: Option<Var>,
    pub img: Option<Var>,
}

/// `lambda_disc L_disc + lambda_aux L_aux + lambda_img L_img`; absent and
/// zero-weighted terms are left out of the graph.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, lambda) in [(parts.disc, w.lambda_disc), (parts.aux, w.lambda_aux), (parts.img, w.lambda_img)] {
        let Some(v) = term else { continue };
        if lambda == 0.0 {
            continue;
        }
        let v = if lambda == 1.0 { v } else { g.scale(v, T::lit(lambda)) };
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// Balance loss of every router in every layer, labelled by group.
pub fn aux_terms<T: Scalar>(g: &mut Graph<T>, out: &ModelOutput<T>) -> Result<Vec<(String, Var)>> {
    let mut terms = Vec::new();
    for layer in &out.layers {
        for r in &layer.routes {
            terms.push((r.group.clone(), aux_loss(g, &r.routed.decision, r.routed.probs)?));
        }
    }
    Ok(terms)
}

/// Mean of the given balance losses.
pub fn mean_aux_loss<T: Scalar>(g: &mut Graph<T>, terms: &[(String, Var)]) -> Result<Option<Var>> {
    let Some(&(_, first)) = terms.first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &(_, t) in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, T::lit(1.0 / terms.len() as f64))))
}

/// Forward pass plus every loss term of one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub output: ModelOutput<T>,
    pub parts: LossParts,
    pub aux_terms: Vec<(String, Var)>,
    pub total: Var,
}

impl<T: Scalar> BatchLoss<T> {
    pub fn value(g: &Graph<T>, v: Option<Var>) -> Option<f64> {
        v.map(|v| g.item(v).as_f64())
    }
}

pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    batch: &Batch,
    opts: &ForwardOptions,
    weights: &LossWeights,
) -> Result<BatchLoss<T>> {
    let output = model.forward(g, batch, opts)?;
    let mut parts = LossParts::default();
    let (rows, targets) = batch.discrete_targets();
    if !rows.is_empty() {
        let logits = model.logits(g, &output, &rows)?;
        parts.disc = Some(discrete_loss(g, logits, &targets)?);
    }
    let vae = batch.rows_of(ModalityTag::Vae);
    if !vae.is_empty() {
        let pred = model.velocity(g, &output, &vae)?;
        parts.img = Some(flow_matching_loss(g, pred, &batch.latent, &batch.noise, &batch.vae_times())?);
    }
    let aux_terms = aux_terms(g, &output)?;
    parts.aux = mean_aux_loss(g, &aux_terms)?;
    let total = total_loss(g, &parts, weights)?;
    Ok(BatchLoss {
        output,
        parts,
        aux_terms,
        total,
    })
}

/// Fills the gradients of `model.store` from `bl`. Under `shield` the
/// generation loss reaches the shared experts multiplied by the shield
/// factor: it is backpropagated on its own and its shared-expert gradient
/// scaled once.
pub fn accumulate_grads<T: Scalar>(
    model: &mut Model<T>,
    g: &mut Graph<T>,
    bl: &BatchLoss<T>,
    weights: &LossWeights,
    shield: Option<ShieldState>,
) -> Result<()> {
    model.store.zero_grad();
    let factor = shield.map_or(1.0, |s| s.factor());
    let img = bl.parts.img.filter(|_| weights.lambda_img != 0.0);
    if factor == 1.0 || img.is_none() {
        g.backward(bl.total)?;
        model.store.accumulate(g);
        return Ok(());
    }
    let rest = LossParts { img: None, ..bl.parts };
    if rest.disc.is_some() || rest.aux.is_some() {
        let r = total_loss(g, &rest, weights)?;
        g.backward(r)?;
        model.store.accumulate(g);
        g.clear_grads();
    }
    let only = LossParts {
        disc: None,
        aux: None,
        img,
    };
    let l = total_loss(g, &only, weights)?;
    g.backward(l)?;
    let shared = model.ids_with(|r| *r == ParamRole::Shared);
    model
        .store
        .accumulate_scaled(g, |id| if shared.contains(&id) { factor } else { 1.0 });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn saturated_and_uniform_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let mut l = vec![0.0; 3 * 5];
        let targets = [1, 4, 0];
        for (i, &t) in targets.iter().enumerate() {
            l[i * 5 + t] = 20.0;
        }
        let x = g.constant(Tensor::from_vec(&[3, 5], l).unwrap());
        let ce = discrete_loss(&mut g, x, &targets).unwrap();
        assert!(g.item(ce) < 1e-8);
        let u = g.constant(Tensor::zeros(&[2, 7]));
        let ce = discrete_loss(&mut g, u, &[3, 6]).unwrap();
        assert!((g.item(ce) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let mut rng = Rng::new(2);
        let mut g = Graph::<f64>::new();
        let logits = Tensor::<f64>::randn(&[6, 9], 2.0, &mut rng);
        let targets: Vec<usize> = (0..6).map(|_| rng.below(9)).collect();
        let mut oracle = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[t].exp() / z).ln();
        }
        oracle /= 6.0;
        let x = g.constant(logits);
        let ce = discrete_loss(&mut g, x, &targets).unwrap();
        assert!((g.item(ce) - oracle).abs() < 1e-12);
    }

    #[test]
    fn flow_loss_oracles() {
        let mut rng = Rng::new(3);
        let sample: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let noise: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let v: Vec<f64> = sample.iter().zip(&noise).map(|(a, b)| a - b).collect();
        let mut g = Graph::<f64>::new();
        let exact = g.constant(Tensor::from_vec(&[3, 4], v.clone()).unwrap());
        let l = flow_matching_loss(&mut g, exact, &sample, &noise, &[0.5]).unwrap();
        assert_eq!(g.item(l), 0.0);
        let zero = g.constant(Tensor::zeros(&[3, 4]));
        let l = flow_matching_loss(&mut g, zero, &sample, &noise, &[0.5]).unwrap();
        let oracle = v.iter().map(|x| x * x).sum::<f64>() / 12.0;
        assert!((g.item(l) - oracle).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(
                flow_matching_loss(&mut g, zero, &sample, &noise, &[bad]),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn total_loss_weighting() {
        let mut g = Graph::<f64>::new();
        let d = g.constant(Tensor::scalar(2.0));
        let a = g.constant(Tensor::scalar(1.0));
        let i = g.constant(Tensor::scalar(3.0));
        let parts = LossParts {
            disc: Some(d),
            aux: Some(a),
            img: Some(i),
        };
        let t = total_loss(&mut g, &parts, &LossWeights::default()).unwrap();
        assert!((g.item(t) - 5.01).abs() < 1e-15);
        let only = LossWeights {
            lambda_disc: 1.0,
            lambda_aux: 0.0,
            lambda_img: 0.0,
        };
        let t = total_loss(&mut g, &parts, &only).unwrap();
        assert_eq!(g.item(t), 2.0);
        assert_eq!(LossWeights::default().combine(2.0, 1.0, 3.0), 2.0 + 0.01 + 3.0);
    }
}
