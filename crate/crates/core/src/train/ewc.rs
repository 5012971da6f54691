//! Elastic weight consolidation with a diagonal Fisher estimate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::batch_gradient;
use crate::adapt::NcadaptModel;
use crate::autodiff::{Rng, Tensor};
use crate::data::Case;
use crate::error::{Error, Result};

/// Anchor of one protected tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcAnchor {
    pub theta_star: Tensor<f32>,
    pub fisher: Tensor<f32>,
}

/// Consolidation state left behind by one finished stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub lambda: f64,
    /// Keyed by parameter name.
    pub anchors: BTreeMap<String, EwcAnchor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda: f64,
    /// Mini-batches averaged into the Fisher estimate.
    pub fisher_batches: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            fisher_batches: 8,
        }
    }
}

/// Mean over `n_batches` random mini-batches of the squared batch gradient,
/// for every trainable tensor, with the current values as anchors.
pub fn ewc_fisher(
    model: &NcadaptModel,
    data: &[Case],
    n_batches: usize,
    batch_size: usize,
    lambda: f64,
    rng: &Rng,
) -> Result<EwcState> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("Fisher estimate needs data".into()));
    }
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("Fisher estimate needs at least one non-empty batch".into()));
    }
    let domain = model
        .active_domain()
        .ok_or_else(|| Error::InvalidArgument("model has no domains".into()))?;
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for b in 0..n_batches {
        let mut pick = rng.fork_path(&[0, b as u64]);
        let batch: Vec<&Case> = (0..batch_size).map(|_| &data[pick.below(data.len())]).collect();
        let masks = rng.fork_path(&[1, b as u64]);
        let (_, grads) = batch_gradient(model, &batch, domain, &masks)?;
        for (i, g) in grads {
            let acc = sums.entry(i).or_insert_with(|| vec![0.0; g.len()]);
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a += (v as f64) * (v as f64);
            }
        }
    }
    let anchors = sums
        .into_iter()
        .map(|(i, acc)| {
            let p = &model.params()[i];
            let fisher = acc.iter().map(|&s| (s / n_batches as f64) as f32).collect();
            Ok((
                p.name.clone(),
                EwcAnchor {
                    theta_star: p.value.clone(),
                    fisher: Tensor::from_vec(p.value.shape(), fisher)?,
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(EwcState { lambda, anchors })
}

/// `Σ_states (λ/2) Σ_i F_i (θ_i − θ*_i)²` and its gradient `λ F (θ − θ*)`
/// for every trainable tensor of `model`.
pub fn ewc_penalty(model: &NcadaptModel, states: &[EwcState]) -> Result<(f64, BTreeMap<usize, Tensor<f32>>)> {
    let mut value = 0.0f64;
    let mut grads: BTreeMap<usize, Tensor<f32>> = BTreeMap::new();
    for state in states {
        for (i, p) in model.params().iter().enumerate() {
            let Some(anchor) = state.anchors.get(&p.name) else { continue };
            if anchor.theta_star.shape() != p.value.shape() || anchor.fisher.shape() != p.value.shape() {
                return Err(Error::Shape(format!("consolidation anchor for '{}' has the wrong shape", p.name)));
            }
            let (v, g) = anchor_penalty(&p.value, anchor, state.lambda);
            value += v;
            if p.trainable {
                let entry = grads.entry(i).or_insert_with(|| p.value.zeros_like());
                for (a, &b) in entry.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok((value, grads))
}

/// Penalty `(λ/2) Σ F (θ − θ*)²` of one tensor and its gradient.
pub fn anchor_penalty(theta: &Tensor<f32>, anchor: &EwcAnchor, lambda: f64) -> (f64, Tensor<f32>) {
    let mut value = 0.0f64;
    let grad = theta
        .data()
        .iter()
        .zip(anchor.theta_star.data())
        .zip(anchor.fisher.data())
        .map(|((&t, &s), &f)| {
            let d = t as f64 - s as f64;
            value += 0.5 * lambda * f as f64 * d * d;
            (lambda * f as f64 * d) as f32
        })
        .collect();
    (value, Tensor::from_parts(theta.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn hand_example() {
        let anchor = EwcAnchor {
            theta_star: scalar(1.0),
            fisher: scalar(2.0),
        };
        let (v, g) = anchor_penalty(&scalar(4.0), &anchor, 0.4);
        assert!((v - 3.6).abs() < 1e-12);
        assert!((g.data()[0] - 2.4).abs() < 1e-6);
        let (v, g) = anchor_penalty(&scalar(1.0), &anchor, 0.4);
        assert_eq!((v, g.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Rng::new(3, 0);
        let theta = Tensor::<f32>::uniform(&[6], -1.0, 1.0, &mut rng).unwrap();
        let anchor = EwcAnchor {
            theta_star: Tensor::uniform(&[6], -1.0, 1.0, &mut rng).unwrap(),
            fisher: Tensor::uniform(&[6], 0.0, 2.0, &mut rng).unwrap(),
        };
        let (_, g) = anchor_penalty(&theta, &anchor, 0.4);
        let eps = 1e-2f32;
        for k in 0..6 {
            let mut up = theta.clone();
            up.data_mut()[k] += eps;
            let mut down = theta.clone();
            down.data_mut()[k] -= eps;
            let numeric = (anchor_penalty(&up, &anchor, 0.4).0 - anchor_penalty(&down, &anchor, 0.4).0)
                / (2.0 * eps as f64);
            let err = crate::autodiff::relative_error(g.data()[k] as f64, numeric);
            assert!(err < 1e-3, "coordinate {k}: {err}");
        }
    }
}
