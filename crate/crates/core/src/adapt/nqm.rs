//! Variance-based quality scoring of stochastic predictions and the
//! label-free choice of a domain head.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::NcadaptModel;
use crate::autodiff::{Rng, Tensor};
use crate::error::{Error, Result};

/// Which end of the quality score wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NqmRule {
    /// Lowest normalised spread: the most self-consistent head.
    #[default]
    Min,
    Max,
}

impl fmt::Display for NqmRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NqmRule::Min => "min",
            NqmRule::Max => "max",
        })
    }
}

impl FromStr for NqmRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(NqmRule::Min),
            "max" => Ok(NqmRule::Max),
            _ => Err(Error::InvalidArgument(format!("unknown selection rule '{s}'"))),
        }
    }
}

/// `Σ sd / Σ mean` over pixels, where `sd` and `mean` are the per-pixel
/// population statistics across the maps. Returns `+∞` when the mean map
/// sums to zero.
pub fn nqm_score(maps: &[Tensor<f32>]) -> Result<f64> {
    if maps.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "quality score needs at least 2 maps, got {}",
            maps.len()
        )));
    }
    let shape = maps[0].shape();
    if let Some(m) = maps.iter().find(|m| m.shape() != shape) {
        return Err(Error::Shape(format!("map {:?} differs from {shape:?}", m.shape())));
    }
    let n = maps.len() as f64;
    let (mut sd_sum, mut mean_sum) = (0.0f64, 0.0f64);
    for i in 0..maps[0].len() {
        let mean = maps.iter().map(|m| m.data()[i] as f64).sum::<f64>() / n;
        let var = maps
            .iter()
            .map(|m| (m.data()[i] as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        sd_sum += var.sqrt();
        mean_sum += mean;
    }
    Ok(if mean_sum > 0.0 { sd_sum / mean_sum } else { f64::INFINITY })
}

/// Repeated stochastic inference of one head.
#[derive(Debug, Clone)]
pub struct HeadPrediction {
    pub domain: usize,
    /// Mean foreground probability over the samples.
    pub mean: Tensor<f32>,
    /// `mean > 0.5`, as `0`/`1`.
    pub mask: Tensor<f32>,
    pub nqm: f64,
}

/// Runs head `domain` `n_samples` times, sample `s` on stream
/// `rng.fork_path([domain, s])`.
pub fn predict_head(
    model: &NcadaptModel,
    image: &Tensor<f32>,
    domain: usize,
    n_samples: usize,
    rng: &Rng,
) -> Result<HeadPrediction> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one inference sample".into()));
    }
    let maps: Vec<Tensor<f32>> = (0..n_samples)
        .into_par_iter()
        .map(|s| model.infer(image, domain, &rng.fork_path(&[domain as u64, s as u64])))
        .collect::<Result<_>>()?;
    let nqm = if n_samples >= 2 { nqm_score(&maps)? } else { f64::NAN };
    let mut mean = maps[0].zeros_like();
    for m in &maps {
        for (a, &b) in mean.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    let inv = 1.0 / n_samples as f32;
    let mean = mean.map(|v| v * inv);
    let mask = mean.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
    Ok(HeadPrediction {
        domain,
        mean,
        mask,
        nqm,
    })
}

/// Outcome of label-free head selection.
#[derive(Debug, Clone)]
pub struct HeadChoice {
    pub domain: usize,
    pub prediction: Tensor<f32>,
    /// `(domain, score)` for every head, in domain order.
    pub scores: Vec<(usize, f64)>,
}

/// Scores every head with [`nqm_score`] and keeps the best under `rule`;
/// ties go to the lowest domain id, and a non-finite score never beats a
/// finite one.
pub fn select_head(
    model: &NcadaptModel,
    image: &Tensor<f32>,
    n_samples: usize,
    rng: &Rng,
    rule: NqmRule,
) -> Result<HeadChoice> {
    let heads = model.heads();
    if heads.is_empty() {
        return Err(Error::InvalidArgument("model has no domains".into()));
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "head selection needs at least 2 samples, got {n_samples}"
        )));
    }
    let mut preds: Vec<HeadPrediction> = heads
        .iter()
        .map(|&d| predict_head(model, image, d, n_samples, rng))
        .collect::<Result<_>>()?;
    let better = |a: f64, b: f64| match (a.is_finite(), b.is_finite()) {
        (true, false) => true,
        (false, _) => false,
        (true, true) => match rule {
            NqmRule::Min => a < b,
            NqmRule::Max => a > b,
        },
    };
    let mut best = 0;
    for (i, p) in preds.iter().enumerate().skip(1) {
        if better(p.nqm, preds[best].nqm) {
            best = i;
        }
    }
    let scores = preds.iter().map(|p| (p.domain, p.nqm)).collect();
    let winner = preds.swap_remove(best);
    Ok(HeadChoice {
        domain: winner.domain,
        prediction: winner.mask,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_example() {
        assert_eq!(nqm_score(&[t(&[1.0, 0.0]), t(&[0.0, 0.0])]).unwrap(), 1.0);
    }

    #[test]
    fn identical_maps_score_zero() {
        let m = t(&[0.2, 0.9, 0.4]);
        assert_eq!(nqm_score(&[m.clone(), m.clone(), m]).unwrap(), 0.0);
    }

    #[test]
    fn empty_maps_are_infinite() {
        assert_eq!(nqm_score(&[t(&[0.0]), t(&[0.0])]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn scale_invariant() {
        let a = [t(&[0.3, 0.1, 0.8]), t(&[0.5, 0.0, 0.6]), t(&[0.2, 0.2, 0.9])];
        let scaled: Vec<_> = a.iter().map(|m| m.map(|v| v * 0.25)).collect();
        let (x, y) = (nqm_score(&a).unwrap(), nqm_score(&scaled).unwrap());
        assert!((x - y).abs() < 1e-6 * x, "{x} vs {y}");
    }

    #[test]
    fn errors() {
        assert!(nqm_score(&[t(&[1.0])]).is_err());
        assert!(nqm_score(&[t(&[1.0]), t(&[1.0, 2.0])]).is_err());
        assert!("median".parse::<NqmRule>().is_err());
    }
}
