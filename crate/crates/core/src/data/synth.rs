//! Synthetic segmentation domains.
//!
//! Every case draws one to three soft-edged ellipsoids. The label is the
//! union of their interiors; the image is the soft membership field pushed
//! through a per-domain intensity transform, a smooth additive bias field
//! and Gaussian noise, then clamped to `[0, 1]`. Domains share
//! label semantics and differ only in appearance and resolution.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Rng, Tensor};
use crate::error::{Error, Result};

const DATA_STREAM: u64 = 0xDA7A;
const MAX_RETRIES: u64 = 10;

/// Recipe for one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Per-axis extents, each at least 16.
    pub resolution: Vec<usize>,
    pub n_cases: usize,
    /// Inclusive range of ellipsoids per case, within `1..=3`.
    pub shapes: [usize; 2],
    /// Semi-axis range as a fraction of each extent.
    pub radius: [f64; 2],
    /// Width of the soft edge, in pixels.
    pub edge: f64,
    /// `image = shift + scale * field + bias + noise` before clamping.
    pub scale: f64,
    pub shift: f64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub seed: u64,
}

/// One image/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

impl DomainSpec {
    /// A clean domain at `resolution` with `n_cases` cases.
    pub fn base(name: &str, resolution: &[usize], n_cases: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            resolution: resolution.to_vec(),
            n_cases,
            shapes: [1, 3],
            radius: [0.12, 0.28],
            edge: 1.5,
            scale: 0.6,
            shift: 0.2,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            seed,
        }
    }

    /// Three domains of increasing shift; the third flips the contrast and
    /// changes resolution.
    pub fn benchmark(n_cases: usize, seed: u64) -> Vec<DomainSpec> {
        vec![
            DomainSpec {
                noise_sigma: 0.03,
                ..Self::base("clean", &[32, 32], n_cases, seed)
            },
            DomainSpec {
                scale: 0.35,
                shift: 0.5,
                noise_sigma: 0.08,
                bias_amplitude: 0.12,
                ..Self::base("noisy", &[32, 32], n_cases, seed + 1)
            },
            DomainSpec {
                scale: -0.55,
                shift: 0.8,
                noise_sigma: 0.05,
                bias_amplitude: 0.05,
                ..Self::base("inverted", &[48, 40], n_cases, seed + 2)
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("domain '{}': {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name".into());
        }
        if !(1..=3).contains(&self.resolution.len()) || self.resolution.iter().any(|&e| e < 16) {
            return bad(format!("resolution {:?} needs 1-3 extents of at least 16", self.resolution));
        }
        if self.n_cases == 0 {
            return bad("no cases".into());
        }
        let [lo, hi] = self.shapes;
        if !(1 <= lo && lo <= hi && hi <= 3) {
            return bad(format!("shape count range {:?} not within 1..=3", self.shapes));
        }
        let [rlo, rhi] = self.radius;
        if !(0.0 < rlo && rlo <= rhi && rhi < 0.5) {
            return bad(format!("radius range {:?} not within (0, 0.5)", self.radius));
        }
        let finite = [self.edge, self.scale, self.shift, self.noise_sigma, self.bias_amplitude];
        if finite.iter().any(|v| !v.is_finite()) || self.edge <= 0.0 || self.noise_sigma < 0.0 {
            return bad("edge must be positive, noise non-negative, all values finite".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

struct Ellipsoid {
    center: Vec<f64>,
    semi: Vec<f64>,
}

/// Soft membership of `p` in the union of `shapes`, plus the hard label.
fn membership(p: &[f64], shapes: &[Ellipsoid], edge: f64) -> (f64, bool) {
    let mut field = 0.0f64;
    let mut inside = false;
    for e in shapes {
        let r = p
            .iter()
            .zip(&e.center)
            .zip(&e.semi)
            .map(|((x, c), s)| ((x - c) / s).powi(2))
            .sum::<f64>()
            .sqrt();
        inside |= r < 1.0;
        // Signed distance to the boundary, measured along the smallest
        // semi-axis so the edge width is in pixels.
        let smin = e.semi.iter().cloned().fold(f64::INFINITY, f64::min);
        let d = (1.0 - r) * smin;
        field = field.max(1.0 / (1.0 + (-d / edge * 4.0).exp()));
    }
    (field, inside)
}

fn draw_case(spec: &DomainSpec, index: usize) -> Result<Case> {
    let rank = spec.resolution.len();
    let total: usize = spec.resolution.iter().product();
    let base = Rng::new(spec.seed, DATA_STREAM).fork(index as u64);
    for attempt in 0..=MAX_RETRIES {
        let mut rng = base.fork(attempt);
        let [lo, hi] = spec.shapes;
        let count = lo + rng.below(hi - lo + 1);
        let shapes: Vec<Ellipsoid> = (0..count)
            .map(|_| {
                let semi: Vec<f64> = spec
                    .resolution
                    .iter()
                    .map(|&n| n as f64 * rng.uniform_range(spec.radius[0], spec.radius[1]))
                    .collect();
                let center = spec
                    .resolution
                    .iter()
                    .map(|&n| rng.uniform_range(0.15, 0.85) * n as f64)
                    .collect();
                Ellipsoid { center, semi }
            })
            .collect();
        let phases: Vec<(f64, f64)> = spec
            .resolution
            .iter()
            .map(|&n| {
                let omega = std::f64::consts::TAU / n as f64 * rng.uniform_range(0.5, 1.5);
                (omega, rng.uniform_range(0.0, std::f64::consts::TAU))
            })
            .collect();

        let mut image = Vec::with_capacity(total);
        let mut label = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let p: Vec<f64> = idx.iter().map(|&i| i as f64 + 0.5).collect();
            let (field, inside) = membership(&p, &shapes, spec.edge);
            let bias = spec.bias_amplitude
                * p.iter()
                    .zip(&phases)
                    .map(|(x, (w, ph))| (w * x + ph).cos())
                    .sum::<f64>()
                / rank as f64;
            let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * rng.normal() } else { 0.0 };
            let v = spec.shift + spec.scale * field + bias + noise;
            image.push(v.clamp(0.0, 1.0) as f32);
            label.push(if inside { 1.0f32 } else { 0.0 });
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                if idx[axis] < spec.resolution[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        if label.iter().any(|&v| v > 0.0) {
            return Ok(Case {
                id: format!("case{index:03}"),
                image: Tensor::from_vec(&spec.resolution, image)?,
                label: Tensor::from_vec(&spec.resolution, label)?,
            });
        }
    }
    Err(Error::Data(format!(
        "domain '{}': case {index} has an empty foreground after {MAX_RETRIES} retries",
        spec.name
    )))
}

/// All cases of a domain; a pure function of the spec. Cases are drawn on
/// independent streams and generated in parallel.
pub fn gen_domain(spec: &DomainSpec) -> Result<Vec<Case>> {
    use rayon::prelude::*;
    spec.validate()?;
    (0..spec.n_cases)
        .into_par_iter()
        .map(|i| draw_case(spec, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_domain_image_is_affine_in_field() {
        let spec = DomainSpec {
            n_cases: 2,
            ..DomainSpec::base("a", &[20, 16], 2, 3)
        };
        for case in gen_domain(&spec).unwrap() {
            assert!(case.label.sum() > 0.0);
            for (&v, &l) in case.image.data().iter().zip(case.label.data()) {
                assert!((0.2..=0.8).contains(&v));
                // inside pixels sit above the 0.5 level of the soft field
                if l == 1.0 {
                    assert!(v >= 0.5 - 1e-6, "{v}");
                } else {
                    assert!(v <= 0.5 + 1e-6, "{v}");
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let ok = DomainSpec::base("a", &[16, 16], 1, 0);
        assert!(ok.validate().is_ok());
        for bad in [
            DomainSpec { resolution: vec![15, 16], ..ok.clone() },
            DomainSpec { shapes: [0, 2], ..ok.clone() },
            DomainSpec { radius: [0.3, 0.2], ..ok.clone() },
            DomainSpec { name: "../x".into(), ..ok.clone() },
            DomainSpec { noise_sigma: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn tiny_shapes_exhaust_retries() {
        // Semi-axes far below a pixel rarely cover a pixel centre.
        let spec = DomainSpec {
            radius: [1e-6, 2e-6],
            shapes: [1, 1],
            ..DomainSpec::base("dots", &[16, 16], 1, 0)
        };
        assert!(matches!(gen_domain(&spec), Err(Error::Data(_))));
    }
}
