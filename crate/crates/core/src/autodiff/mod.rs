//! Dense tensors, counter-based randomness and a small reverse-mode engine
//! covering the operations an NCA forward pass needs.

mod gradcheck;
mod kernels;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, relative_error};
pub use rng::{Rng, RngState};
pub use tape::{Activation, Direction, Gradients, Tape, Var};
pub use tensor::{Fill, Real, Tensor};

use crate::error::{Error, Result};

/// i.i.d. Bernoulli(`p`) draws, one per cell, as `0`/`1` values.
pub fn bernoulli_mask<T: Real>(spatial: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("fire probability {p} outside [0, 1]")));
    }
    let n: usize = spatial.iter().product();
    let data = (0..n)
        .map(|_| if rng.bernoulli(p) { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(spatial, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_extremes() {
        let mut rng = Rng::new(1, 1);
        let z: Tensor<f32> = bernoulli_mask(&[4, 4], 0.0, &mut rng).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o: Tensor<f32> = bernoulli_mask(&[4, 4], 1.0, &mut rng).unwrap();
        assert!(o.data().iter().all(|&v| v == 1.0));
        assert!(bernoulli_mask::<f32>(&[2], 1.5, &mut rng).is_err());
        assert!(bernoulli_mask::<f32>(&[2], -0.1, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_half_rate() {
        // seed 2024, stream 0: 10^4 cells
        let mut rng = Rng::new(2024, 0);
        let m: Tensor<f64> = bernoulli_mask(&[100, 100], 0.5, &mut rng).unwrap();
        let mean = m.mean();
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    }

    #[test]
    fn bernoulli_reproducible() {
        let a: Tensor<f32> = bernoulli_mask(&[8, 8], 0.5, &mut Rng::new(5, 9)).unwrap();
        let b: Tensor<f32> = bernoulli_mask(&[8, 8], 0.5, &mut Rng::new(5, 9)).unwrap();
        assert_eq!(a, b);
    }
}
