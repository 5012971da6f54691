//! Soft-Dice plus focal loss on logits, with a hand-derived gradient.

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Dice smoothing term.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Focal focusing exponent.
pub const FOCAL_GAMMA: f64 = 2.0;

/// `log σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Value and gradient (w.r.t. `logits`) of
/// `1 − (2Σpt + ε)/(Σp + Σt + ε) + mean(focal)`, with `p = σ(logits)` and
/// the binary focal term `−t q^γ log p − (1−t) p^γ log q`, `q = 1 − p`.
///
/// Accumulation runs in `f64` whatever the element type.
pub fn dice_focal_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} and target {:?} differ",
            logits.shape(),
            target.shape()
        )));
    }
    if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::InvalidArgument("target values must be 0 or 1".into()));
    }
    let n = logits.len() as f64;
    let g = FOCAL_GAMMA;
    let mut p = Vec::with_capacity(logits.len());
    let (mut inter, mut psum, mut tsum, mut focal) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut focal_grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.data().iter().zip(target.data()) {
        let z = z.f64();
        let pi = 1.0 / (1.0 + (-z).exp());
        let qi = 1.0 - pi;
        let (lp, lq) = (log_sigmoid(z), log_sigmoid(-z));
        if t == T::one() {
            focal -= qi.powf(g) * lp;
            focal_grad.push(g * pi * qi.powf(g) * lp - qi.powf(g + 1.0));
            inter += pi;
            tsum += 1.0;
        } else {
            focal -= pi.powf(g) * lq;
            focal_grad.push(-g * pi.powf(g) * qi * lq + pi.powf(g + 1.0));
        }
        psum += pi;
        p.push(pi);
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = psum + tsum + DICE_SMOOTH;
    let value = 1.0 - num / den + focal / n;
    let grad: Vec<T> = p
        .iter()
        .zip(target.data())
        .zip(&focal_grad)
        .map(|((&pi, &t), &fg)| {
            let dd_dp = -(2.0 * t.f64() * den - num) / (den * den);
            T::of(dd_dp * pi * (1.0 - pi) + fg / n)
        })
        .collect();
    Ok((T::of(value), Tensor::from_vec(logits.shape(), grad)?))
}

/// Records the loss of a logit node as a scalar node.
pub fn dice_focal_on_tape<T: Real>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let (value, grad) = dice_focal_loss(tape.value(logits), target)?;
    tape.scalar_fn(logits, value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Rng};

    #[test]
    fn saturated_correct_prediction_is_near_zero() {
        let z = Tensor::<f64>::full(&[4, 4], 20.0).unwrap();
        let t = Tensor::<f64>::full(&[4, 4], 1.0).unwrap();
        let (v, _) = dice_focal_loss(&z, &t).unwrap();
        assert!(v < 1e-3, "{v}");
    }

    #[test]
    fn half_probability_closed_form() {
        // p = 0.5 everywhere, 8 of 16 pixels foreground.
        let z = Tensor::<f64>::zeros(&[16]).unwrap();
        let t = Tensor::<f64>::from_vec(&[16], (0..16).map(|i| (i % 2) as f64).collect()).unwrap();
        let (v, _) = dice_focal_loss(&z, &t).unwrap();
        let dice = 1.0 - (2.0 * 0.5 * 8.0 + DICE_SMOOTH) / (0.5 * 16.0 + 8.0 + DICE_SMOOTH);
        let focal = 0.25 * std::f64::consts::LN_2;
        assert!((v - (dice + focal)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed, 0);
            let z = Tensor::<f64>::uniform(&[5, 6], -3.0, 3.0, &mut rng).unwrap();
            let t = Tensor::<f64>::from_vec(&[5, 6], (0..30).map(|_| rng.below(2) as f64).collect()).unwrap();
            let err = finite_diff_check(|tape, v| dice_focal_on_tape(tape, v[0], &t), &[z], 1e-6).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn rejects_soft_targets() {
        let z = Tensor::<f64>::zeros(&[2]).unwrap();
        let t = Tensor::<f64>::from_vec(&[2], vec![0.5, 1.0]).unwrap();
        assert!(dice_focal_loss(&z, &t).is_err());
        assert!(dice_focal_loss(&z, &Tensor::zeros(&[3]).unwrap()).is_err());
    }
}
