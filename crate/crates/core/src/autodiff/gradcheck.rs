//! Central-difference gradient checks, run in `f64`.

use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compares the tape gradient of `f` against central differences on every
/// coordinate of every parameter and returns the worst relative error.
///
/// `f` receives a fresh tape and the parameters recorded as leaves, and
/// must return a scalar node. It has to be deterministic: any randomness
/// (fire masks) must come from a fixed seed inside `f`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_coords(&f, params, eps, |p| (0..p.len()).collect())
}

/// Like [`finite_diff_check`], but probes at most `per_param` randomly chosen
/// coordinates of each parameter.
pub fn finite_diff_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    per_param: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(per_param);
            idx
        })
        .collect();
    let mut which = 0usize;
    let pick = |_: &Tensor<f64>| {
        let out = picks[which].clone();
        which += 1;
        out
    };
    check_coords(&f, params, eps, pick)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Tape(format!("gradient check needs a scalar, got {:?}", value.shape())));
    }
    Ok(value.data()[0])
}

fn check_coords<F>(
    f: &F,
    params: &[Tensor<f64>],
    eps: f64,
    mut coords: impl FnMut(&Tensor<f64>) -> Vec<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        for i in coords(param) {
            let orig = param.data()[i];
            probe[pi].data_mut()[i] = orig + eps;
            let up = eval(f, &probe)?;
            probe[pi].data_mut()[i] = orig - eps;
            let down = eval(f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
