//! The multi-level NCA backbone.
//!
//! A cell state is a `[C, *S]` grid: channel 0 carries the input image,
//! channel 1 the output logit and the remaining channels are hidden memory.
//! One update step perceives the neighbourhood with a depthwise convolution,
//! runs a two-layer bias-free MLP per cell and adds the result back to the
//! state on the cells selected by a Bernoulli fire mask.
//!
//! The forward pass runs the coarsest level first on a down-sampled image,
//! then up-samples the whole state to the next scale, rewrites the image
//! channel at that scale and continues there.

mod config;

pub use config::{AdapterPlacement, ArchConfig};

use crate::autodiff::{bernoulli_mask, Real, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const IMAGE_CHANNEL: usize = 0;
pub const LOGIT_CHANNEL: usize = 1;

/// Adapter weights recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    /// `[A, C]`
    pub down: Var,
    /// `[C, A]`
    pub up: Var,
}

/// One level's parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    /// `[C, k^d]`
    pub kernel: Var,
    /// `[C]`
    pub bias: Var,
    /// `[H, 2C]`
    pub mlp1: Var,
    /// `[C, H]`
    pub mlp2: Var,
    pub adapter: Option<AdapterVars>,
}

/// Plain-tensor parameters of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct NcaLevelParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub mlp1: Tensor<T>,
    pub mlp2: Tensor<T>,
    pub steps: usize,
    pub scale: usize,
}

impl<T: Real> NcaLevelParams<T> {
    /// Fresh parameters for `level`: kernel and first MLP layer uniform in
    /// `±1/sqrt(fan_in)`, bias zero, second MLP layer zero.
    pub fn init(arch: &ArchConfig, level: usize, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let c = arch.channels;
        let taps = arch.taps(level);
        let kb = T::of(1.0 / (taps as f64).sqrt());
        let mb = T::of(1.0 / ((2 * c) as f64).sqrt());
        Ok(Self {
            kernel: Tensor::uniform(&[c, taps], -kb, kb, rng)?,
            bias: Tensor::zeros(&[c])?,
            mlp1: Tensor::uniform(&[arch.hidden, 2 * c], -mb, mb, rng)?,
            mlp2: Tensor::zeros(&[c, arch.hidden])?,
            steps: arch.steps[level],
            scale: arch.level_scale(level),
        })
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len() + self.mlp1.len() + self.mlp2.len()
    }

    /// Records every tensor as a leaf.
    pub fn record(&self, tape: &mut Tape<T>) -> LevelVars {
        LevelVars {
            kernel: tape.leaf(self.kernel.clone()),
            bias: tape.leaf(self.bias.clone()),
            mlp1: tape.leaf(self.mlp1.clone()),
            mlp2: tape.leaf(self.mlp2.clone()),
            adapter: None,
        }
    }
}

/// Initial cell state for `image`: channel 0 holds the image, the rest is
/// zero.
pub fn seed_state<T: Real>(image: &Tensor<T>, arch: &ArchConfig) -> Result<Tensor<T>> {
    if image.shape().len() != arch.spatial_rank {
        return Err(Error::Shape(format!(
            "image rank {} does not match spatial rank {}",
            image.shape().len(),
            arch.spatial_rank
        )));
    }
    let n = image.len();
    let mut data = vec![T::zero(); arch.channels * n];
    data[..n].copy_from_slice(image.data());
    let mut shape = vec![arch.channels];
    shape.extend_from_slice(image.shape());
    Tensor::from_vec(&shape, data)
}

/// State concatenated with its depthwise perception: `[2C, *S]`.
pub fn perceive<T: Real>(tape: &mut Tape<T>, state: Var, level: &LevelVars) -> Result<Var> {
    let conv = tape.conv_depthwise(state, level.kernel, Some(level.bias))?;
    tape.concat(state, conv)
}

/// Residual bottleneck `h + up(relu(down(h)))`.
pub fn adapter_apply<T: Real>(tape: &mut Tape<T>, hidden: Var, adapter: &AdapterVars) -> Result<Var> {
    let z = tape.pointwise_dense(hidden, adapter.down, None)?;
    let z = tape.relu(z)?;
    let z = tape.pointwise_dense(z, adapter.up, None)?;
    tape.add(hidden, z)
}

/// One stochastic update: `s + mask * mlp2(relu(mlp1(perceive(s))))`, with
/// the level's adapter (if any) applied at `placement`.
pub fn nca_step<T: Real>(
    tape: &mut Tape<T>,
    state: Var,
    level: &LevelVars,
    placement: AdapterPlacement,
    fire_mask: Var,
) -> Result<Var> {
    let p = perceive(tape, state, level)?;
    let h = tape.pointwise_dense(p, level.mlp1, None)?;
    let h = tape.relu(h)?;
    let mut update = tape.pointwise_dense(h, level.mlp2, None)?;
    if let (Some(adapter), AdapterPlacement::Update) = (&level.adapter, placement) {
        update = adapter_apply(tape, update, adapter)?;
    }
    let masked = tape.mul_cells(update, fire_mask)?;
    let next = tape.add(state, masked)?;
    match (&level.adapter, placement) {
        (Some(adapter), AdapterPlacement::PostState) => adapter_apply(tape, next, adapter),
        _ => Ok(next),
    }
}

/// `steps` updates with a fresh fire mask per step drawn from `rng`.
pub fn nca_rollout<T: Real>(
    tape: &mut Tape<T>,
    state: Var,
    level: &LevelVars,
    steps: usize,
    arch: &ArchConfig,
    rng: &mut Rng,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    let spatial = tape.value(state).spatial().to_vec();
    let mut s = state;
    for _ in 0..steps {
        let mask = tape.constant(bernoulli_mask(&spatial, arch.fire_rate, rng)?);
        s = nca_step(tape, s, level, arch.adapter_placement, mask)?;
    }
    Ok(s)
}

/// Coarse-to-fine forward pass returning the logit map `[*S]`.
///
/// Level `l` runs with its own random stream forked from `rng`, so the
/// masks of one level do not depend on how many steps another level took.
pub fn m3d_forward<T: Real>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    levels: &[LevelVars],
    arch: &ArchConfig,
    rng: &Rng,
) -> Result<Var> {
    arch.validate()?;
    if levels.len() != arch.levels {
        return Err(Error::Shape(format!(
            "{} level parameter sets for {} levels",
            levels.len(),
            arch.levels
        )));
    }
    if image.shape().len() != arch.spatial_rank {
        return Err(Error::Shape(format!(
            "image rank {} does not match spatial rank {}",
            image.shape().len(),
            arch.spatial_rank
        )));
    }
    let coarsest = arch.level_scale(0);
    if image.shape().iter().any(|&e| e < coarsest) {
        return Err(Error::Shape(format!(
            "image {:?} smaller than coarse factor {coarsest}",
            image.shape()
        )));
    }
    let mut full_shape = vec![1];
    full_shape.extend_from_slice(image.shape());
    let img = tape.constant(image.clone().reshape(&full_shape)?);

    let mut state: Option<Var> = None;
    let mut prev_scale = 0usize;
    for (l, level) in levels.iter().enumerate() {
        let scale = arch.level_scale(l);
        let img_l = if scale > 1 { tape.downsample(img, scale)? } else { img };
        let img_channel = tape.channel(img_l, 0)?;
        let s = match state {
            None => {
                let seed = seed_state(tape.value(img_channel), arch)?;
                tape.constant(seed)
            }
            Some(prev) => {
                let target = tape.value(img_channel).shape().to_vec();
                let up = tape.upsample_to(prev, prev_scale / scale, &target)?;
                tape.set_channel(up, IMAGE_CHANNEL, img_channel)?
            }
        };
        let mut level_rng = rng.fork(l as u64);
        state = Some(nca_rollout(tape, s, level, arch.steps[l], arch, &mut level_rng)?);
        prev_scale = scale;
    }
    let state = state.expect("at least one level");
    tape.channel(state, LOGIT_CHANNEL)
}

/// Thresholded prediction from logits: `sigmoid(z) > 0.5`, i.e. `z > 0`.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    logits.map(|z| if z > T::zero() { T::one() } else { T::zero() })
}
