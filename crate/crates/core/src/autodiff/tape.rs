//! Reverse-mode differentiation over a linear op record.
//!
//! Every op appends one node holding its output value, so node order is a
//! topological order. [`Tape::backward`] walks the record in strict reverse,
//! accumulating gradients additively. Nodes that cannot reach a leaf are
//! marked as not needing gradients and are skipped entirely; frozen
//! parameters are recorded as constants to take advantage of this.

use super::kernels::{self, Grid3};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        taps: Grid3,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Down {
        input: Var,
        factor: usize,
    },
    Up {
        input: Var,
        factor: usize,
    },
    MulCells {
        input: Var,
        mask: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Concat(Var, Var),
    SetChannel {
        base: Var,
        channel: usize,
        src: Var,
    },
    Channel {
        input: Var,
        channel: usize,
    },
    Scalar {
        input: Var,
        local_grad: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `var`; zeros when `var` did not influence
    /// the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(self.shapes[var.0].clone(), vec![T::zero(); self.shapes[var.0].iter().product()]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads.get_mut(var.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::from_parts(self.shapes[var.0].clone(), vec![T::zero(); self.shapes[var.0].iter().product()]),
        }
    }
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn grid_of(what: &str, shape: &[usize]) -> Result<Grid3> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("{what}: expected [C, *S], got {shape:?}")));
    }
    Grid3::from_spatial(&shape[1..])
        .ok_or_else(|| Error::Shape(format!("{what}: spatial rank must be 1..=3, got {shape:?}")))
}

fn finite<T: Real>(what: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Index of the source cell for replicate-padded block pooling/replication.
fn block_source(out_extents: &[usize], in_extents: &[usize], factor: usize, down: bool) -> Vec<Vec<usize>> {
    // For each output flat index, the list of input flat indices that map to it (down)
    // or the single source (up).
    let rank = out_extents.len();
    let out_len: usize = out_extents.iter().product();
    let mut strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * in_extents[a + 1];
    }
    let mut result = Vec::with_capacity(out_len);
    let mut coord = vec![0usize; rank];
    for _ in 0..out_len {
        if down {
            let block: usize = factor.pow(rank as u32);
            let mut sources = Vec::with_capacity(block);
            let mut off = vec![0usize; rank];
            for _ in 0..block {
                let idx: usize = (0..rank)
                    .map(|a| (coord[a] * factor + off[a]).min(in_extents[a] - 1) * strides[a])
                    .sum();
                sources.push(idx);
                for a in (0..rank).rev() {
                    off[a] += 1;
                    if off[a] < factor {
                        break;
                    }
                    off[a] = 0;
                }
            }
            result.push(sources);
        } else {
            let idx: usize = (0..rank).map(|a| (coord[a] / factor) * strides[a]).sum();
            result.push(vec![idx]);
        }
        for a in (0..rank).rev() {
            coord[a] += 1;
            if coord[a] < out_extents[a] {
                break;
            }
            coord[a] = 0;
        }
    }
    result
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn node(&self, var: Var) -> Result<&Node<T>> {
        self.nodes
            .get(var.0)
            .ok_or_else(|| Error::Tape(format!("node {} is not recorded on this tape", var.0)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Per-channel "same" cross-correlation with zero padding.
    ///
    /// `kernel` is `[C, k^d]` with `k` odd; `bias` is `[C]`.
    pub fn conv_depthwise(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let x = &self.node(input)?.value;
        let kt = &self.node(kernel)?.value;
        let g = grid_of("conv_depthwise input", x.shape())?;
        let channels = x.channels();
        let rank = x.spatial().len();
        if kt.shape().len() != 2 || kt.shape()[0] != channels {
            return Err(Error::Shape(format!(
                "conv_depthwise kernel {:?} for {channels} channels",
                kt.shape()
            )));
        }
        let taps_len = kt.shape()[1];
        let k = (taps_len as f64).powf(1.0 / rank as f64).round() as usize;
        if k.pow(rank as u32) != taps_len {
            return Err(Error::Shape(format!(
                "conv_depthwise kernel extent {taps_len} is not k^{rank}"
            )));
        }
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("conv_depthwise needs odd k, got {k}")));
        }
        let taps = Grid3::kernel(k, rank);
        let bvals = match bias {
            Some(b) => {
                let bt = &self.node(b)?.value;
                same_shape("conv_depthwise bias", bt.shape(), &[channels])?;
                Some(bt.data())
            }
            None => None,
        };
        let n = x.cells();
        let mut out = vec![T::zero(); x.len()];
        for c in 0..channels {
            let o = &mut out[c * n..(c + 1) * n];
            if let Some(b) = bvals {
                o.fill(b[c]);
            }
            kernels::conv_forward(x.channel(c), o, g, taps, &kt.data()[c * taps_len..(c + 1) * taps_len]);
        }
        let value = finite("conv_depthwise", Tensor::from_parts(x.shape().to_vec(), out))?;
        let ng = self.any_grad(&[Some(input), Some(kernel), bias]);
        Ok(self.push(value, Op::Conv { input, kernel, bias, taps }, ng))
    }

    /// Per-cell linear map across channels: `[Cin, *S] -> [Cout, *S]`.
    pub fn pointwise_dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = &self.node(input)?.value;
        let w = &self.node(weight)?.value;
        if x.shape().len() < 2 {
            return Err(Error::Shape(format!("pointwise_dense input {:?}", x.shape())));
        }
        let cin = x.channels();
        if w.shape().len() != 2 || w.shape()[1] != cin {
            return Err(Error::Shape(format!(
                "pointwise_dense weight {:?} for {cin} input channels",
                w.shape()
            )));
        }
        let cout = w.shape()[0];
        let n = x.cells();
        let mut out = vec![T::zero(); cout * n];
        if let Some(b) = bias {
            let bt = &self.node(b)?.value;
            same_shape("pointwise_dense bias", bt.shape(), &[cout])?;
            for (o, &bv) in bt.data().iter().enumerate() {
                out[o * n..(o + 1) * n].fill(bv);
            }
        }
        kernels::dense_forward(x.data(), cin, n, w.data(), cout, &mut out);
        let mut shape = x.shape().to_vec();
        shape[0] = cout;
        let value = finite("pointwise_dense", Tensor::from_parts(shape, out))?;
        let ng = self.any_grad(&[Some(input), Some(weight), bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, ng))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Relu(input), ng))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let value = x.map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Sigmoid(input), ng))
    }

    /// Mean pooling (down) or nearest-neighbour replication (up) by an
    /// integer factor on every spatial axis. Down-sampling replicates the
    /// trailing edge when an extent is not a multiple of `factor`.
    pub fn resample(&mut self, input: Var, factor: usize, direction: Direction) -> Result<Var> {
        match direction {
            Direction::Down => self.downsample(input, factor),
            Direction::Up => {
                let x = &self.node(input)?.value;
                let target: Vec<usize> = x.spatial().iter().map(|&e| e * factor.max(1)).collect();
                self.upsample_to(input, factor, &target)
            }
        }
    }

    pub fn downsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument("resample factor must be >= 1".into()));
        }
        let x = &self.node(input)?.value;
        grid_of("resample input", x.shape())?;
        let in_ext = x.spatial().to_vec();
        let out_ext: Vec<usize> = in_ext.iter().map(|&e| e.div_ceil(factor)).collect();
        let map = block_source(&out_ext, &in_ext, factor, true);
        let inv = T::of(1.0 / factor.pow(in_ext.len() as u32) as f64);
        let (nin, nout) = (x.cells(), map.len());
        let mut out = vec![T::zero(); x.channels() * nout];
        for c in 0..x.channels() {
            let src = x.channel(c);
            for (o, sources) in map.iter().enumerate() {
                let s: T = sources.iter().map(|&i| src[i]).sum();
                out[c * nout + o] = s * inv;
            }
        }
        debug_assert_eq!(nin, in_ext.iter().product::<usize>());
        let mut shape = vec![x.channels()];
        shape.extend_from_slice(&out_ext);
        let value = Tensor::from_parts(shape, out);
        let ng = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Down { input, factor }, ng))
    }

    /// Nearest-neighbour up-sampling cropped to `target` extents.
    pub fn upsample_to(&mut self, input: Var, factor: usize, target: &[usize]) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument("resample factor must be >= 1".into()));
        }
        let x = &self.node(input)?.value;
        grid_of("resample input", x.shape())?;
        let in_ext = x.spatial();
        if target.len() != in_ext.len()
            || target
                .iter()
                .zip(in_ext)
                .any(|(&t, &e)| t > e * factor || t + factor <= e * factor)
        {
            return Err(Error::Shape(format!(
                "cannot up-sample {in_ext:?} by {factor} to {target:?}"
            )));
        }
        let map = block_source(target, in_ext, factor, false);
        let nout = map.len();
        let mut out = vec![T::zero(); x.channels() * nout];
        for c in 0..x.channels() {
            let src = x.channel(c);
            for (o, sources) in map.iter().enumerate() {
                out[c * nout + o] = src[sources[0]];
            }
        }
        let mut shape = vec![x.channels()];
        shape.extend_from_slice(target);
        let value = Tensor::from_parts(shape, out);
        let ng = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Up { input, factor }, ng))
    }

    /// Multiplies every channel by a spatial mask.
    pub fn mul_cells(&mut self, input: Var, mask: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let m = &self.node(mask)?.value;
        if m.shape() != x.spatial() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match spatial shape {:?}",
                m.shape(),
                x.spatial()
            )));
        }
        let n = x.cells();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (v, &mv) in row.iter_mut().zip(m.data()) {
                *v *= mv;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.any_grad(&[Some(input), Some(mask)]);
        Ok(self.push(value, Op::MulCells { input, mask }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape("add", x.shape(), y.shape())?;
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = finite("add", Tensor::from_parts(x.shape().to_vec(), out))?;
        let ng = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape("mul", x.shape(), y.shape())?;
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = finite("mul", Tensor::from_parts(x.shape().to_vec(), out))?;
        let ng = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = finite("scale", self.node(a)?.value.map(|v| v * factor))?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Scale(a, factor), ng))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sum();
        let value = finite("sum", Tensor::from_parts(vec![1], vec![s]))?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Sum(a), ng))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        if x.shape().len() < 2 {
            return Err(Error::Shape(format!("concat input {:?}", x.shape())));
        }
        same_shape("concat spatial", x.spatial(), y.spatial())?;
        let mut out = Vec::with_capacity(x.len() + y.len());
        out.extend_from_slice(x.data());
        out.extend_from_slice(y.data());
        let mut shape = x.shape().to_vec();
        shape[0] += y.channels();
        let value = Tensor::from_parts(shape, out);
        let ng = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Concat(a, b), ng))
    }

    /// Copy of `base` with one channel replaced by `src` (shape `[*S]`).
    pub fn set_channel(&mut self, base: Var, channel: usize, src: Var) -> Result<Var> {
        let (x, s) = (&self.node(base)?.value, &self.node(src)?.value);
        if x.shape().len() < 2 || channel >= x.channels() {
            return Err(Error::Shape(format!("set_channel {channel} on {:?}", x.shape())));
        }
        same_shape("set_channel source", s.shape(), x.spatial())?;
        let n = x.cells();
        let mut out = x.data().to_vec();
        out[channel * n..(channel + 1) * n].copy_from_slice(s.data());
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.any_grad(&[Some(base), Some(src)]);
        Ok(self.push(value, Op::SetChannel { base, channel, src }, ng))
    }

    /// One channel of a grid, shape `[*S]`.
    pub fn channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.shape().len() < 2 || channel >= x.channels() {
            return Err(Error::Shape(format!("channel {channel} of {:?}", x.shape())));
        }
        let value = Tensor::from_parts(x.spatial().to_vec(), x.channel(channel).to_vec());
        let ng = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Channel { input, channel }, ng))
    }

    /// Records a scalar function of `input` whose value and gradient were
    /// computed outside the tape (fused losses and penalties).
    pub fn scalar_fn(&mut self, input: Var, value: T, local_grad: Tensor<T>) -> Result<Var> {
        let x = &self.node(input)?.value;
        same_shape("scalar_fn gradient", local_grad.shape(), x.shape())?;
        if !value.is_finite() || !local_grad.is_finite() {
            return Err(Error::NonFinite("scalar_fn"));
        }
        let ng = self.nodes[input.0].needs_grad;
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![value]),
            Op::Scalar {
                input,
                local_grad: local_grad.into_data(),
            },
            ng,
        ))
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let seed = Tensor::from_parts(node.value.shape().to_vec(), vec![T::one()]);
        self.backward_from(loss, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `output`.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let node = self.node(output)?;
        same_shape("backward seed", seed.shape(), node.value.shape())?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.needs_grad {
            grads[output.0] = Some(seed.into_data());
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], var: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[var.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv {
                input,
                kernel,
                bias,
                taps,
            } => {
                let x = &self.nodes[input.0].value;
                let kt = &self.nodes[kernel.0].value;
                let gshape = Grid3::from_spatial(x.spatial()).expect("checked at record time");
                let n = x.cells();
                let tl = taps.len();
                if let Some(dx) = self.grad_buf(grads, input) {
                    for c in 0..x.channels() {
                        kernels::conv_backward_input(
                            &g[c * n..(c + 1) * n],
                            &mut dx[c * n..(c + 1) * n],
                            gshape,
                            taps,
                            &kt.data()[c * tl..(c + 1) * tl],
                        );
                    }
                }
                if let Some(dk) = self.grad_buf(grads, kernel) {
                    for c in 0..x.channels() {
                        kernels::conv_backward_kernel(
                            &g[c * n..(c + 1) * n],
                            x.channel(c),
                            gshape,
                            taps,
                            &mut dk[c * tl..(c + 1) * tl],
                        );
                    }
                }
                if let Some(db) = bias.and_then(|b| self.grad_buf(grads, b)) {
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += g[c * n..(c + 1) * n].iter().copied().sum();
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (cout, cin, n) = (w.shape()[0], w.shape()[1], x.cells());
                if let Some(dx) = self.grad_buf(grads, input) {
                    kernels::dense_backward_input(g, cout, n, w.data(), cin, dx);
                }
                if let Some(dw) = self.grad_buf(grads, weight) {
                    kernels::dense_backward_weight(g, cout, x.data(), cin, n, dw);
                }
                if let Some(db) = bias.and_then(|b| self.grad_buf(grads, b)) {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * n..(o + 1) * n].iter().copied().sum();
                    }
                }
            }
            Op::Relu(input) => {
                let x = &self.nodes[input.0].value;
                if let Some(dx) = self.grad_buf(grads, input) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x.data()) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                if let Some(dx) = self.grad_buf(grads, input) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Down { input, factor } => {
                let x = &self.nodes[input.0].value;
                let out_ext = node.value.spatial().to_vec();
                let map = block_source(&out_ext, x.spatial(), factor, true);
                let inv = T::of(1.0 / factor.pow(out_ext.len() as u32) as f64);
                let (nin, nout) = (x.cells(), map.len());
                if let Some(dx) = self.grad_buf(grads, input) {
                    for c in 0..x.channels() {
                        for (o, sources) in map.iter().enumerate() {
                            let share = g[c * nout + o] * inv;
                            for &i in sources {
                                dx[c * nin + i] += share;
                            }
                        }
                    }
                }
            }
            Op::Up { input, factor } => {
                let x = &self.nodes[input.0].value;
                let map = block_source(node.value.spatial(), x.spatial(), factor, false);
                let (nin, nout) = (x.cells(), map.len());
                if let Some(dx) = self.grad_buf(grads, input) {
                    for c in 0..x.channels() {
                        for (o, sources) in map.iter().enumerate() {
                            dx[c * nin + sources[0]] += g[c * nout + o];
                        }
                    }
                }
            }
            Op::MulCells { input, mask } => {
                let m = self.nodes[mask.0].value.data();
                let n = m.len();
                if let Some(dx) = self.grad_buf(grads, input) {
                    for (drow, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((d, &gv), &mv) in drow.iter_mut().zip(grow).zip(m) {
                            *d += gv * mv;
                        }
                    }
                }
                if let Some(dm) = self.grad_buf(grads, mask) {
                    let x = self.nodes[input.0].value.data();
                    for (xrow, grow) in x.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for ((d, &gv), &xv) in dm.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        kernels::axpy(d, T::one(), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(da) = self.grad_buf(grads, a) {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(d) = self.grad_buf(grads, a) {
                    kernels::axpy(d, factor, g);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.grad_buf(grads, a) {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Concat(a, b) => {
                let split = self.nodes[a.0].value.len();
                if let Some(d) = self.grad_buf(grads, a) {
                    kernels::axpy(d, T::one(), &g[..split]);
                }
                if let Some(d) = self.grad_buf(grads, b) {
                    kernels::axpy(d, T::one(), &g[split..]);
                }
            }
            Op::SetChannel { base, channel, src } => {
                let n = self.nodes[src.0].value.len();
                if let Some(d) = self.grad_buf(grads, base) {
                    for (i, (dv, &gv)) in d.iter_mut().zip(g).enumerate() {
                        if i / n != channel {
                            *dv += gv;
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, src) {
                    kernels::axpy(d, T::one(), &g[channel * n..(channel + 1) * n]);
                }
            }
            Op::Channel { input, channel } => {
                let n = node.value.len();
                if let Some(d) = self.grad_buf(grads, input) {
                    kernels::axpy(&mut d[channel * n..(channel + 1) * n], T::one(), g);
                }
            }
            Op::Scalar {
                input,
                ref local_grad,
            } => {
                if let Some(d) = self.grad_buf(grads, input) {
                    kernels::axpy(d, g[0], local_grad);
                }
            }
        }
    }
}
