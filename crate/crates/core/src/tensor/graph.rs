use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    /// Gathers one input element per output element; covers max pooling and
    /// channel/spatial max reductions.
    Select {
        input: Var,
        source: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ChannelMean(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Upsample2x(Var),
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    /// Scalar computed outside the tape with known local gradients.
    External {
        inputs: Vec<Var>,
        local_grads: Vec<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Values are recorded in execution order, so reverse
/// index order is a valid topological order for backpropagation.
///
/// A graph is single-use: build it, call [`Graph::backward`] once, read the
/// leaf gradients, drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First recorded convolution output that used `weight`.
    pub(crate) fn conv_output(&self, weight: Var) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| matches!(n.op, Op::Conv2d { weight: w, .. } if w == weight))
            .map(Var)
    }

    /// Gradient accumulated by [`Graph::backward`]; `None` for values the
    /// loss does not depend on or that do not require grad.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product where `b` broadcasts along any axis on which its
    /// extent is 1 (e.g. `[B,C,1,1]` or `[B,1,H,W]` against `[B,C,H,W]`).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let map = broadcast_map(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "mul_broadcast",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let bd = tb.data();
        let data = ta.data().iter().zip(&map).map(|(x, &j)| x * bd[j]).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MulBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect());
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn max_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, source) = kernels::max_pool2d(self.value(a), kernel, stride)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Select { input: a, source }, rg))
    }

    /// Mean over H and W: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, c, h, w) = t.dims4()?;
        let hw = h * w;
        let data = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::from_parts(vec![b, c, 1, 1], data);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::GlobalAvgPool(a), rg))
    }

    /// Max over H and W: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_max_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, c, h, w) = t.dims4()?;
        let hw = h * w;
        let source: Vec<usize> = t
            .data()
            .chunks(hw)
            .enumerate()
            .map(|(p, plane)| p * hw + argmax_first(plane))
            .collect();
        let data = source.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_parts(vec![b, c, 1, 1], data);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Select { input: a, source }, rg))
    }

    /// Mean over channels: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, c, h, w) = t.dims4()?;
        let hw = h * w;
        let x = t.data();
        let mut data = vec![0.0; b * hw];
        for bi in 0..b {
            let dst = &mut data[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        let out = Tensor::from_parts(vec![b, 1, h, w], data);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::ChannelMean(a), rg))
    }

    /// Max over channels: `[B,C,H,W] -> [B,1,H,W]`, lowest channel wins ties.
    pub fn channel_max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, c, h, w) = t.dims4()?;
        let hw = h * w;
        let x = t.data();
        let mut source = Vec::with_capacity(b * hw);
        for bi in 0..b {
            for p in 0..hw {
                let mut best = bi * c * hw + p;
                for ci in 1..c {
                    let idx = (bi * c + ci) * hw + p;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                source.push(best);
            }
        }
        let data = source.iter().map(|&i| x[i]).collect();
        let out = Tensor::from_parts(vec![b, 1, h, w], data);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Select { input: a, source }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest_2x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, c, h, w) = t.dims4()?;
        let x = t.data();
        let mut data = Vec::with_capacity(b * c * h * w * 4);
        for plane in x.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    data.push(v);
                    data.push(v);
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, 2 * h, 2 * w], data);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Upsample2x(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let out = permute_tensor(t, axes);
        let rg = self.needs(&[a]);
        Ok(self.push(
            out,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Records a scalar `value` computed outside the tape from `inputs`,
    /// whose derivative with respect to `inputs[i]` is `local_grads[i]`.
    pub fn external_scalar(&mut self, inputs: &[Var], value: f64, local_grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != local_grads.len() {
            return Err(Error::invalid(
                "external_scalar",
                format!("{} inputs but {} gradients", inputs.len(), local_grads.len()),
            ));
        }
        for (v, lg) in inputs.iter().zip(&local_grads) {
            if lg.shape() != self.shape(*v) {
                return Err(Error::ShapeMismatch {
                    op: "external_scalar",
                    left: self.shape(*v).to_vec(),
                    right: lg.shape().to_vec(),
                });
            }
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::External {
                inputs: inputs.to_vec(),
                local_grads,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`, populating gradients for every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let gout = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), &gout, *stride, *padding)?;
                self.accumulate(grads, *input, cg.input.into_data());
                self.accumulate(grads, *weight, cg.weight.into_data());
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias.into_data());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::MulBroadcast(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let map = broadcast_map(ta.shape(), tb.shape()).expect("checked in forward");
                if self.requires_grad(*a) {
                    let ga = g.iter().zip(&map).map(|(gv, &j)| gv * tb.data()[j]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for ((gv, &j), av) in g.iter().zip(&map).zip(ta.data()) {
                        gb[j] += gv * av;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.iter().map(|x| x * f).collect()),
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Select { input, source } => {
                let mut ga = vec![0.0; self.value(*input).numel()];
                for (gv, &j) in g.iter().zip(source) {
                    ga[j] += gv;
                }
                self.accumulate(grads, *input, ga);
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.value(*a).dims4()?;
                let hw = h * w;
                let mut ga = Vec::with_capacity(g.len() * hw);
                for gv in g {
                    ga.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ChannelMean(a) => {
                let (b, c, h, w) = self.value(*a).dims4()?;
                let hw = h * w;
                let mut ga = Vec::with_capacity(b * c * hw);
                for bi in 0..b {
                    let src = &g[bi * hw..(bi + 1) * hw];
                    for _ in 0..c {
                        ga.extend(src.iter().map(|v| v / c as f64));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let len = self.value(*v).shape()[*axis] * inner;
                        parts[k].extend_from_slice(&g[pos..pos + len]);
                        pos += len;
                    }
                }
                for (v, part) in inputs.iter().zip(parts) {
                    self.accumulate(grads, *v, part);
                }
            }
            Op::Upsample2x(a) => {
                let (b, c, h, w) = self.value(*a).dims4()?;
                let mut ga = vec![0.0; b * c * h * w];
                let (oh, ow) = (2 * h, 2 * w);
                for plane in 0..b * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            ga[plane * h * w + (y / 2) * w + x / 2] += g[plane * oh * ow + y * ow + x];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gout = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                self.accumulate(grads, *input, permute_tensor(&gout, &inverse).into_data());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::External { inputs, local_grads } => {
                for (v, lg) in inputs.iter().zip(local_grads) {
                    let ga = lg.data().iter().map(|x| x * g[0]).collect();
                    self.accumulate(grads, *v, ga);
                }
            }
        }
        Ok(())
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// For each flat index of `a_shape`, the flat index into a same-rank
/// `b_shape` whose unit axes broadcast. `None` if incompatible.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if a_shape.len() != b_shape.len() || a_shape.iter().zip(b_shape).any(|(&a, &b)| b != 1 && b != a) {
        return None;
    }
    let rank = a_shape.len();
    let mut b_strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        b_strides[i] = if b_shape[i] == 1 { 0 } else { acc };
        acc *= b_shape[i];
    }
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let x = t.data();
    let mut data = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.numel() {
        data.push(x[idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., -2., 3., 4., 5., 6.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul_broadcast(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 2.5, -2.5]));
        let s = g.sigmoid(x);
        let z = g.silu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(z).data()[0], 0.0);
        assert!((g.value(s).data()[1] + g.value(s).data()[2] - 1.0).abs() < 1e-15);
        for &v in &[-800.0, 800.0] {
            let y = sigmoid(v);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 1.75));
        let avg = g.global_avg_pool(x).unwrap();
        assert!(g.value(avg).data().iter().all(|&v| v == 1.75));
        let y = g.constant(t(&[1, 3, 1, 1], &[1., 5., 3.]));
        let m = g.channel_max(y).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);
        let mean = g.channel_mean(y).unwrap();
        assert_eq!(g.value(mean).data(), &[3.0]);
        let gm = g.global_max_pool(y).unwrap();
        assert_eq!(g.value(gm).data(), &[1., 5., 3.]);
    }

    #[test]
    fn max_routes_to_first_tie() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[2., 2., 1., 2.]));
        let m = g.global_max_pool(x).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn structural() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 2, 3, 3]));
        let b = g.constant(Tensor::ones(&[2, 3, 3, 3]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5, 3, 3]);
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let u = g.upsample_nearest_2x(x).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let f = g.constant(t(&[1, 2, 1, 2], &[1., 2., 3., 4.]));
        let ones = g.constant(Tensor::ones(&[1, 2, 1, 1]));
        let m = g.mul_broadcast(f, ones).unwrap();
        assert_eq!(g.value(m), g.value(f));
        let bad = g.constant(Tensor::ones(&[1, 3, 1, 1]));
        assert!(g.mul_broadcast(f, bad).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::ones(&[2]));
        let y = g.add(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }
}
