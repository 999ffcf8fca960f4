//! Parameter storage and the convolution layer the detector is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    /// Belongs to an attention block.
    pub attention: bool,
}

/// Ordered, named parameter list. Order is creation order and is stable
/// for a given config, which makes checkpoints and seeded init reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, attention: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
            attention,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn attention_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.attention)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `g` as a differentiable leaf. The returned
    /// vars are indexed by `ParamId`.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad))
            .collect()
    }
}

/// Uniform fan-in init, bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Same-padded `k×k` convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Conv {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_ch, in_ch, kernel, kernel], rng),
            ParamKind::Weight,
            attention,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[out_ch]),
                ParamKind::Bias,
                attention,
            )
        });
        Conv {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.conv2d(
            x,
            vars[self.weight.0],
            self.bias.map(|b| vars[b.0]),
            self.stride,
            self.padding,
        )
    }
}
