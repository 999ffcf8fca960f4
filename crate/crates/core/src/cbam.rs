//! Convolutional block attention: a channel gate followed by a spatial gate,
//! each multiplied into the feature map.
//!
//! ```text
//! Mc = σ(MLP(avgpool(F)) + MLP(maxpool(F)))          [B,C,1,1]
//! F' = Mc ⊗ F
//! Ms = σ(conv_k([mean_c(F'); max_c(F')]))            [B,1,H,W]
//! out = Ms ⊗ F'
//! ```
//!
//! The MLP is two pointwise convolutions with a ReLU between them and is
//! shared by both pooled descriptors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ParamStore};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbamConfig {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    /// Biases on both MLP layers.
    pub mlp_bias: bool,
}

impl Default for CbamConfig {
    fn default() -> Self {
        CbamConfig {
            channels: 16,
            reduction_ratio: 16,
            spatial_kernel: 7,
            mlp_bias: true,
        }
    }
}

impl CbamConfig {
    pub fn new(channels: usize) -> Self {
        CbamConfig {
            channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("cbam", "channels must be positive"));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::invalid("cbam", "reduction_ratio must be positive"));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::invalid(
                "cbam",
                format!("spatial_kernel must be odd, got {}", self.spatial_kernel),
            ));
        }
        Ok(())
    }

    /// Bottleneck width of the channel MLP, never below one.
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction_ratio).max(1)
    }

    /// Scalar parameter count of one block with this config.
    pub fn parameter_count(&self) -> usize {
        let (c, h, k) = (self.channels, self.hidden(), self.spatial_kernel);
        let mlp_bias = if self.mlp_bias { h + c } else { 0 };
        2 * c * h + mlp_bias + 2 * k * k + 1
    }
}

/// How the attention gates are applied during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Active,
    /// Gates forced to 1; the block is the identity.
    Bypass,
}

/// Both gates of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub channel_map: Var,
    pub spatial_map: Var,
}

#[derive(Clone, Debug)]
pub struct CbamBlock {
    pub cfg: CbamConfig,
    fc1: Conv,
    fc2: Conv,
    spatial: Conv,
}

impl CbamBlock {
    pub fn new(cfg: CbamConfig, store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden();
        let fc1 = Conv::new(
            store,
            &format!("{name}.mlp1"),
            cfg.channels,
            h,
            1,
            1,
            cfg.mlp_bias,
            true,
            rng,
        );
        let fc2 = Conv::new(
            store,
            &format!("{name}.mlp2"),
            h,
            cfg.channels,
            1,
            1,
            cfg.mlp_bias,
            true,
            rng,
        );
        let spatial = Conv::new(
            store,
            &format!("{name}.spatial"),
            2,
            1,
            cfg.spatial_kernel,
            1,
            true,
            true,
            rng,
        );
        Ok(CbamBlock { cfg, fc1, fc2, spatial })
    }

    fn check_channels(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.cfg.channels {
            return Err(Error::ShapeMismatch {
                op: "cbam",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(0), self.cfg.channels, 0, 0],
            });
        }
        Ok(())
    }

    fn mlp(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, vars, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, vars, h)
    }

    /// `[B,C,H,W] -> [B,C,1,1]` gate in (0,1).
    pub fn channel_attention(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        self.check_channels(g, x)?;
        let avg = g.global_avg_pool(x)?;
        let max = g.global_max_pool(x)?;
        let a = self.mlp(g, vars, avg)?;
        let m = self.mlp(g, vars, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }

    /// `[B,C,H,W] -> [B,1,H,W]` gate in (0,1).
    pub fn spatial_attention(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mean = g.channel_mean(x)?;
        let max = g.channel_max(x)?;
        let stacked = g.concat(&[mean, max], 1)?;
        let logits = self.spatial.forward(g, vars, stacked)?;
        Ok(g.sigmoid(logits))
    }

    /// Refined feature map plus the two gates that produced it.
    pub fn forward_with_maps(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<(Var, AttentionMaps)> {
        let channel_map = self.channel_attention(g, vars, x)?;
        let refined = g.mul_broadcast(x, channel_map)?;
        let spatial_map = self.spatial_attention(g, vars, refined)?;
        let out = g.mul_broadcast(refined, spatial_map)?;
        Ok((
            out,
            AttentionMaps {
                channel_map,
                spatial_map,
            },
        ))
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, mode: GateMode) -> Result<Var> {
        match mode {
            GateMode::Active => Ok(self.forward_with_maps(g, vars, x)?.0),
            GateMode::Bypass => {
                self.check_channels(g, x)?;
                Ok(x)
            }
        }
    }
}
