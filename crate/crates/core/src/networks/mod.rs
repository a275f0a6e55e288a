//! The decomposition networks: illumination estimator `N_I`, shared
//! reflectance extractor `N_R`, glare estimator `N_G`, and the
//! reconstruction `R = R̂ + G`, `Î = L·R`.

mod params;
mod rtb;

pub use params::{BoundModel, ConvParams, Layout, ModelParams, NormParams, RtbParams};
pub use rtb::{channel_attention, rtb_forward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// `x + conv3x3(gelu(conv3x3(LN(x))))`
    SimpleResidual,
    /// Multi-head transposed (channel) attention followed by a gated
    /// depthwise feed-forward, each with a pre-norm residual.
    TransposedAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Width of the hidden layers of `N_I`.
    pub illum_channels: usize,
    /// Feature width of `N_R` and `N_G`.
    pub feat_channels: usize,
    pub reflect_blocks: usize,
    /// Number of illumination-modulated recurrences in `N_G`.
    pub glare_blocks: usize,
    pub block: BlockVariant,
    pub heads: usize,
    pub ffn_expansion: f64,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            illum_channels: 16,
            feat_channels: 16,
            reflect_blocks: 2,
            glare_blocks: 2,
            block: BlockVariant::SimpleResidual,
            heads: 2,
            ffn_expansion: 2.0,
            leaky_slope: 0.2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.illum_channels == 0 || self.feat_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.heads == 0 || self.feat_channels % self.heads != 0 {
            return Err(Error::config(format!(
                "feat_channels {} not divisible by heads {}",
                self.feat_channels, self.heads
            )));
        }
        if !(self.ffn_expansion > 0.0) {
            return Err(Error::config("ffn_expansion must be positive"));
        }
        Ok(())
    }

    pub fn rtb(&self) -> RtbConfig {
        RtbConfig {
            channels: self.feat_channels,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            variant: self.block,
        }
    }

    pub(crate) fn ffn_hidden(&self) -> usize {
        ((self.feat_channels as f64 * self.ffn_expansion).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtbConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: f64,
    pub variant: BlockVariant,
}

impl RtbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::shape(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

pub(crate) fn conv<T: Scalar>(g: &mut Graph<T>, m: &BoundModel<'_>, p: &ConvParams, x: Var) -> Result<Var> {
    g.conv2d(x, m.vars[p.weight], p.bias.map(|b| m.vars[b]), 1, p.padding, p.groups)
}

fn expect_channels<T: Scalar>(g: &Graph<T>, x: Var, c: usize, what: &str) -> Result<()> {
    match g.shape(x) {
        [_, cc, _, _] if *cc == c => Ok(()),
        s => Err(Error::shape(format!("{what} must be B×{c}×H×W, got {s:?}"))),
    }
}

/// `L = sigmoid(conv stack(I))`, one channel, strictly inside (0, 1).
pub fn illum_estimate<T: Scalar>(g: &mut Graph<T>, m: &BoundModel<'_>, image: Var) -> Result<Var> {
    expect_channels(g, image, 3, "illumination input")?;
    let slope = T::of(m.arch.leaky_slope);
    let mut x = image;
    let last = m.layout.illum.len() - 1;
    for (i, layer) in m.layout.illum.iter().enumerate() {
        x = conv(g, m, layer, x)?;
        if i < last {
            x = g.leaky_relu(x, slope);
        }
    }
    Ok(g.sigmoid(x))
}

/// `R̂ = N_R(I_u, I_o)`; the input order is part of the contract.
pub fn reflectance_extract<T: Scalar>(g: &mut Graph<T>, m: &BoundModel<'_>, under: Var, over: Var) -> Result<Var> {
    expect_channels(g, under, 3, "underexposed input")?;
    expect_channels(g, over, 3, "overexposed input")?;
    if g.shape(under) != g.shape(over) {
        return Err(Error::shape(format!(
            "under/over shapes differ: {:?} vs {:?}",
            g.shape(under),
            g.shape(over)
        )));
    }
    let cfg = m.arch.rtb();
    let mut x = g.concat_channels(&[under, over])?;
    x = conv(g, m, &m.layout.refl_embed, x)?;
    for block in &m.layout.refl_blocks {
        x = rtb_forward(g, m, block, &cfg, x)?;
    }
    x = conv(g, m, &m.layout.refl_proj, x)?;
    Ok(g.sigmoid(x))
}

/// Glare from the shared reflectance and one illumination map.
///
/// `Φ₀ = embed(R̂)`, `Φₖ₊₁ = Φₖ + RTB(Φₖ)·L`, `G = softplus(head(Φ_N)) ≥ 0`.
pub fn glare_estimate<T: Scalar>(g: &mut Graph<T>, m: &BoundModel<'_>, r_hat: Var, illum: Var) -> Result<Var> {
    expect_channels(g, r_hat, 3, "shared reflectance")?;
    expect_channels(g, illum, 1, "illumination")?;
    let (rs, ls) = (g.shape(r_hat), g.shape(illum));
    if rs[0] != ls[0] || rs[2..] != ls[2..] {
        return Err(Error::shape(format!("reflectance {rs:?} and illumination {ls:?} differ spatially")));
    }
    let cfg = m.arch.rtb();
    let mut phi = conv(g, m, &m.layout.glare_embed, r_hat)?;
    for block in &m.layout.glare_blocks {
        let update = rtb_forward(g, m, block, &cfg, phi)?;
        let modulated = g.mul(update, illum)?;
        phi = g.add(phi, modulated)?;
    }
    let head = conv(g, m, &m.layout.glare_head, phi)?;
    Ok(g.softplus(head))
}

/// Distorted reflectance `R = R̂ + G` and reconstruction `Î = L·R`.
pub fn reconstruct<T: Scalar>(g: &mut Graph<T>, illum: Var, r_hat: Var, glare: Var) -> Result<(Var, Var)> {
    let r = g.add(r_hat, glare)?;
    let i_hat = g.mul(illum, r)?;
    Ok((r, i_hat))
}
