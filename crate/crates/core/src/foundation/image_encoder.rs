use rand::Rng;

use super::{norm, register_norm, FoundationDims, IMAGE_ENCODER};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binding, Owner, ParameterRegistry};

/// Which sublayer of an encoder block an adapter runs alongside.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Attention,
    Mlp,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Attention => "attn",
            Stage::Mlp => "mlp",
        }
    }
}

/// Residual-parallel hooks injected into every encoder block.
///
/// Block `i` computes `x + attn(x) + delta(i, Attention, x)` and then
/// `y + mlp(y) + delta(i, Mlp, y)`.
pub trait BlockAdapters {
    fn blocks(&self) -> usize;
    fn delta(&self, b: &Binding, block: usize, stage: Stage, x: Var) -> Result<Var>;
}

pub(super) fn register(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    d: &FoundationDims,
) -> Result<()> {
    let o = Owner::ImageEncoder;
    let c = d.width;
    nn::register_conv(reg, rng, o, &format!("{IMAGE_ENCODER}.patch_embed"), 3, c, d.patch_size)?;
    for i in 0..d.blocks {
        let p = format!("{IMAGE_ENCODER}.block{i}");
        register_norm(reg, o, &format!("{p}.norm1"), c)?;
        nn::register_attention(reg, rng, o, &format!("{p}.attn"), c, c, c, Some(c))?;
        register_norm(reg, o, &format!("{p}.norm2"), c)?;
        nn::register_linear(reg, rng, o, &format!("{p}.mlp.fc1"), c, c * d.mlp_ratio)?;
        nn::register_linear(reg, rng, o, &format!("{p}.mlp.fc2"), c * d.mlp_ratio, c)?;
    }
    nn::register_linear(reg, rng, o, &format!("{IMAGE_ENCODER}.neck.proj"), c, d.embed_dim)?;
    register_norm(reg, o, &format!("{IMAGE_ENCODER}.neck.norm"), d.embed_dim)
}

pub(super) fn forward(
    b: &Binding,
    d: &FoundationDims,
    img: Var,
    adapters: Option<&dyn BlockAdapters>,
) -> Result<Var> {
    let g = b.graph();
    let s = g.shape(img);
    if s.len() != 4 || s[1] != 3 || s[2] != d.input_size || s[3] != d.input_size {
        return Err(Error::shape(format!(
            "image encoder expects [B, 3, {0}, {0}], got {s:?}",
            d.input_size
        )));
    }
    if let Some(a) = adapters {
        if a.blocks() != d.blocks {
            return Err(Error::invalid(format!(
                "{} adapter pairs for {} encoder blocks",
                a.blocks(),
                d.blocks
            )));
        }
    }
    let grid = d.grid();
    let x = nn::conv(b, img, &format!("{IMAGE_ENCODER}.patch_embed"), d.patch_size, 0)?;
    let x = nn::to_tokens(g, x)?;
    let pe = g.constant(nn::sinusoidal_2d(grid, grid, d.width));
    let mut x = g.add(x, pe)?;

    for i in 0..d.blocks {
        let p = format!("{IMAGE_ENCODER}.block{i}");
        let h = norm(b, x, &format!("{p}.norm1"))?;
        let a = nn::attention(b, h, h, h, &format!("{p}.attn"), d.heads)?;
        let mut y = g.add(x, a)?;
        if let Some(ad) = adapters {
            let delta = ad.delta(b, i, Stage::Attention, x)?;
            y = g.add(y, delta)?;
        }
        let h = norm(b, y, &format!("{p}.norm2"))?;
        let h = nn::linear(b, h, &format!("{p}.mlp.fc1"))?;
        let h = g.gelu(h);
        let m = nn::linear(b, h, &format!("{p}.mlp.fc2"))?;
        let mut z = g.add(y, m)?;
        if let Some(ad) = adapters {
            let delta = ad.delta(b, i, Stage::Mlp, y)?;
            z = g.add(z, delta)?;
        }
        x = z;
    }

    let x = nn::linear(b, x, &format!("{IMAGE_ENCODER}.neck.proj"))?;
    let x = norm(b, x, &format!("{IMAGE_ENCODER}.neck.norm"))?;
    nn::from_tokens(g, x, grid, grid)
}
