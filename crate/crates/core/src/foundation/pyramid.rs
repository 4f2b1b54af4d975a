use rand::Rng;

use super::{norm2d, register_norm, FoundationDims, SEMANTIC_ENCODER};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binding, Owner, ParameterRegistry};

pub(super) fn register(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    d: &FoundationDims,
) -> Result<()> {
    let o = Owner::SemanticEncoder;
    let w = d.pyramid_widths;
    nn::register_conv(reg, rng, o, &format!("{SEMANTIC_ENCODER}.stem"), 3, w[0], d.stem_stride)?;
    register_norm(reg, o, &format!("{SEMANTIC_ENCODER}.stem_norm"), w[0])?;
    for (i, &width) in w.iter().enumerate() {
        let p = format!("{SEMANTIC_ENCODER}.stage{}", i + 1);
        if i > 0 {
            register_norm(reg, o, &format!("{p}.down_norm"), w[i - 1])?;
            nn::register_conv(reg, rng, o, &format!("{p}.down"), w[i - 1], width, 2)?;
        }
        register_norm(reg, o, &format!("{p}.norm"), width)?;
        nn::register_conv(reg, rng, o, &format!("{p}.conv"), width, width, 3)?;
    }
    Ok(())
}

pub(super) fn forward(b: &Binding, d: &FoundationDims, img: Var) -> Result<[Var; 4]> {
    let g = b.graph();
    let s = g.shape(img);
    if s.len() != 4 || s[1] != 3 || s[2] != d.semantic_input || s[3] != d.semantic_input {
        return Err(Error::shape(format!(
            "semantic encoder expects [B, 3, {0}, {0}], got {s:?}",
            d.semantic_input
        )));
    }
    let mut x = nn::conv(b, img, &format!("{SEMANTIC_ENCODER}.stem"), d.stem_stride, 0)?;
    x = norm2d(b, x, &format!("{SEMANTIC_ENCODER}.stem_norm"))?;
    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        let p = format!("{SEMANTIC_ENCODER}.stage{}", i + 1);
        if i > 0 {
            x = norm2d(b, x, &format!("{p}.down_norm"))?;
            x = nn::conv(b, x, &format!("{p}.down"), 2, 0)?;
        }
        let h = norm2d(b, x, &format!("{p}.norm"))?;
        let h = g.gelu(h);
        let h = nn::conv(b, h, &format!("{p}.conv"), 1, 1)?;
        x = g.add(x, h)?;
        levels.push(x);
    }
    Ok([levels[0], levels[1], levels[2], levels[3]])
}
