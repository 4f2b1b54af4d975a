//! Automatic prompts: learnable-query semantic prompts from the fused
//! feature, and mask/box/point prompts read off the coarse saliency map.

mod geometric;
mod semantic;

pub use geometric::{derive_geometric, BoxPrompt, GeometricParams, GeometricPrompts, PointLabel, PointPrompt};
pub use semantic::{generate_semantic_prompts, register_semantic, SemanticDims, PROMPT_GEN};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::foundation::Foundation;
use crate::params::Binding;

/// Sparse tokens and dense map for one image's decoder call.
///
/// `sparse = concat(geometric tokens, semantic prompts)`. With
/// `geo = None` the geometric stream is skipped entirely and the dense input
/// falls back to the no-mask embedding.
pub fn assemble_decoder_inputs(
    b: &Binding,
    foundation: &Foundation,
    p_sem: Option<Var>,
    geo: Option<&GeometricPrompts>,
) -> Result<(Var, Var)> {
    let g = b.graph();
    let c = foundation.dims.embed_dim;
    let (geo_sparse, dense) = match geo {
        Some(geo) => {
            let e = foundation.encode_prompts(b, geo)?;
            (e.sparse, e.dense)
        }
        None => (
            g.constant(crate::tensor::Tensor::zeros(&[1, 0, c])),
            foundation.no_mask_dense(b)?,
        ),
    };
    let sparse = match p_sem {
        None => geo_sparse,
        Some(p) => {
            let s = g.shape(p);
            if s.len() != 3 || s[0] != 1 || s[2] != c {
                return Err(Error::shape(format!(
                    "semantic prompts must be [1, N, {c}], got {s:?}"
                )));
            }
            g.concat(&[geo_sparse, p], 1)?
        }
    };
    Ok((sparse, dense))
}
