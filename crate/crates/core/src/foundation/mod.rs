//! The frozen foundation segmenter (image encoder, prompt encoder, mask
//! decoder) and the frozen hierarchical semantic encoder.
//!
//! Both backends share one architecture: the stub draws seeded random weights,
//! the pretrained backend overwrites the frozen entries from a weights file.

mod image_encoder;
mod mask_decoder;
pub mod pretrained;
mod prompt_encoder;
mod pyramid;

use rand::Rng;

use crate::autograd::Var;
use crate::config::RunConfig;
use crate::error::Result;
use crate::nn;
use crate::params::{Binding, Owner, ParameterRegistry};
use crate::tensor::Tensor;

pub use image_encoder::{BlockAdapters, Stage};
pub use prompt_encoder::PromptEmbeddings;

pub const IMAGE_ENCODER: &str = "foundation.image_encoder";
pub const PROMPT_ENCODER: &str = "foundation.prompt_encoder";
pub const MASK_DECODER: &str = "foundation.mask_decoder";
pub const SEMANTIC_ENCODER: &str = "foundation.semantic_encoder";

/// Dimensions of the foundation segmenter and the semantic encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoundationDims {
    pub input_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
    pub decoder_heads: usize,
    pub decoder_rounds: usize,
    pub semantic_input: usize,
    pub stem_stride: usize,
    pub pyramid_widths: [usize; 4],
}

impl FoundationDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            input_size: cfg.large_size,
            patch_size: cfg.patch_size,
            width: cfg.encoder_dim,
            blocks: cfg.encoder_blocks,
            heads: cfg.encoder_heads,
            mlp_ratio: cfg.encoder_mlp_ratio,
            embed_dim: cfg.embed_dim,
            decoder_heads: cfg.decoder_heads,
            decoder_rounds: cfg.decoder_rounds,
            semantic_input: cfg.small_size,
            stem_stride: cfg.pyramid_stem_stride,
            pyramid_widths: cfg.pyramid_widths,
        }
    }

    /// Side of the image-embedding grid.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Side of the mask prompt the prompt encoder expects.
    pub fn mask_prompt_size(&self) -> usize {
        4 * self.grid()
    }

    /// Spatial side of each pyramid level.
    pub fn level_sizes(&self) -> [usize; 4] {
        let s = self.semantic_input / self.stem_stride;
        [s, s / 2, s / 4, s / 8]
    }
}

#[derive(Clone, Debug)]
pub struct Foundation {
    pub dims: FoundationDims,
    /// Dense positional encoding of the embedding grid, `[grid*grid, embed_dim]`.
    image_pe: Tensor,
}

impl Foundation {
    pub fn register(
        reg: &mut ParameterRegistry,
        rng: &mut impl Rng,
        dims: FoundationDims,
    ) -> Result<Self> {
        image_encoder::register(reg, rng, &dims)?;
        prompt_encoder::register(reg, rng, &dims)?;
        mask_decoder::register(reg, rng, &dims)?;
        pyramid::register(reg, rng, &dims)?;
        Ok(Self::from_registry(reg, dims))
    }

    /// Rebuild the module around an already-populated registry.
    pub fn from_registry(reg: &ParameterRegistry, dims: FoundationDims) -> Self {
        let image_pe = prompt_encoder::dense_pe(reg, &dims);
        Self { dims, image_pe }
    }

    /// `[B, 3, S, S]` image to `[B, embed_dim, grid, grid]`.
    ///
    /// With `adapters = None` this is the pristine frozen encoder.
    pub fn encode_image(
        &self,
        b: &Binding,
        img: Var,
        adapters: Option<&dyn BlockAdapters>,
    ) -> Result<Var> {
        image_encoder::forward(b, &self.dims, img, adapters)
    }

    /// Sparse and dense embeddings of one image's geometric prompts.
    pub fn encode_prompts(
        &self,
        b: &Binding,
        geo: &crate::prompt_gen::GeometricPrompts,
    ) -> Result<PromptEmbeddings> {
        prompt_encoder::forward(b, &self.dims, geo)
    }

    /// Dense embedding used when no mask prompt is given, `[1, C, g, g]`.
    pub fn no_mask_dense(&self, b: &Binding) -> Result<Var> {
        prompt_encoder::no_mask_dense(b, &self.dims)
    }

    /// Saliency probabilities `[1, S, S]` for one image.
    pub fn decode_mask(&self, b: &Binding, img_emb: Var, sparse: Var, dense: Var) -> Result<Var> {
        mask_decoder::forward(b, &self.dims, &self.image_pe, img_emb, sparse, dense)
    }

    /// Four-level feature pyramid of a `[B, 3, s, s]` image at the small resolution.
    pub fn encode_semantic_pyramid(&self, b: &Binding, img: Var) -> Result<[Var; 4]> {
        pyramid::forward(b, &self.dims, img)
    }
}

pub(crate) fn register_norm(reg: &mut ParameterRegistry, owner: Owner, prefix: &str, c: usize) -> Result<()> {
    reg.register(format!("{prefix}.weight"), owner, Tensor::ones(&[c]))?;
    reg.register(format!("{prefix}.bias"), owner, Tensor::zeros(&[c]))
}

/// Layer norm over the last axis with learned scale and shift.
pub(crate) fn norm(b: &Binding, x: Var, prefix: &str) -> Result<Var> {
    let g = b.graph();
    let w = b.param(&format!("{prefix}.weight"))?;
    let bias = b.param(&format!("{prefix}.bias"))?;
    let n = g.layer_norm(x, 1e-6);
    let n = g.mul(n, w)?;
    g.add(n, bias)
}

/// Channel-wise layer norm on NCHW input.
pub(crate) fn norm2d(b: &Binding, x: Var, prefix: &str) -> Result<Var> {
    let g = b.graph();
    let s = g.shape(x);
    let t = nn::to_tokens(g, x)?;
    let t = norm(b, t, prefix)?;
    nn::from_tokens(g, t, s[2], s[3])
}
