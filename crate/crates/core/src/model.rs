//! The full network: frozen foundation + fusion + adapters + prompt generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::data_io::PreprocessedSample;
use crate::config::{AdapterVariant, Backend, PromptVariant, RunConfig};
use crate::error::{Error, Result};
use crate::foundation::{pretrained, BlockAdapters, Foundation, FoundationDims};
use crate::madapter::{self, AdapterDims, Adapters};
use crate::mcfm::{self, McfmDims};
use crate::params::{Binding, BindMode, ParameterRegistry, Tag};
use crate::prompt_gen::{self, GeometricParams, GeometricPrompts, SemanticDims};
use crate::tensor::Tensor;
use crate::autograd::Graph;

/// Frozen pyramid levels consumed by the fusion module, per sample.
#[derive(Clone, Debug)]
pub struct SemanticFeatures {
    /// `[1, c, h, w]` at the configured level.
    pub rgb: Tensor,
    pub aux: Tensor,
}

/// One forward pass over a batch.
pub struct Forward {
    /// `[B, S, S]` saliency probabilities from the foundation decoder.
    pub main: Var,
    /// `[B, S, S]` coarse map from the fusion head.
    pub coarse: Var,
    pub prompts: Vec<GeometricPrompts>,
    /// Sparse tokens handed to the decoder, per sample.
    pub sparse_tokens: Vec<usize>,
}

/// Inference output for one image at the model resolution.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[S, S]` saliency probabilities.
    pub main: Tensor,
    /// `[S, S]` coarse map from the fusion head.
    pub coarse: Tensor,
    pub prompts: GeometricPrompts,
}

#[derive(Clone, Debug)]
pub struct Sammese {
    pub cfg: RunConfig,
    pub foundation: Foundation,
    pub mcfm: McfmDims,
    pub adapters: AdapterDims,
    pub semantic: Option<SemanticDims>,
}

impl Sammese {
    /// Register every parameter. The frozen foundation is drawn from `seed`
    /// and the trainable modules from `seed + 1`, so every variant of one
    /// seed shares the same frozen weights.
    pub fn build(cfg: &RunConfig) -> Result<(ParameterRegistry, Self)> {
        cfg.validate()?;
        let mut reg = ParameterRegistry::new();
        let fdims = FoundationDims::from_config(cfg);
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let foundation = Foundation::register(&mut reg, &mut frozen_rng, fdims.clone())?;
        if cfg.backend == Backend::Pretrained {
            let path = cfg.pretrained_weights.as_ref().ok_or_else(|| {
                Error::Config("backend = pretrained needs pretrained_weights".into())
            })?;
            pretrained::load_into(&mut reg, &fdims, path)?;
        }
        let foundation = Foundation::from_registry(&reg, foundation.dims);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let sem_dim = cfg.level_width();
        let mcfm = McfmDims {
            channels: sem_dim,
            heads: cfg.mcfm_heads,
            variant: cfg.fusion,
        };
        mcfm::register(&mut reg, &mut rng, mcfm)?;
        let adapters = AdapterDims {
            width: cfg.encoder_dim,
            bottleneck: cfg.bottleneck(),
            sem_dim,
            blocks: cfg.encoder_blocks,
            variant: cfg.adapter,
            shared: cfg.share_adapters,
        };
        madapter::register(&mut reg, &mut rng, adapters)?;
        let semantic = (cfg.prompts != PromptVariant::NoSemantic).then_some(SemanticDims {
            num_queries: cfg.num_queries,
            query_dim: cfg.query_dim,
            sem_dim,
            embed_dim: cfg.embed_dim,
            heads: 1,
        });
        if let Some(s) = semantic {
            prompt_gen::register_semantic(&mut reg, &mut rng, s)?;
        }
        if reg.count(Tag::Frozen) == 0 {
            return Err(Error::invalid("frozen set is empty"));
        }
        let model = Self {
            cfg: cfg.clone(),
            foundation,
            mcfm,
            adapters,
            semantic,
        };
        Ok((reg, model))
    }

    pub fn geometric_params(&self) -> GeometricParams {
        GeometricParams {
            threshold: self.cfg.threshold,
            min_area_fraction: self.cfg.min_area_fraction,
            max_points: self.cfg.max_points,
            per_component_boxes: self.cfg.per_component_boxes,
            mask_size: Some(self.foundation.dims.mask_prompt_size()),
        }
    }

    /// Frozen pyramid features for one sample (`[3, s, s]` inputs).
    pub fn semantic_features(
        &self,
        reg: &ParameterRegistry,
        rgb_small: &Tensor,
        aux_small: &Tensor,
    ) -> Result<SemanticFeatures> {
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let s = self.cfg.small_size;
        let level = self.cfg.mcfm_level - 1;
        let run = |img: &Tensor| -> Result<Tensor> {
            let x = g.constant(img.reshape(&[1, 3, s, s])?);
            let levels = self.foundation.encode_semantic_pyramid(&b, x)?;
            Ok((*g.value(levels[level])).clone())
        };
        Ok(SemanticFeatures {
            rgb: run(rgb_small)?,
            aux: run(aux_small)?,
        })
    }

    /// Full inference on one preprocessed sample.
    pub fn predict(&self, reg: &ParameterRegistry, s: &PreprocessedSample) -> Result<Prediction> {
        let feats = self.semantic_features(reg, &s.rgb_small, &s.aux_small)?;
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let mut out = self.forward(&b, &[&s.rgb_large], &[&feats])?;
        let big = self.cfg.large_size;
        Ok(Prediction {
            main: g.value(out.main).reshape(&[big, big])?,
            coarse: g.value(out.coarse).reshape(&[big, big])?,
            prompts: out.prompts.remove(0),
        })
    }

    /// Forward a batch of `rgb_large` images (`[3, S, S]` each) with their
    /// cached semantic features.
    pub fn forward(&self, b: &Binding, rgb_large: &[&Tensor], feats: &[&SemanticFeatures]) -> Result<Forward> {
        let g = b.graph();
        if rgb_large.len() != feats.len() || rgb_large.is_empty() {
            return Err(Error::invalid("batch images and features differ in length"));
        }
        let n = rgb_large.len();
        let big = self.cfg.large_size;
        let imgs: Vec<Tensor> = rgb_large
            .iter()
            .map(|t| t.reshape(&[1, 3, big, big]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let img = g.constant(Tensor::concat(&refs, 0)?);
        let rgb: Vec<&Tensor> = feats.iter().map(|f| &f.rgb).collect();
        let aux: Vec<&Tensor> = feats.iter().map(|f| &f.aux).collect();
        let f_rgb = g.constant(Tensor::concat(&rgb, 0)?);
        let f_aux = g.constant(Tensor::concat(&aux, 0)?);

        let f_sem = mcfm::forward(b, &self.mcfm, f_rgb, f_aux)?;
        let coarse = mcfm::coarse_saliency(b, f_sem, big)?;

        let adapters;
        let hooks: Option<&dyn BlockAdapters> = if self.adapters.variant == AdapterVariant::None {
            None
        } else {
            adapters = Adapters::new(b, self.adapters, f_sem, self.foundation.dims.grid())?;
            Some(&adapters)
        };
        let emb = self.foundation.encode_image(b, img, hooks)?;

        let p_sem = match self.semantic {
            Some(s) => Some(prompt_gen::generate_semantic_prompts(b, f_sem, s.heads)?),
            None => None,
        };

        let coarse_values = g.value(coarse);
        let params = self.geometric_params();
        let mut masks = Vec::with_capacity(n);
        let mut prompts = Vec::with_capacity(n);
        let mut sparse_tokens = Vec::with_capacity(n);
        for i in 0..n {
            let geo = if self.cfg.prompts == PromptVariant::NoGeometric {
                GeometricPrompts::default()
            } else {
                let map = coarse_values.narrow(0, i, 1).into_reshape(&[big, big])?;
                prompt_gen::derive_geometric(&map, &params)
            };
            let p = match p_sem {
                Some(p) => Some(g.narrow(p, 0, i, 1)?),
                None => None,
            };
            let geo_in = (self.cfg.prompts != PromptVariant::NoGeometric).then_some(&geo);
            let (sparse, dense) = prompt_gen::assemble_decoder_inputs(b, &self.foundation, p, geo_in)?;
            sparse_tokens.push(g.shape(sparse)[1]);
            let e = g.narrow(emb, 0, i, 1)?;
            masks.push(self.foundation.decode_mask(b, e, sparse, dense)?);
            prompts.push(geo);
        }
        let main = if n == 1 { masks[0] } else { g.concat(&masks, 0)? };
        Ok(Forward {
            main,
            coarse,
            prompts,
            sparse_tokens,
        })
    }
}
