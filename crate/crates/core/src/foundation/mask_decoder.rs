//! Two-way token/grid transformer followed by a transposed-conv upsampler and
//! a hypernetwork that turns the mask token into per-pixel weights.

use rand::Rng;

use super::{norm, norm2d, register_norm, FoundationDims, MASK_DECODER};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{normal_init, Binding, Owner, ParameterRegistry};
use crate::tensor::Tensor;

pub(super) fn register(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    d: &FoundationDims,
) -> Result<()> {
    let o = Owner::MaskDecoder;
    let c = d.embed_dim;
    reg.register(format!("{MASK_DECODER}.mask_token"), o, normal_init(rng, &[1, 1, c], 1.0))?;
    for r in 0..d.decoder_rounds {
        let p = format!("{MASK_DECODER}.round{r}");
        nn::register_attention(reg, rng, o, &format!("{p}.self_attn"), c, c, c, Some(c))?;
        register_norm(reg, o, &format!("{p}.norm1"), c)?;
        nn::register_attention(reg, rng, o, &format!("{p}.token_to_image"), c, c, c / 2, Some(c))?;
        register_norm(reg, o, &format!("{p}.norm2"), c)?;
        nn::register_linear(reg, rng, o, &format!("{p}.mlp.fc1"), c, 2 * c)?;
        nn::register_linear(reg, rng, o, &format!("{p}.mlp.fc2"), 2 * c, c)?;
        register_norm(reg, o, &format!("{p}.norm3"), c)?;
        nn::register_attention(reg, rng, o, &format!("{p}.image_to_token"), c, c, c / 2, Some(c))?;
        register_norm(reg, o, &format!("{p}.norm4"), c)?;
    }
    nn::register_attention(reg, rng, o, &format!("{MASK_DECODER}.final_attn"), c, c, c / 2, Some(c))?;
    register_norm(reg, o, &format!("{MASK_DECODER}.final_norm"), c)?;
    // kernel-2 stride-2 transposed convolutions, stored as per-pixel linears.
    // The output head is He-initialised: with fan-in uniform weights a random
    // decoder cannot emit confident logits from any embedding.
    nn::register_linear_he(reg, rng, o, &format!("{MASK_DECODER}.upscale1"), c, 4 * (c / 4))?;
    register_norm(reg, o, &format!("{MASK_DECODER}.upscale_norm"), c / 4)?;
    nn::register_linear_he(reg, rng, o, &format!("{MASK_DECODER}.upscale2"), c / 4, 4 * (c / 8))?;
    nn::register_linear_he(reg, rng, o, &format!("{MASK_DECODER}.hyper.fc1"), c, c)?;
    nn::register_linear_he(reg, rng, o, &format!("{MASK_DECODER}.hyper.fc2"), c, c)?;
    nn::register_linear_he(reg, rng, o, &format!("{MASK_DECODER}.hyper.fc3"), c, c / 8)
}

/// Transposed convolution with kernel 2 and stride 2: `[B, C, h, w]` to `[B, C', 2h, 2w]`.
fn upsample2x(b: &Binding, x: Var, prefix: &str) -> Result<Var> {
    let g = b.graph();
    let s = g.shape(x);
    let (bs, h, w) = (s[0], s[2], s[3]);
    let t = nn::to_tokens(g, x)?;
    let t = nn::linear(b, t, prefix)?;
    let out_c = g.shape(t)[2] / 4;
    let t = g.reshape(t, &[bs, h, w, out_c, 2, 2])?;
    let t = g.permute(t, &[0, 3, 1, 4, 2, 5]);
    g.reshape(t, &[bs, out_c, 2 * h, 2 * w])
}

fn add_pe(g: &Graph, x: Var, pe: Var) -> Result<Var> {
    g.add(x, pe)
}

pub(super) fn forward(
    b: &Binding,
    d: &FoundationDims,
    image_pe: &Tensor,
    img_emb: Var,
    sparse: Var,
    dense: Var,
) -> Result<Var> {
    let g = b.graph();
    let c = d.embed_dim;
    let grid = d.grid();
    let es = g.shape(img_emb);
    let (ss, ds) = (g.shape(sparse), g.shape(dense));
    if es != [1, c, grid, grid] {
        return Err(Error::shape(format!(
            "decoder expects a [1, {c}, {grid}, {grid}] embedding, got {es:?}"
        )));
    }
    if ss.len() != 3 || ss[0] != 1 || ss[2] != c {
        return Err(Error::shape(format!("sparse prompts must be [1, k, {c}], got {ss:?}")));
    }
    if ds != es {
        return Err(Error::shape(format!("dense prompt {ds:?} vs embedding {es:?}")));
    }

    let mask_token = b.param(&format!("{MASK_DECODER}.mask_token"))?;
    let mut queries = g.concat(&[mask_token, sparse], 1)?;
    let query_pe = queries;
    let src = g.add(img_emb, dense)?;
    let mut keys = nn::to_tokens(g, src)?;
    let key_pe = g.constant(image_pe.reshape(&[1, grid * grid, c])?);

    for r in 0..d.decoder_rounds {
        let p = format!("{MASK_DECODER}.round{r}");
        let heads = d.decoder_heads;
        queries = if r == 0 {
            nn::attention(b, queries, queries, queries, &format!("{p}.self_attn"), heads)?
        } else {
            let q = add_pe(g, queries, query_pe)?;
            let a = nn::attention(b, q, q, queries, &format!("{p}.self_attn"), heads)?;
            g.add(queries, a)?
        };
        queries = norm(b, queries, &format!("{p}.norm1"))?;

        let q = add_pe(g, queries, query_pe)?;
        let k = add_pe(g, keys, key_pe)?;
        let a = nn::attention(b, q, k, keys, &format!("{p}.token_to_image"), heads)?;
        queries = norm(b, g.add(queries, a)?, &format!("{p}.norm2"))?;

        let h = nn::linear(b, queries, &format!("{p}.mlp.fc1"))?;
        let h = g.relu(h);
        let m = nn::linear(b, h, &format!("{p}.mlp.fc2"))?;
        queries = norm(b, g.add(queries, m)?, &format!("{p}.norm3"))?;

        let q = add_pe(g, queries, query_pe)?;
        let k = add_pe(g, keys, key_pe)?;
        let a = nn::attention(b, k, q, queries, &format!("{p}.image_to_token"), heads)?;
        keys = norm(b, g.add(keys, a)?, &format!("{p}.norm4"))?;
    }
    let q = add_pe(g, queries, query_pe)?;
    let k = add_pe(g, keys, key_pe)?;
    let a = nn::attention(b, q, k, keys, &format!("{MASK_DECODER}.final_attn"), d.decoder_heads)?;
    queries = norm(b, g.add(queries, a)?, &format!("{MASK_DECODER}.final_norm"))?;

    let src = nn::from_tokens(g, keys, grid, grid)?;
    let up = upsample2x(b, src, &format!("{MASK_DECODER}.upscale1"))?;
    let up = norm2d(b, up, &format!("{MASK_DECODER}.upscale_norm"))?;
    let up = g.gelu(up);
    let up = upsample2x(b, up, &format!("{MASK_DECODER}.upscale2"))?;
    let up = g.gelu(up);

    let token = g.narrow(queries, 1, 0, 1)?;
    let h = g.relu(nn::linear(b, token, &format!("{MASK_DECODER}.hyper.fc1"))?);
    let h = g.relu(nn::linear(b, h, &format!("{MASK_DECODER}.hyper.fc2"))?);
    let hyper = nn::linear(b, h, &format!("{MASK_DECODER}.hyper.fc3"))?;

    let low = 4 * grid;
    let flat = g.reshape(up, &[1, c / 8, low * low])?;
    let logits = g.matmul(hyper, flat)?;
    let logits = g.reshape(logits, &[1, 1, low, low])?;
    let logits = g.resize_bilinear(logits, d.input_size, d.input_size)?;
    let probs = g.sigmoid(logits);
    g.reshape(probs, &[1, d.input_size, d.input_size])
}
