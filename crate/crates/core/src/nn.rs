//! Layer helpers shared by every module: parameter registration plus the
//! matching forward functions over a [`Binding`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, uniform_init, Binding, Owner, ParameterRegistry};
use crate::tensor::Tensor;

pub fn register_linear(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    owner: Owner,
    prefix: &str,
    inp: usize,
    out: usize,
) -> Result<()> {
    reg.register(
        format!("{prefix}.weight"),
        owner,
        uniform_init(rng, &[inp, out], inp),
    )?;
    reg.register(format!("{prefix}.bias"), owner, uniform_init(rng, &[out], inp))
}

/// Like [`register_linear`] but with He-normal weights, `std = sqrt(2 / in)`.
pub fn register_linear_he(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    owner: Owner,
    prefix: &str,
    inp: usize,
    out: usize,
) -> Result<()> {
    let std = (2.0 / inp as f64).sqrt();
    reg.register(format!("{prefix}.weight"), owner, normal_init(rng, &[inp, out], std))?;
    reg.register(format!("{prefix}.bias"), owner, uniform_init(rng, &[out], inp))
}

/// `x @ weight + bias` over the last axis; `weight` is stored `[in, out]`.
pub fn linear(b: &Binding, x: Var, prefix: &str) -> Result<Var> {
    let g = b.graph();
    let w = b.param(&format!("{prefix}.weight"))?;
    let bias = b.param(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}

pub fn register_conv(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    owner: Owner,
    prefix: &str,
    inp: usize,
    out: usize,
    kernel: usize,
) -> Result<()> {
    let fan_in = inp * kernel * kernel;
    reg.register(
        format!("{prefix}.weight"),
        owner,
        uniform_init(rng, &[out, inp, kernel, kernel], fan_in),
    )?;
    reg.register(format!("{prefix}.bias"), owner, uniform_init(rng, &[out], fan_in))
}

/// Convolution plus per-channel bias on NCHW input.
pub fn conv(b: &Binding, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
    let g = b.graph();
    let w = b.param(&format!("{prefix}.weight"))?;
    let bias = b.param(&format!("{prefix}.bias"))?;
    let out_ch = g.shape(w)[0];
    let y = g.conv2d(x, w, stride, padding)?;
    let bias = g.reshape(bias, &[1, out_ch, 1, 1])?;
    g.add(y, bias)
}

pub fn register_attention(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    owner: Owner,
    prefix: &str,
    q_dim: usize,
    kv_dim: usize,
    inner: usize,
    out_proj: Option<usize>,
) -> Result<()> {
    register_linear(reg, rng, owner, &format!("{prefix}.q"), q_dim, inner)?;
    register_linear(reg, rng, owner, &format!("{prefix}.k"), kv_dim, inner)?;
    register_linear(reg, rng, owner, &format!("{prefix}.v"), kv_dim, inner)?;
    if let Some(out) = out_proj {
        register_linear(reg, rng, owner, &format!("{prefix}.out"), inner, out)?;
    }
    Ok(())
}

/// Scaled dot-product attention of `queries: [B, Nq, *]` over `keys_values: [B, Nk, *]`.
///
/// Projections live under `{prefix}.{q,k,v}`, and `{prefix}.out` is applied
/// when it is registered.
pub fn attention(
    b: &Binding,
    queries: Var,
    keys: Var,
    values: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let g = b.graph();
    let q = linear(b, queries, &format!("{prefix}.q"))?;
    let k = linear(b, keys, &format!("{prefix}.k"))?;
    let v = linear(b, values, &format!("{prefix}.v"))?;
    let (qs, ks) = (g.shape(q), g.shape(k));
    let (batch, nq, dim) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    if dim % heads != 0 {
        return Err(Error::shape(format!("attention width {dim} not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let split = |x: Var, n: usize| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[batch, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[batch * heads, n, dh])
    };
    let (qh, kh, vh) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let scores = g.matmul(qh, g.transpose(kh))?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores);
    let mut out = g.matmul(weights, vh)?;
    if heads > 1 {
        out = g.reshape(out, &[batch, heads, nq, dh])?;
        out = g.permute(out, &[0, 2, 1, 3]);
        out = g.reshape(out, &[batch, nq, dim])?;
    }
    let out_name = format!("{prefix}.out");
    if b.has(&format!("{out_name}.weight")) {
        out = linear(b, out, &out_name)?;
    }
    Ok(out)
}

/// `[B, C, H, W]` to `[B, H*W, C]`.
pub fn to_tokens(g: &Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape(format!("expected NCHW, got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok(g.permute(flat, &[0, 2, 1]))
}

/// `[B, H*W, C]` back to `[B, C, H, W]`.
pub fn from_tokens(g: &Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t);
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(format!("cannot fold {s:?} into a {h}x{w} grid")));
    }
    let x = g.permute(t, &[0, 2, 1]);
    g.reshape(x, &[s[0], s[2], h, w])
}

/// Fixed 2-D sinusoidal encoding `[h*w, c]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let freqs = half / 2;
    let mut out = Tensor::zeros(&[h * w, c]);
    let d = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let row = &mut d[(y * w + x) * c..(y * w + x + 1) * c];
            for i in 0..freqs {
                let f = 1.0 / 10000f64.powf(i as f64 / freqs.max(1) as f64);
                row[2 * i] = (y as f64 * f).sin();
                row[2 * i + 1] = (y as f64 * f).cos();
                row[half + 2 * i] = (x as f64 * f).sin();
                row[half + 2 * i + 1] = (x as f64 * f).cos();
            }
        }
    }
    out
}
