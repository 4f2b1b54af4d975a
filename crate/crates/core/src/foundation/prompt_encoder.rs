use std::f64::consts::PI;

use rand::Rng;

use super::{norm2d, register_norm, FoundationDims, PROMPT_ENCODER};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{normal_init, Binding, Owner, ParameterRegistry};
use crate::prompt_gen::GeometricPrompts;
use crate::tensor::Tensor;

/// Encoded prompts for one image.
#[derive(Clone, Copy, Debug)]
pub struct PromptEmbeddings {
    /// `[1, k, C]` with `k = 2 * boxes + points`.
    pub sparse: Var,
    /// `[1, C, grid, grid]`.
    pub dense: Var,
}

pub(super) fn register(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    d: &FoundationDims,
) -> Result<()> {
    let o = Owner::PromptEncoder;
    let c = d.embed_dim;
    reg.register(format!("{PROMPT_ENCODER}.pe_gaussian"), o, normal_init(rng, &[2, c / 2], 1.0))?;
    for name in ["point_fg", "box_tl", "box_br", "no_mask"] {
        reg.register(format!("{PROMPT_ENCODER}.{name}"), o, normal_init(rng, &[c], 1.0))?;
    }
    let p = format!("{PROMPT_ENCODER}.mask_downscale");
    nn::register_conv(reg, rng, o, &format!("{p}.conv1"), 1, c / 8, 2)?;
    register_norm(reg, o, &format!("{p}.norm1"), c / 8)?;
    nn::register_conv(reg, rng, o, &format!("{p}.conv2"), c / 8, c / 4, 2)?;
    register_norm(reg, o, &format!("{p}.norm2"), c / 4)?;
    nn::register_conv(reg, rng, o, &format!("{p}.conv3"), c / 4, c, 1)
}

/// Random-Fourier encoding of normalised `(x, y)` rows `[n, 2]` into `[n, C]`.
fn fourier(gaussian: &Tensor, coords: &[(f64, f64)]) -> Tensor {
    let half = gaussian.dim(1);
    let gd = gaussian.data();
    let mut out = Tensor::zeros(&[coords.len(), 2 * half]);
    for (i, &(x, y)) in coords.iter().enumerate() {
        let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let row = &mut out.data_mut()[i * 2 * half..(i + 1) * 2 * half];
        for j in 0..half {
            let v = 2.0 * PI * (cx * gd[j] + cy * gd[half + j]);
            row[j] = v.sin();
            row[half + j] = v.cos();
        }
    }
    out
}

/// Positional encoding of every grid cell centre, `[grid*grid, C]`.
pub(super) fn dense_pe(reg: &ParameterRegistry, d: &FoundationDims) -> Tensor {
    let gaussian = reg
        .tensor(&format!("{PROMPT_ENCODER}.pe_gaussian"))
        .expect("prompt encoder registered");
    let g = d.grid();
    let coords: Vec<(f64, f64)> = (0..g * g)
        .map(|i| (((i % g) as f64 + 0.5) / g as f64, ((i / g) as f64 + 0.5) / g as f64))
        .collect();
    fourier(gaussian, &coords)
}

pub(super) fn no_mask_dense(b: &Binding, d: &FoundationDims) -> Result<Var> {
    let g = b.graph();
    let e = b.param(&format!("{PROMPT_ENCODER}.no_mask"))?;
    let e = g.reshape(e, &[1, d.embed_dim, 1, 1])?;
    let zeros = g.constant(Tensor::zeros(&[1, d.embed_dim, d.grid(), d.grid()]));
    g.add(zeros, e)
}

pub(super) fn forward(b: &Binding, d: &FoundationDims, geo: &GeometricPrompts) -> Result<PromptEmbeddings> {
    let g = b.graph();
    let s = d.input_size;
    let c = d.embed_dim;
    let in_bounds = |x: usize, y: usize| x < s && y < s;

    // pixel centres, normalised to [0, 1]
    let norm_xy = |x: usize, y: usize| ((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
    let mut coords = Vec::new();
    let mut kinds = Vec::new();
    for bx in &geo.boxes {
        if !in_bounds(bx.x_max, bx.y_max) || bx.x_min > bx.x_max || bx.y_min > bx.y_max {
            return Err(Error::invalid(format!("box {bx:?} outside a {s}x{s} image")));
        }
        coords.push(norm_xy(bx.x_min, bx.y_min));
        kinds.push("box_tl");
        coords.push(norm_xy(bx.x_max, bx.y_max));
        kinds.push("box_br");
    }
    for p in &geo.points {
        if !in_bounds(p.x, p.y) {
            return Err(Error::invalid(format!("point ({}, {}) outside a {s}x{s} image", p.x, p.y)));
        }
        coords.push(norm_xy(p.x, p.y));
        kinds.push("point_fg");
    }

    let sparse = if coords.is_empty() {
        g.constant(Tensor::zeros(&[1, 0, c]))
    } else {
        let gaussian = g.value(b.param(&format!("{PROMPT_ENCODER}.pe_gaussian"))?);
        let pe = fourier(&gaussian, &coords);
        let mut rows = pe.into_data();
        for (i, kind) in kinds.iter().enumerate() {
            let e = g.value(b.param(&format!("{PROMPT_ENCODER}.{kind}"))?);
            for (r, &v) in rows[i * c..(i + 1) * c].iter_mut().zip(e.data()) {
                *r += v;
            }
        }
        g.constant(Tensor::new(&[1, coords.len(), c], rows)?)
    };

    let dense = match &geo.mask {
        None => no_mask_dense(b, d)?,
        Some(mask) => {
            let m = d.mask_prompt_size();
            if mask.shape() != [m, m] {
                return Err(Error::shape(format!(
                    "mask prompt must be {m}x{m}, got {:?}",
                    mask.shape()
                )));
            }
            let p = format!("{PROMPT_ENCODER}.mask_downscale");
            let x = g.constant(mask.reshape(&[1, 1, m, m])?);
            let x = nn::conv(b, x, &format!("{p}.conv1"), 2, 0)?;
            let x = norm2d(b, x, &format!("{p}.norm1"))?;
            let x = g.gelu(x);
            let x = nn::conv(b, x, &format!("{p}.conv2"), 2, 0)?;
            let x = norm2d(b, x, &format!("{p}.norm2"))?;
            let x = g.gelu(x);
            nn::conv(b, x, &format!("{p}.conv3"), 1, 0)?
        }
    };
    Ok(PromptEmbeddings { sparse, dense })
}
