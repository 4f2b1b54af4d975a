//! Complementary fusion of the top-level RGB and auxiliary features into the
//! semantic feature `f_sem`, plus the coarse saliency head.

use rand::Rng;

use crate::autograd::Var;
use crate::config::FusionVariant;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binding, Owner, ParameterRegistry};

pub const MCFM: &str = "mcfm";
pub const COARSE_HEAD: &str = "coarse_head";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McfmDims {
    pub channels: usize,
    pub heads: usize,
    pub variant: FusionVariant,
}

pub fn register(reg: &mut ParameterRegistry, rng: &mut impl Rng, d: McfmDims) -> Result<()> {
    let o = Owner::Mcfm;
    let c = d.channels;
    match d.variant {
        FusionVariant::Simple => {
            nn::register_conv(reg, rng, o, &format!("{MCFM}.fuse_simple"), 2 * c, c, 3)?;
        }
        FusionVariant::Full | FusionVariant::Complex => {
            nn::register_conv(reg, rng, o, &format!("{MCFM}.fuse_initial"), 2 * c, c, 3)?;
            nn::register_attention(reg, rng, o, &format!("{MCFM}.enhance_rgb"), c, c, c, None)?;
            nn::register_attention(reg, rng, o, &format!("{MCFM}.enhance_aux"), c, c, c, None)?;
            nn::register_conv(reg, rng, o, &format!("{MCFM}.fuse_final"), 2 * c, c, 3)?;
            if d.variant == FusionVariant::Complex {
                nn::register_attention(reg, rng, o, &format!("{MCFM}.refine_mul"), c, c, c, None)?;
                nn::register_attention(reg, rng, o, &format!("{MCFM}.refine_sem"), c, c, c, None)?;
            }
        }
    }
    nn::register_conv(reg, rng, Owner::CoarseHead, &format!("{COARSE_HEAD}.conv"), c, 1, 1)
}

fn same_shape(b: &Binding, a: Var, c: Var) -> Result<()> {
    let g = b.graph();
    let (sa, sc) = (g.shape(a), g.shape(c));
    if sa.len() != 4 || sa != sc {
        return Err(Error::shape(format!("fusion inputs must share an NCHW shape, got {sa:?} and {sc:?}")));
    }
    Ok(())
}

/// `Conv3(concat(a, c))` with the weights under `prefix`.
pub fn concat_conv(b: &Binding, a: Var, c: Var, prefix: &str) -> Result<Var> {
    same_shape(b, a, c)?;
    let x = b.graph().concat(&[a, c], 1)?;
    nn::conv(b, x, prefix, 1, 1)
}

pub fn fuse_initial(b: &Binding, f_rgb: Var, f_aux: Var) -> Result<Var> {
    concat_conv(b, f_rgb, f_aux, &format!("{MCFM}.fuse_initial"))
}

pub fn fuse_final(b: &Binding, f_rgb: Var, f_aux: Var) -> Result<Var> {
    concat_conv(b, f_rgb, f_aux, &format!("{MCFM}.fuse_final"))
}

/// `f_m + CrossAttn(q = f_m, kv = f_mul)` over flattened spatial tokens.
pub fn enhance_modality(b: &Binding, f_m: Var, f_mul: Var, prefix: &str, heads: usize) -> Result<Var> {
    same_shape(b, f_m, f_mul)?;
    let g = b.graph();
    let s = g.shape(f_m);
    let q = nn::to_tokens(g, f_m)?;
    let kv = nn::to_tokens(g, f_mul)?;
    let a = nn::attention(b, q, kv, kv, prefix, heads)?;
    let a = nn::from_tokens(g, a, s[2], s[3])?;
    g.add(f_m, a)
}

/// `f_sem` from the two top-level features; shape is preserved.
pub fn forward(b: &Binding, d: &McfmDims, f_rgb: Var, f_aux: Var) -> Result<Var> {
    if d.variant == FusionVariant::Simple {
        return concat_conv(b, f_rgb, f_aux, &format!("{MCFM}.fuse_simple"));
    }
    let mut f_mul = fuse_initial(b, f_rgb, f_aux)?;
    if d.variant == FusionVariant::Complex {
        f_mul = enhance_modality(b, f_mul, f_mul, &format!("{MCFM}.refine_mul"), d.heads)?;
    }
    let rgb = enhance_modality(b, f_rgb, f_mul, &format!("{MCFM}.enhance_rgb"), d.heads)?;
    let aux = enhance_modality(b, f_aux, f_mul, &format!("{MCFM}.enhance_aux"), d.heads)?;
    let mut f_sem = fuse_final(b, rgb, aux)?;
    if d.variant == FusionVariant::Complex {
        f_sem = enhance_modality(b, f_sem, f_sem, &format!("{MCFM}.refine_sem"), d.heads)?;
    }
    Ok(f_sem)
}

/// `sigmoid(upsample(Conv1(f_sem)))` as `[B, out, out]`.
pub fn coarse_saliency(b: &Binding, f_sem: Var, out_size: usize) -> Result<Var> {
    let g = b.graph();
    let s = g.shape(f_sem);
    if out_size < s[2].max(s[3]) {
        return Err(Error::shape(format!(
            "coarse output {out_size} smaller than the {}x{} feature",
            s[2], s[3]
        )));
    }
    let logits = nn::conv(b, f_sem, &format!("{COARSE_HEAD}.conv"), 1, 0)?;
    let logits = g.resize_bilinear(logits, out_size, out_size)?;
    let probs = g.sigmoid(logits);
    g.reshape(probs, &[s[0], out_size, out_size])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::assert_gradients;
    use crate::autograd::Graph;
    use crate::params::BindMode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(c: usize, variant: FusionVariant) -> McfmDims {
        McfmDims {
            channels: c,
            heads: 1,
            variant,
        }
    }

    fn setup(c: usize, variant: FusionVariant) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        register(&mut reg, &mut ChaCha8Rng::seed_from_u64(3), dims(c, variant)).unwrap();
        reg
    }

    fn feat(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_are_preserved() {
        for v in [FusionVariant::Full, FusionVariant::Simple, FusionVariant::Complex] {
            let reg = setup(8, v);
            let g = Graph::new();
            let b = reg.bind(&g, BindMode::Inference);
            let r = g.constant(feat(&[1, 8, 12, 12], 0));
            let a = g.constant(feat(&[1, 8, 12, 12], 1));
            let f = forward(&b, &dims(8, v), r, a).unwrap();
            assert_eq!(g.shape(f), vec![1, 8, 12, 12]);
            let m = coarse_saliency(&b, f, 64).unwrap();
            assert_eq!(g.shape(m), vec![1, 64, 64]);
            assert!(g.value(m).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let reg = setup(8, FusionVariant::Full);
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let r = g.constant(feat(&[1, 8, 12, 12], 0));
        let a = g.constant(feat(&[1, 8, 6, 6], 1));
        assert!(fuse_initial(&b, r, a).is_err());
    }

    #[test]
    fn identity_on_first_half_copies_rgb() {
        let mut reg = setup(8, FusionVariant::Full);
        let mut w = Tensor::zeros(&[8, 16, 3, 3]);
        for o in 0..8 {
            w.data_mut()[((o * 16 + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        reg.set("mcfm.fuse_initial.weight", w).unwrap();
        reg.set("mcfm.fuse_initial.bias", Tensor::zeros(&[8])).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let rgb = feat(&[1, 8, 12, 12], 0);
        let out = fuse_initial(&b, g.constant(rgb.clone()), g.constant(feat(&[1, 8, 12, 12], 1))).unwrap();
        assert!(g.value(out).max_abs_diff(&rgb) < 1e-15);
    }

    #[test]
    fn symmetric_halves_ignore_input_order() {
        let mut reg = setup(4, FusionVariant::Full);
        let half = feat(&[4, 4, 3, 3], 9);
        let w = Tensor::concat(&[&half, &half], 1).unwrap();
        reg.set("mcfm.fuse_initial.weight", w).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let x = g.constant(feat(&[1, 4, 6, 6], 0));
        let y = g.constant(feat(&[1, 4, 6, 6], 1));
        let xy = g.value(fuse_initial(&b, x, y).unwrap());
        let yx = g.value(fuse_initial(&b, y, x).unwrap());
        assert!(xy.max_abs_diff(&yx) < 1e-12);
    }

    #[test]
    fn antisymmetric_halves_cancel_identical_inputs() {
        let mut reg = setup(4, FusionVariant::Full);
        let half = feat(&[4, 4, 3, 3], 9);
        let neg = half.map(|v| -v);
        reg.set("mcfm.fuse_final.weight", Tensor::concat(&[&half, &neg], 1).unwrap()).unwrap();
        reg.set("mcfm.fuse_final.bias", Tensor::zeros(&[4])).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let x = g.constant(feat(&[1, 4, 6, 6], 0));
        let out = g.value(fuse_final(&b, x, x).unwrap());
        assert!(out.data().iter().all(|&v| v.abs() < 1e-12));

        reg.set("mcfm.fuse_final.weight", feat(&[4, 8, 3, 3], 2)).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let z = g.constant(Tensor::zeros(&[1, 4, 6, 6]));
        assert!(g.value(fuse_final(&b, z, z).unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_context_gives_value_projection_of_the_constant() {
        let reg = setup(8, FusionVariant::Full);
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let column: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let f_mul = Tensor::from_fn(&[1, 8, 12, 12], |i| column[i / 144]);
        let f_m = feat(&[1, 8, 12, 12], 4);
        let out = enhance_modality(&b, g.constant(f_m.clone()), g.constant(f_mul), "mcfm.enhance_rgb", 1).unwrap();
        let out = g.value(out);
        // uniform attention: every position receives v = column @ Wv + bv
        let wv = reg.tensor("mcfm.enhance_rgb.v.weight").unwrap();
        let bv = reg.tensor("mcfm.enhance_rgb.v.bias").unwrap();
        for ch in 0..8 {
            let v: f64 = (0..8).map(|k| column[k] * wv.data()[k * 8 + ch]).sum::<f64>() + bv.data()[ch];
            for p in 0..144 {
                let i = ch * 144 + p;
                assert!((out.data()[i] - f_m.data()[i] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut reg = setup(8, FusionVariant::Full);
        reg.set("mcfm.enhance_aux.v.weight", Tensor::zeros(&[8, 8])).unwrap();
        reg.set("mcfm.enhance_aux.v.bias", Tensor::zeros(&[8])).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let f_m = feat(&[1, 8, 12, 12], 0);
        let out = enhance_modality(
            &b,
            g.constant(f_m.clone()),
            g.constant(feat(&[1, 8, 12, 12], 1)),
            "mcfm.enhance_aux",
            1,
        )
        .unwrap();
        assert!(g.value(out).bit_eq(&f_m));
    }

    #[test]
    fn coarse_head_analytic_values() {
        let mut reg = setup(8, FusionVariant::Full);
        reg.set("coarse_head.conv.weight", Tensor::zeros(&[1, 8, 1, 1])).unwrap();
        reg.set("coarse_head.conv.bias", Tensor::zeros(&[1])).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let f = g.constant(feat(&[1, 8, 12, 12], 0));
        let m = g.value(coarse_saliency(&b, f, 64).unwrap());
        assert!(m.data().iter().all(|&v| v == 0.5));
        reg.set("coarse_head.conv.bias", Tensor::full(&[1], 10.0)).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let f = g.constant(feat(&[1, 8, 12, 12], 0));
        let m = g.value(coarse_saliency(&b, f, 64).unwrap());
        assert!(m.data().iter().all(|&v| v >= 0.9999));
    }

    #[test]
    fn batch_permutation_is_equivariant() {
        let reg = setup(4, FusionVariant::Full);
        let d = dims(4, FusionVariant::Full);
        let run = |r: &Tensor, a: &Tensor| {
            let g = Graph::new();
            let b = reg.bind(&g, BindMode::Inference);
            let f = forward(&b, &d, g.constant(r.clone()), g.constant(a.clone())).unwrap();
            (*g.value(coarse_saliency(&b, f, 12).unwrap())).clone()
        };
        let r = feat(&[2, 4, 6, 6], 0);
        let a = feat(&[2, 4, 6, 6], 1);
        let swap = |t: &Tensor| Tensor::concat(&[&t.narrow(0, 1, 1), &t.narrow(0, 0, 1)], 0).unwrap();
        let out = run(&r, &a);
        let out_swapped = run(&swap(&r), &swap(&a));
        assert!(swap(&out).max_abs_diff(&out_swapped) < 1e-12);
    }

    #[test]
    fn end_to_end_gradients() {
        let reg = setup(3, FusionVariant::Full);
        let names: Vec<String> = reg.entries().iter().map(|e| e.name.clone()).collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| reg.tensor(n).unwrap().clone()).collect();
        inputs.push(feat(&[1, 3, 6, 6], 0));
        inputs.push(feat(&[1, 3, 6, 6], 1));
        let target = feat(&[1, 6, 6], 2).map(|v| (v > 0.0) as u8 as f64);
        let d = dims(3, FusionVariant::Full);
        let n = names.len();
        assert_gradients(&inputs, |g, vars| {
            let b = reg.bind(g, BindMode::Train);
            for (name, &v) in names.iter().zip(vars) {
                b.insert(name, v);
            }
            let f = forward(&b, &d, vars[n], vars[n + 1])?;
            let m = coarse_saliency(&b, f, 6)?;
            let t = g.constant(target.clone());
            let diff = g.sub(m, t)?;
            Ok(g.sum(g.mul(diff, diff)?))
        });
    }
}
