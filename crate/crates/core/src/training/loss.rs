use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

fn check(g: &Graph, m: Var, gt: Var) -> Result<()> {
    let (ms, gs) = (g.shape(m), g.shape(gt));
    if ms != gs {
        return Err(Error::shape(format!("prediction {ms:?} vs ground truth {gs:?}")));
    }
    Ok(())
}

/// Mean of `-[G ln M + (1 - G) ln(1 - M)]` with `M` clamped to `[eps, 1 - eps]`.
pub fn bce_loss(g: &Graph, m: Var, gt: Var, eps: f64) -> Result<Var> {
    check(g, m, gt)?;
    let m = g.clamp(m, eps, 1.0 - eps);
    let pos = g.mul(gt, g.log(m))?;
    let one_minus_g = g.add_scalar(g.neg(gt), 1.0);
    let one_minus_m = g.add_scalar(g.neg(m), 1.0);
    let neg = g.mul(one_minus_g, g.log(one_minus_m))?;
    Ok(g.neg(g.mean(g.add(pos, neg)?)))
}

/// `1 - (2 sum(M G) + s) / (sum M + sum G + s)`. Leading axes beyond the last
/// two are treated as a batch and the per-image losses are averaged.
pub fn dice_loss(g: &Graph, m: Var, gt: Var, smooth: f64) -> Result<Var> {
    check(g, m, gt)?;
    let s = g.shape(m);
    if s.len() <= 2 {
        return single_dice(g, m, gt, smooth);
    }
    let per_image: usize = s[s.len() - 2..].iter().product();
    let n = s.iter().product::<usize>() / per_image.max(1);
    let mf = g.reshape(m, &[n, per_image])?;
    let gf = g.reshape(gt, &[n, per_image])?;
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        losses.push(single_dice(g, g.narrow(mf, 0, i, 1)?, g.narrow(gf, 0, i, 1)?, smooth)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / n as f64))
}

fn single_dice(g: &Graph, m: Var, gt: Var, smooth: f64) -> Result<Var> {
    let inter = g.sum(g.mul(m, gt)?);
    let num = g.add_scalar(g.scale(inter, 2.0), smooth);
    let den = g.add_scalar(g.add(g.sum(m), g.sum(gt))?, smooth);
    // num / den = num * exp(-ln den)
    let ratio = g.mul(num, g.exp(g.neg(g.log(den))))?;
    Ok(g.add_scalar(g.neg(ratio), 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::assert_gradients;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl Fn(&Graph, Var, Var) -> Result<Var>, m: &Tensor, gt: &Tensor) -> f64 {
        let g = Graph::new();
        let out = f(&g, g.constant(m.clone()), g.constant(gt.clone())).unwrap();
        g.value(out).item()
    }

    fn bce(g: &Graph, m: Var, gt: Var) -> Result<Var> {
        bce_loss(g, m, gt, BCE_EPS)
    }

    fn dice(g: &Graph, m: Var, gt: Var) -> Result<Var> {
        dice_loss(g, m, gt, DICE_SMOOTH)
    }

    #[test]
    fn bce_reference_values() {
        let gt = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((eval(bce, &Tensor::full(&[2, 2], 0.5), &gt) - 2f64.ln()).abs() < 1e-12);
        let m = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let expect = -(0.9f64.ln() * 2.0 + 0.8f64.ln() * 2.0) / 4.0;
        assert!((eval(bce, &m, &gt) - expect).abs() < 1e-12);
        assert!((expect - 0.164252).abs() < 1e-6);
        assert!(eval(bce, &gt, &gt) <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn dice_reference_values() {
        let gt = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(eval(dice, &gt, &gt).abs() < 1e-15);
        assert!((eval(dice, &Tensor::full(&[2, 2], 0.5), &gt) - 0.5).abs() < 1e-12);
        let four = Tensor::full(&[2, 2], 1.0);
        assert!((eval(dice, &Tensor::zeros(&[2, 2]), &four) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn batched_dice_averages_images() {
        let gt = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 2, 2], vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((eval(dice, &m, &gt) - (0.5 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(bce(&g, a, b).is_err());
        assert!(dice(&g, a, b).is_err());
    }

    #[test]
    fn gradients_on_4x4_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Tensor::from_fn(&[4, 4], |_| rng.gen_range(0.05..0.95));
        let gt = Tensor::from_fn(&[4, 4], |_| rng.gen_bool(0.4) as u8 as f64);
        assert_gradients(&[m.clone()], |g, v| bce(g, v[0], g.constant(gt.clone())));
        assert_gradients(&[m], |g, v| dice(g, v[0], g.constant(gt.clone())));
    }
}
