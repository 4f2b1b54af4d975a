use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_binary, col2im, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col, inverse_permutation,
    permute, reduce_to_shape, resize_bilinear_planes, resize_bilinear_planes_adjoint,
    ConvGeometry, Tensor,
};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let x = self.value(a);
        let y = Rc::new(x.map(f));
        let y_keep = Rc::clone(&y);
        self.push((*y).clone(), &[a], move |g, _| {
            let mut out = g.clone();
            for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y_keep.data()) {
                *o *= df(xv, yv);
            }
            vec![Some(out)]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = broadcast_binary(&x, &y, |p, q| p + q)?;
        let (sa, sb) = (x.shape().to_vec(), y.shape().to_vec());
        Ok(self.push(out, &[a, b], move |g, want| {
            vec![
                want[0].then(|| reduce_to_shape(g, &sa)),
                want[1].then(|| reduce_to_shape(g, &sb)),
            ]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = broadcast_binary(&x, &y, |p, q| p - q)?;
        let (sa, sb) = (x.shape().to_vec(), y.shape().to_vec());
        Ok(self.push(out, &[a, b], move |g, want| {
            vec![
                want[0].then(|| reduce_to_shape(g, &sa)),
                want[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)),
            ]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = broadcast_binary(&x, &y, |p, q| p * q)?;
        Ok(self.push(out, &[a, b], move |g, want| {
            let ga = want[0].then(|| {
                let full = broadcast_binary(g, &y, |p, q| p * q).expect("broadcast checked");
                reduce_to_shape(&full, x.shape())
            });
            let gb = want[1].then(|| {
                let full = broadcast_binary(g, &x, |p, q| p * q).expect("broadcast checked");
                reduce_to_shape(&full, y.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, |x, _| gelu_grad(x))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, f64::cos, |x, _| -x.sin())
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            |v| v.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        self.push(Tensor::scalar(x.sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.push(out, &[a], move |g, _| {
            vec![Some(g.reshape(&orig).expect("same numel"))]
        }))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let x = self.value(a);
        let out = permute(&x, axes);
        let inv = inverse_permutation(axes);
        self.push(out, &[a], move |g, _| vec![Some(permute(g, &inv))])
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: Var) -> Var {
        let r = self.value(a).ndim();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.push(out, parts, move |g, want| {
            let mut start = 0;
            sizes
                .iter()
                .zip(want)
                .map(|(&len, &w)| {
                    let piece = w.then(|| g.narrow(axis, start, len));
                    start += len;
                    piece
                })
                .collect()
        }))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                x.shape()
            )));
        }
        let out = x.narrow(axis, start, len);
        let shape = x.shape().to_vec();
        Ok(self.push(out, &[a], move |g, _| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let n = shape[axis];
            let mut full = Tensor::zeros(&shape);
            let d = full.data_mut();
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                d[(o * n + start) * inner..(o * n + start + len) * inner].copy_from_slice(src);
            }
            vec![Some(full)]
        }))
    }

    /// Batched matrix product.
    ///
    /// `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or carries
    /// the same leading batch axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape().to_vec(), y.shape().to_vec());
        if xs.len() < 2 || ys.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2: {xs:?} x {ys:?}")));
        }
        let (m, k) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (k2, n) = (ys[ys.len() - 2], ys[ys.len() - 1]);
        let shared = ys.len() == 2;
        if k != k2 || (!shared && xs[..xs.len() - 2] != ys[..ys.len() - 2]) {
            return Err(Error::shape(format!("matmul mismatch: {xs:?} x {ys:?}")));
        }
        let batch: usize = xs[..xs.len() - 2].iter().product();
        let mut out_shape = xs[..xs.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        if shared {
            // fold the batch into rows
            gemm_acc(x.data(), y.data(), &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                gemm_acc(
                    &x.data()[bi * m * k..(bi + 1) * m * k],
                    &y.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, &[a, b], move |g, want| {
            let gd = g.data();
            let ga = want[0].then(|| {
                let mut d = vec![0.0; batch * m * k];
                if shared {
                    gemm_nt_acc(gd, y.data(), &mut d, batch * m, n, k);
                } else {
                    for bi in 0..batch {
                        gemm_nt_acc(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &y.data()[bi * k * n..(bi + 1) * k * n],
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                Tensor::new(&xs, d).expect("shape")
            });
            let gb = want[1].then(|| {
                let mut d = vec![0.0; ys.iter().product()];
                if shared {
                    gemm_tn_acc(x.data(), gd, &mut d, k, batch * m, n);
                } else {
                    for bi in 0..batch {
                        gemm_tn_acc(
                            &x.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut d[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
                Tensor::new(&ys, d).expect("shape")
            });
            vec![ga, gb]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().expect("softmax on scalar");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y_keep = y.clone();
        self.push(y, &[a], move |g, _| {
            let mut out = g.clone();
            for (orow, yrow) in out
                .data_mut()
                .chunks_mut(n.max(1))
                .zip(y_keep.data().chunks(n.max(1)))
            {
                let dot: f64 = orow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for (o, &yv) in orow.iter_mut().zip(yrow) {
                    *o = yv * (*o - dot);
                }
            }
            vec![Some(out)]
        })
    }

    /// Normalise the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().expect("layer_norm on scalar");
        let mut y = (*x).clone();
        let rows = x.numel() / n;
        let mut inv_std = Vec::with_capacity(rows);
        for row in y.data_mut().chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let y_keep = y.clone();
        self.push(y, &[a], move |g, _| {
            let mut out = g.clone();
            for ((orow, yrow), &is) in out
                .data_mut()
                .chunks_mut(n)
                .zip(y_keep.data().chunks(n))
                .zip(&inv_std)
            {
                let mean_g = orow.iter().sum::<f64>() / n as f64;
                let mean_gy = orow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                for (o, &yv) in orow.iter_mut().zip(yrow) {
                    *o = is * (*o - mean_g - yv * mean_gy);
                }
            }
            vec![Some(out)]
        })
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [O, C, k, k]`, no bias.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        let geo = ConvGeometry {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[2] {
            return Err(Error::shape(format!("conv2d kernel {ws:?} larger than input {xs:?}")));
        }
        let (b, o) = (xs[0], ws[0]);
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let ckk = xs[1] * ws[2] * ws[2];
        let img_len = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            let cols = im2col(&xv.data()[bi * img_len..(bi + 1) * img_len], &geo);
            gemm_acc(
                wv.data(),
                &cols,
                &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow],
                o,
                ckk,
                oh * ow,
            );
        }
        let out = Tensor::new(&[b, o, oh, ow], out)?;
        Ok(self.push(out, &[x, w], move |g, want| {
            let mut gx = want[0].then(|| vec![0.0; xv.numel()]);
            let mut gw = want[1].then(|| vec![0.0; wv.numel()]);
            for bi in 0..b {
                let gout = &g.data()[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                if let Some(gw) = gw.as_mut() {
                    let cols = im2col(&xv.data()[bi * img_len..(bi + 1) * img_len], &geo);
                    gemm_nt_acc(gout, &cols, gw, o, oh * ow, ckk);
                }
                if let Some(gx) = gx.as_mut() {
                    let mut dcols = vec![0.0; ckk * oh * ow];
                    gemm_tn_acc(wv.data(), gout, &mut dcols, ckk, o, oh * ow);
                    col2im(&dcols, &geo, &mut gx[bi * img_len..(bi + 1) * img_len]);
                }
            }
            vec![
                gx.map(|d| Tensor::new(&xs, d).expect("shape")),
                gw.map(|d| Tensor::new(&ws, d).expect("shape")),
            ]
        }))
    }

    /// Half-pixel bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]`.
    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("resize_bilinear expects NCHW, got {xs:?}")));
        }
        if xs[2] == oh && xs[3] == ow {
            return Ok(x);
        }
        let planes = xs[0] * xs[1];
        let (h, w) = (xs[2], xs[3]);
        let out = resize_bilinear_planes(xv.data(), planes, h, w, oh, ow);
        let out = Tensor::new(&[xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(out, &[x], move |g, _| {
            let d = resize_bilinear_planes_adjoint(g.data(), planes, h, w, oh, ow);
            vec![Some(Tensor::new(&xs, d).expect("shape"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::assert_gradients;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.7311 + seed as f64 * 1.37).sin())
    }

    #[test]
    fn elementwise_grads() {
        assert_gradients(&[t(&[2, 3], 1), t(&[3], 2)], |g, v| {
            let s = g.add(v[0], v[1])?;
            let p = g.mul(s, v[0])?;
            let q = g.sub(p, v[1])?;
            let r = g.gelu(q);
            let r = g.sigmoid(r);
            let r = g.tanh(r);
            Ok(g.sum(r))
        });
    }

    #[test]
    fn matmul_grads_shared_and_batched() {
        assert_gradients(&[t(&[2, 3, 4], 1), t(&[4, 5], 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.sin(y);
            Ok(g.sum(y))
        });
        assert_gradients(&[t(&[2, 3, 4], 3), t(&[2, 4, 2], 4)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.cos(y);
            Ok(g.sum(y))
        });
    }

    #[test]
    fn softmax_layer_norm_grads() {
        assert_gradients(&[t(&[3, 5], 5), t(&[3, 5], 6)], |g, v| {
            let s = g.softmax(v[0]);
            let n = g.layer_norm(v[0], 1e-5);
            let p = g.mul(s, v[1])?;
            let q = g.mul(n, v[1])?;
            let r = g.add(p, q)?;
            let r = g.sin(r);
            Ok(g.sum(r))
        });
    }

    #[test]
    fn conv_resize_grads() {
        assert_gradients(&[t(&[2, 2, 5, 5], 7), t(&[3, 2, 3, 3], 8)], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            let y = g.resize_bilinear(y, 5, 4)?;
            let y = g.sin(y);
            Ok(g.sum(y))
        });
    }

    #[test]
    fn shape_plumbing_grads() {
        assert_gradients(&[t(&[2, 3, 4], 9), t(&[2, 1, 4], 10)], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let p = g.permute(c, &[2, 0, 1]);
            let r = g.reshape(p, &[4, 8])?;
            let n = g.narrow(r, 1, 2, 5)?;
            let n = g.transpose(n);
            let e = g.exp(n);
            let l = g.log(g.add_scalar(e, 1.0));
            Ok(g.mean(l))
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let v = g.variable(Tensor::ones(&[2]));
        let p = g.mul(c, v).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = t(&[1, 2, 4, 4], 11);
        let w = t(&[3, 2, 3, 3], 12);
        let g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.value(g.conv2d(xv, wv, 1, 1).unwrap());
        for o in 0..3 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = yy as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    s += x.data()[(c * 4 + iy as usize) * 4 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 4 + yy) * 4 + xx] - s).abs() < 1e-12);
                }
            }
        }
    }
}
