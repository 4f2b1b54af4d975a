//! Independent oracles and fixtures shared by the integration tests.
//!
//! Every oracle here is written straight from the definitions, with plain
//! loops over pixels, and shares no code with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sammese::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------- metrics

pub fn oracle_mae(m: &[Vec<f64>], g: &[Vec<bool>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for (mr, gr) in m.iter().zip(g) {
        for (&p, &t) in mr.iter().zip(gr) {
            s += (p - if t { 1.0 } else { 0.0 }).abs();
            n += 1.0;
        }
    }
    s / n
}

fn level(p: f64) -> i64 {
    (p * 255.0).round() as i64
}

/// `(max, mean)` F-beta over thresholds `0..=255` on `round(255 p) >= k`.
pub fn oracle_f(m: &[Vec<f64>], g: &[Vec<bool>], beta_sq: f64) -> (f64, f64) {
    let positives = g.iter().flatten().filter(|&&t| t).count() as f64;
    if positives == 0.0 {
        return (0.0, 0.0);
    }
    let mut scores = Vec::new();
    for k in 0..256i64 {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (mr, gr) in m.iter().zip(g) {
            for (&p, &t) in mr.iter().zip(gr) {
                if level(p) >= k {
                    if t {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / positives;
        let f = if beta_sq * precision + recall > 0.0 {
            (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
        } else {
            0.0
        };
        scores.push(f);
    }
    let max = scores.iter().cloned().fold(0.0, f64::max);
    (max, scores.iter().sum::<f64>() / 256.0)
}

/// `(max, mean)` enhanced-alignment measure, built per pixel.
pub fn oracle_e(m: &[Vec<f64>], g: &[Vec<bool>]) -> (f64, f64) {
    let h = g.len();
    let w = g[0].len();
    let n = (h * w) as f64;
    let gt: Vec<Vec<f64>> = g
        .iter()
        .map(|r| r.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect())
        .collect();
    let gt_sum: f64 = gt.iter().flatten().sum();
    let mut scores = Vec::new();
    for k in 0..256i64 {
        let fm: Vec<Vec<f64>> = m
            .iter()
            .map(|r| r.iter().map(|&p| if level(p) >= k { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut enhanced_sum = 0.0;
        if gt_sum == 0.0 {
            for y in 0..h {
                for x in 0..w {
                    enhanced_sum += 1.0 - fm[y][x];
                }
            }
        } else if gt_sum == n {
            for y in 0..h {
                for x in 0..w {
                    enhanced_sum += fm[y][x];
                }
            }
        } else {
            let mu_fm: f64 = fm.iter().flatten().sum::<f64>() / n;
            let mu_gt = gt_sum / n;
            for y in 0..h {
                for x in 0..w {
                    let a = fm[y][x] - mu_fm;
                    let b = gt[y][x] - mu_gt;
                    let d = a * a + b * b;
                    let xi = if d == 0.0 { 0.0 } else { 2.0 * a * b / d };
                    enhanced_sum += (xi + 1.0) * (xi + 1.0) / 4.0;
                }
            }
        }
        scores.push(enhanced_sum / n);
    }
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    (max, scores.iter().sum::<f64>() / 256.0)
}

/// Round half to even, spelled out.
fn round_half_even(v: f64) -> f64 {
    let f = v.floor();
    let diff = v - f;
    if diff > 0.5 {
        f + 1.0
    } else if diff < 0.5 {
        f
    } else if (f as i64) % 2 == 0 {
        f
    } else {
        f + 1.0
    }
}

fn sample_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let denom = if n > 1.0 { n - 1.0 } else { 1.0 };
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / denom;
    (mu, var.sqrt())
}

fn object_score(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let (mu, sigma) = sample_std(v);
    2.0 * mu / (mu * mu + 1.0 + sigma + f64::EPSILON)
}

fn ssim(p: &[f64], t: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let denom = if n > 1.0 { n - 1.0 } else { 1.0 };
    let mx = p.iter().sum::<f64>() / n;
    let my = t.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..p.len() {
        sxx += (p[i] - mx) * (p[i] - mx);
        syy += (t[i] - my) * (t[i] - my);
        sxy += (p[i] - mx) * (t[i] - my);
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn oracle_s(m: &[Vec<f64>], g: &[Vec<bool>], alpha: f64) -> f64 {
    let h = g.len();
    let w = g[0].len();
    let n = (h * w) as f64;
    let fg_count = g.iter().flatten().filter(|&&t| t).count() as f64;
    let mean_pred: f64 = m.iter().flatten().sum::<f64>() / n;
    if fg_count == 0.0 {
        return 1.0 - mean_pred;
    }
    if fg_count == n {
        return mean_pred;
    }
    let u = fg_count / n;
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if g[y][x] {
                fg_vals.push(m[y][x]);
            } else {
                bg_vals.push(1.0 - m[y][x]);
            }
        }
    }
    let object = u * object_score(&fg_vals) + (1.0 - u) * object_score(&bg_vals);

    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y][x] {
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let cx = ((round_half_even(sx / fg_count) as usize) + 1).min(w);
    let cy = ((round_half_even(sy / fg_count) as usize) + 1).min(h);
    let mut region = 0.0;
    for (y0, y1, x0, x1) in [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)] {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(m[y][x]);
                t.push(if g[y][x] { 1.0 } else { 0.0 });
            }
        }
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / n;
        region += weight * ssim(&p, &t);
    }
    let s = alpha * object + (1.0 - alpha) * region;
    if s < 0.0 {
        0.0
    } else {
        s
    }
}

/// A random 8x8 prediction / ground-truth pair. Every 40th fixture has an
/// all-background truth and every 40th (offset 20) an all-foreground truth.
pub fn metric_fixture(i: u64) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let mut r = rng(1000 + i);
    let fill: f64 = r.gen_range(0.05..0.95);
    let mut g: Vec<Vec<bool>> = (0..8)
        .map(|_| (0..8).map(|_| r.gen_bool(fill)).collect())
        .collect();
    if i % 40 == 0 {
        g = vec![vec![false; 8]; 8];
    } else if i % 40 == 20 {
        g = vec![vec![true; 8]; 8];
    }
    let correlated = i % 3 != 0;
    let m: Vec<Vec<f64>> = (0..8)
        .map(|y| {
            (0..8)
                .map(|x| {
                    let noise: f64 = r.gen_range(0.0..1.0);
                    if correlated {
                        let t = if g[y][x] { 1.0 } else { 0.0 };
                        (0.6 * t + 0.4 * noise).clamp(0.0, 1.0)
                    } else {
                        noise
                    }
                })
                .collect()
        })
        .collect();
    (m, g)
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    let h = m.len();
    let w = m[0].len();
    Tensor::new(&[h, w], m.iter().flatten().copied().collect()).unwrap()
}

pub fn mask_tensor(g: &[Vec<bool>]) -> Tensor {
    to_tensor(
        &g.iter()
            .map(|r| r.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect())
            .collect::<Vec<Vec<f64>>>(),
    )
}

// ------------------------------------------------------ geometric prompts

#[derive(Debug, PartialEq, Eq)]
pub struct OracleGeometry {
    /// `(x_min, y_min, x_max, y_max)`.
    pub boxes: Vec<(usize, usize, usize, usize)>,
    pub points: Vec<(usize, usize)>,
}

/// Brute-force prompt derivation: components by iterated minimum-label
/// propagation, then bounding boxes, area ordering and centroid snapping.
pub fn oracle_geometry(
    map: &[f64],
    h: usize,
    w: usize,
    threshold: f64,
    min_area_fraction: f64,
    max_points: usize,
    per_component: bool,
) -> OracleGeometry {
    let fg: Vec<bool> = map.iter().map(|&v| v > threshold).collect();
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for i in 0..h * w {
            if !fg[i] {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let mut neighbours = Vec::new();
            if x > 0 {
                neighbours.push(i - 1);
            }
            if x + 1 < w {
                neighbours.push(i + 1);
            }
            if y > 0 {
                neighbours.push(i - w);
            }
            if y + 1 < h {
                neighbours.push(i + w);
            }
            for j in neighbours {
                if fg[j] && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..h * w).filter(|&i| fg[i] && label[i] == i).collect();
    roots.sort();
    let min_area = min_area_fraction * (h * w) as f64;
    let mut comps: Vec<(usize, Vec<usize>)> = roots
        .iter()
        .map(|&r| (r, (0..h * w).filter(|&i| fg[i] && label[i] == r).collect::<Vec<_>>()))
        .filter(|(_, px)| px.len() as f64 >= min_area)
        .collect();

    if comps.is_empty() {
        let mut best = 0;
        for i in 0..h * w {
            if map[i] > map[best] {
                best = i;
            }
        }
        return OracleGeometry {
            boxes: vec![],
            points: vec![(best % w, best / w)],
        };
    }

    let bounds = |px: &[usize]| {
        let xs = px.iter().map(|&i| i % w);
        let ys = px.iter().map(|&i| i / w);
        (
            xs.clone().min().unwrap(),
            ys.clone().min().unwrap(),
            xs.max().unwrap(),
            ys.max().unwrap(),
        )
    };
    let ok = |b: &(usize, usize, usize, usize)| b.2 > b.0 && b.3 > b.1;
    let boxes = if per_component {
        comps.iter().map(|(_, px)| bounds(px)).filter(ok).collect()
    } else {
        let all: Vec<usize> = comps.iter().flat_map(|(_, px)| px.clone()).collect();
        let b = bounds(&all);
        if ok(&b) {
            vec![b]
        } else {
            vec![]
        }
    };

    comps.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let points = comps
        .iter()
        .take(max_points)
        .map(|(_, px)| {
            let n = px.len() as i64;
            let sx: i64 = px.iter().map(|&i| (i % w) as i64).sum();
            let sy: i64 = px.iter().map(|&i| (i / w) as i64).sum();
            // pixels are visited in raster order, so strict `<` keeps the first tie
            let mut best = px[0];
            let mut best_d = i64::MAX;
            for &i in px {
                let dx = n * (i % w) as i64 - sx;
                let dy = n * (i / w) as i64 - sy;
                let d = dx * dx + dy * dy;
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            (best % w, best / w)
        })
        .collect();
    OracleGeometry { boxes, points }
}

pub fn iou(pred: &Tensor, gt: &Tensor, threshold: f64) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (p > threshold, t > 0.5);
        if a && b {
            inter += 1.0;
        }
        if a || b {
            union += 1.0;
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}
