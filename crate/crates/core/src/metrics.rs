//! Salient-object-detection metrics: MAE, F-measure, S-measure, E-measure.
//!
//! Threshold sweeps run on 8-bit quantised maps: `q = round(255 M)` and the
//! binarisation at threshold `k` (0..=255) is `q >= k`.

use std::fmt::Write as _;
use std::path::Path;

use crate::data_io::read_gray;
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear_planes, Tensor};

pub const BETA_SQ: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
pub const THRESHOLDS: usize = 256;

fn check(m: &Tensor, g: &Tensor) {
    assert_eq!(m.shape(), g.shape(), "prediction and ground truth differ in shape");
    assert_eq!(m.ndim(), 2, "maps must be [H, W]");
}

fn quantize(m: &Tensor) -> Vec<usize> {
    m.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as usize)
        .collect()
}

/// Per-threshold `(tp, predicted positives)` from cumulative histograms.
fn sweep(m: &Tensor, g: &Tensor) -> Vec<(usize, usize)> {
    let q = quantize(m);
    let mut fg_hist = [0usize; THRESHOLDS];
    let mut all_hist = [0usize; THRESHOLDS];
    for (&qi, &gi) in q.iter().zip(g.data()) {
        all_hist[qi] += 1;
        if gi > 0.5 {
            fg_hist[qi] += 1;
        }
    }
    let mut out = vec![(0, 0); THRESHOLDS];
    let (mut tp, mut pp) = (0, 0);
    for k in (0..THRESHOLDS).rev() {
        tp += fg_hist[k];
        pp += all_hist[k];
        out[k] = (tp, pp);
    }
    out
}

pub fn mae(m: &Tensor, g: &Tensor) -> f64 {
    check(m, g);
    let s: f64 = m.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum();
    s / m.numel() as f64
}

/// `(max, mean)` of `F_beta` over the 256 thresholds. Zero when the ground
/// truth has no foreground.
pub fn f_measure(m: &Tensor, g: &Tensor, beta_sq: f64) -> (f64, f64) {
    check(m, g);
    let positives = g.data().iter().filter(|&&v| v > 0.5).count();
    if positives == 0 {
        return (0.0, 0.0);
    }
    let scores: Vec<f64> = sweep(m, g)
        .into_iter()
        .map(|(tp, pp)| {
            let p = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
            let r = tp as f64 / positives as f64;
            let den = beta_sq * p + r;
            if den == 0.0 {
                0.0
            } else {
                (1.0 + beta_sq) * p * r / den
            }
        })
        .collect();
    let max = scores.iter().cloned().fold(0.0, f64::max);
    (max, scores.iter().sum::<f64>() / THRESHOLDS as f64)
}

/// Enhanced alignment of one binarisation given its four confusion counts.
fn enhanced(tp: usize, fp: usize, fn_: usize, tn: usize) -> f64 {
    let n = (tp + fp + fn_ + tn) as f64;
    let gt_fg = tp + fn_;
    let pred_fg = tp + fp;
    if gt_fg == 0 {
        return (fn_ + tn) as f64 / n;
    }
    if gt_fg as f64 == n {
        return pred_fg as f64 / n;
    }
    let mp = pred_fg as f64 / n;
    let mg = gt_fg as f64 / n;
    let (p1, p0) = (1.0 - mp, -mp);
    let (g1, g0) = (1.0 - mg, -mg);
    let term = |a: f64, b: f64| {
        let den = a * a + b * b;
        let xi = if den == 0.0 { 0.0 } else { 2.0 * a * b / den };
        (1.0 + xi) * (1.0 + xi) / 4.0
    };
    (tp as f64 * term(p1, g1) + fp as f64 * term(p1, g0) + fn_ as f64 * term(p0, g1) + tn as f64 * term(p0, g0))
        / n
}

/// `(max, mean)` of the E-measure over the 256 thresholds.
pub fn e_measure(m: &Tensor, g: &Tensor) -> (f64, f64) {
    check(m, g);
    let n = m.numel();
    let positives = g.data().iter().filter(|&&v| v > 0.5).count();
    let scores: Vec<f64> = sweep(m, g)
        .into_iter()
        .map(|(tp, pp)| {
            let fp = pp - tp;
            let fn_ = positives - tp;
            enhanced(tp, fp, fn_, n - pp - fn_)
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    (max, scores.iter().sum::<f64>() / THRESHOLDS as f64)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

/// SSIM-style score of one quadrant.
fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let d = (n - 1.0).max(1.0);
    let sx = p.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / d;
    let sy = g.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure, `alpha * object + (1 - alpha) * region`, clamped at 0.
pub fn s_measure(m: &Tensor, g: &Tensor, alpha: f64) -> f64 {
    check(m, g);
    let (h, w) = (m.dim(0), m.dim(1));
    let (md, gd) = (m.data(), g.data());
    let fg_frac = gd.iter().filter(|&&v| v > 0.5).count() as f64 / gd.len() as f64;
    if fg_frac == 0.0 {
        return 1.0 - m.mean();
    }
    if fg_frac == 1.0 {
        return m.mean();
    }

    let fg: Vec<f64> = md.iter().zip(gd).filter(|(_, &g)| g > 0.5).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = md.iter().zip(gd).filter(|(_, &g)| g <= 0.5).map(|(&p, _)| 1.0 - p).collect();
    let object = fg_frac * s_object(&fg) + (1.0 - fg_frac) * s_object(&bg);

    // centroid (rounded half to even) plus one, as in the reference code
    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
    for (i, &v) in gd.iter().enumerate() {
        if v > 0.5 {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
            cnt += 1.0;
        }
    }
    let cx = (sx / cnt).round_ties_even() as usize + 1;
    let cy = (sy / cnt).round_ties_even() as usize + 1;
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (h * w) as f64;
    let quadrants = [
        (0..cy, 0..cx, (cx * cy) as f64 / area),
        (0..cy, cx..w, (cy * (w - cx)) as f64 / area),
        (cy..h, 0..cx, ((h - cy) * cx) as f64 / area),
        (cy..h, cx..w, ((h - cy) * (w - cx)) as f64 / area),
    ];
    let mut region = 0.0;
    for (rows, cols, weight) in quadrants {
        let (mut p, mut q) = (Vec::new(), Vec::new());
        for y in rows {
            for x in cols.clone() {
                p.push(md[y * w + x]);
                q.push(gd[y * w + x]);
            }
        }
        region += weight * region_ssim(&p, &q);
    }
    (alpha * object + (1.0 - alpha) * region).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    pub f_beta_max: f64,
    pub f_beta_mean: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub e_measure_mean: f64,
    /// The ground truth had no foreground, so F-measure is defined as zero.
    pub empty_gt: bool,
}

pub fn evaluate_pair(id: &str, m: &Tensor, g: &Tensor) -> ImageMetrics {
    let (f_max, f_mean) = f_measure(m, g, BETA_SQ);
    let (e_max, e_mean) = e_measure(m, g);
    ImageMetrics {
        id: id.to_string(),
        mae: mae(m, g),
        f_beta_max: f_max,
        f_beta_mean: f_mean,
        s_measure: s_measure(m, g, S_ALPHA),
        e_measure_max: e_max,
        e_measure_mean: e_mean,
        empty_gt: !g.data().iter().any(|&v| v > 0.5),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mae: f64,
    pub f_beta_max: f64,
    pub f_beta_mean: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub e_measure_mean: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl EvalResult {
    /// Dataset values are plain means of the per-image values.
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let avg = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Self {
            mae: avg(|m| m.mae),
            f_beta_max: avg(|m| m.f_beta_max),
            f_beta_mean: avg(|m| m.f_beta_mean),
            s_measure: avg(|m| m.s_measure),
            e_measure_max: avg(|m| m.e_measure_max),
            e_measure_mean: avg(|m| m.e_measure_mean),
            per_image,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,mae,f_beta_max,f_beta_mean,s_measure,e_measure_max,e_measure_mean\n");
        let mut row = |id: &str, v: [f64; 6]| {
            let _ = writeln!(
                s,
                "{id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                v[0], v[1], v[2], v[3], v[4], v[5]
            );
        };
        for m in &self.per_image {
            row(&m.id, [m.mae, m.f_beta_max, m.f_beta_mean, m.s_measure, m.e_measure_max, m.e_measure_mean]);
        }
        row(
            "mean",
            [
                self.mae,
                self.f_beta_max,
                self.f_beta_mean,
                self.s_measure,
                self.e_measure_max,
                self.e_measure_mean,
            ],
        );
        s
    }

    /// One aligned row: `name  S_m  E_m  F_b  MAE`.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{name:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            self.s_measure, self.e_measure_max, self.f_beta_max, self.mae
        )
    }

    pub fn table_header() -> String {
        format!("{:<24} {:>7} {:>7} {:>7} {:>7}", "", "S_m", "E_m", "F_b", "MAE")
    }
}

/// Score every ground-truth mask in `gt_dir` against the prediction with the
/// same basename in `pred_dir`. Predictions are resized bilinearly to the
/// ground-truth size when they differ.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<EvalResult> {
    let list = |dir: &Path| -> Result<std::collections::BTreeMap<String, std::path::PathBuf>> {
        let mut out = std::collections::BTreeMap::new();
        for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                if p.is_file() && !stem.starts_with('.') {
                    out.insert(stem.to_string(), p);
                }
            }
        }
        Ok(out)
    };
    let gts = list(gt_dir)?;
    let preds = list(pred_dir)?;
    if gts.is_empty() {
        return Err(Error::Dataset(format!("no masks in {}", gt_dir.display())));
    }
    let mut per_image = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let pred_path = preds.get(id).ok_or_else(|| Error::Orphan {
            id: id.clone(),
            missing: pred_dir.display().to_string(),
        })?;
        let g = read_gray(gt_path)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let mut m = read_gray(pred_path)?;
        let (h, w) = (g.dim(0), g.dim(1));
        if m.shape() != g.shape() {
            let data = resize_bilinear_planes(m.data(), 1, m.dim(0), m.dim(1), h, w);
            m = Tensor::new(&[h, w], data)?;
        }
        per_image.push(evaluate_pair(id, &m, &g));
    }
    Ok(EvalResult::from_images(per_image))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = t(2, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(mae(&g, &g), 0.0);
        assert_eq!(f_measure(&g, &g, BETA_SQ).0, 1.0);
        assert!((s_measure(&g, &g, S_ALPHA) - 1.0).abs() < 1e-6);
        assert!((e_measure(&g, &g).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_and_degenerate_cases() {
        let g = Tensor::zeros(&[4, 4]);
        let m = Tensor::full(&[4, 4], 0.25);
        assert_eq!(mae(&m, &g), 0.25);
        assert_eq!(s_measure(&m, &g, S_ALPHA), 0.75);
        assert_eq!(f_measure(&m, &g, BETA_SQ), (0.0, 0.0));
        let ones = Tensor::ones(&[4, 4]);
        assert_eq!(s_measure(&m, &ones, S_ALPHA), 0.25);
        // all-background truth and an empty prediction align perfectly
        assert_eq!(e_measure(&Tensor::zeros(&[4, 4]), &g).0, 1.0);
    }

    #[test]
    fn inverted_prediction_scores_zero_f() {
        let g = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let inv = g.map(|v| 1.0 - v);
        let (f, _) = f_measure(&inv, &g, BETA_SQ);
        // only the all-foreground threshold overlaps the truth
        let p: f64 = 0.5;
        let expect = 1.3 * p / (0.3 * p + 1.0);
        assert!((f - expect).abs() < 1e-12);
    }

    #[test]
    fn dataset_mean_of_images() {
        let a = evaluate_pair("a", &Tensor::full(&[2, 2], 0.5), &t(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let b = evaluate_pair("b", &t(2, 2, &[1.0, 0.0, 0.0, 0.0]), &t(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let r = EvalResult::from_images(vec![a.clone(), b.clone()]);
        assert_eq!(r.mae, (a.mae + b.mae) / 2.0);
        assert_eq!(r.s_measure, (a.s_measure + b.s_measure) / 2.0);
        assert!(r.to_csv().lines().count() == 4);
    }
}
