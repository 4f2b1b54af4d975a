use serde::{Deserialize, Serialize};

use crate::tensor::{resize_bilinear_planes, Tensor};

/// Inclusive pixel bounds in encoder-input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Foreground,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: usize,
    pub y: usize,
    pub label: PointLabel,
}

impl PointPrompt {
    pub fn foreground(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            label: PointLabel::Foreground,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeometricPrompts {
    /// Mask prompt at the prompt encoder's resolution; not serialised.
    #[serde(skip)]
    pub mask: Option<Tensor>,
    pub boxes: Vec<BoxPrompt>,
    pub points: Vec<PointPrompt>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricParams {
    pub threshold: f64,
    pub min_area_fraction: f64,
    pub max_points: usize,
    /// One box per kept component instead of one box around their union.
    pub per_component_boxes: bool,
    /// Side of the emitted mask prompt; `None` skips it.
    pub mask_size: Option<usize>,
}

impl Default for GeometricParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_area_fraction: 0.001,
            max_points: 1,
            per_component_boxes: false,
            mask_size: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Component {
    label: usize,
    pixels: Vec<(usize, usize)>,
}

impl Component {
    fn bounds(&self) -> BoxPrompt {
        let mut b = BoxPrompt {
            x_min: usize::MAX,
            y_min: usize::MAX,
            x_max: 0,
            y_max: 0,
        };
        for &(x, y) in &self.pixels {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        b
    }

    /// Member pixel nearest the exact centroid, ties broken in raster order.
    fn anchor(&self) -> (usize, usize) {
        let n = self.pixels.len() as i64;
        let (sx, sy) = self
            .pixels
            .iter()
            .fold((0i64, 0i64), |(a, b), &(x, y)| (a + x as i64, b + y as i64));
        // distances scaled by n to stay in integers
        let dist = |&(x, y): &(usize, usize)| {
            let dx = n * x as i64 - sx;
            let dy = n * y as i64 - sy;
            dx * dx + dy * dy
        };
        let mut best = self.pixels[0];
        for p in &self.pixels[1..] {
            let (d, bd) = (dist(p), dist(&best));
            if d < bd || (d == bd && (p.1, p.0) < (best.1, best.0)) {
                best = *p;
            }
        }
        best
    }
}

/// 4-connected components of `fg` (row-major `h x w`), labelled in raster
/// order of their first pixel.
fn components(fg: &[bool], h: usize, w: usize) -> Vec<Component> {
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut pixels = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            let mut visit = |j: usize| {
                if fg[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        pixels.sort_by_key(|&(x, y)| (y, x));
        out.push(Component { label: id, pixels });
    }
    out
}

fn non_degenerate(b: &BoxPrompt) -> bool {
    b.x_max > b.x_min && b.y_max > b.y_min
}

/// Boxes, points and a mask prompt read off a coarse saliency map `[H, W]`.
///
/// Foreground is `coarse > threshold`. Components smaller than
/// `min_area_fraction * H * W` are dropped. With nothing left the result has
/// no box and a single point at the global argmax.
pub fn derive_geometric(coarse: &Tensor, p: &GeometricParams) -> GeometricPrompts {
    assert_eq!(coarse.ndim(), 2, "coarse map must be [H, W]");
    let (h, w) = (coarse.dim(0), coarse.dim(1));
    let fg: Vec<bool> = coarse.data().iter().map(|&v| v > p.threshold).collect();
    let min_area = p.min_area_fraction * (h * w) as f64;
    let mut kept: Vec<Component> = components(&fg, h, w)
        .into_iter()
        .filter(|c| c.pixels.len() as f64 >= min_area)
        .collect();

    let mask = p.mask_size.map(|m| {
        let data = resize_bilinear_planes(coarse.data(), 1, h, w, m, m);
        Tensor::new(&[m, m], data).expect("resized plane")
    });

    if kept.is_empty() {
        let mut best = 0;
        for (i, &v) in coarse.data().iter().enumerate() {
            if v > coarse.data()[best] {
                best = i;
            }
        }
        return GeometricPrompts {
            mask,
            boxes: Vec::new(),
            points: vec![PointPrompt::foreground(best % w, best / w)],
        };
    }

    let boxes = if p.per_component_boxes {
        kept.iter().map(Component::bounds).filter(non_degenerate).collect()
    } else {
        let mut u = kept[0].bounds();
        for c in &kept[1..] {
            let b = c.bounds();
            u.x_min = u.x_min.min(b.x_min);
            u.y_min = u.y_min.min(b.y_min);
            u.x_max = u.x_max.max(b.x_max);
            u.y_max = u.y_max.max(b.y_max);
        }
        if non_degenerate(&u) {
            vec![u]
        } else {
            Vec::new()
        }
    };

    kept.sort_by(|a, b| b.pixels.len().cmp(&a.pixels.len()).then(a.label.cmp(&b.label)));
    let points = kept
        .iter()
        .take(p.max_points)
        .map(|c| {
            let (x, y) = c.anchor();
            PointPrompt::foreground(x, y)
        })
        .collect();
    GeometricPrompts { mask, boxes, points }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Tensor {
        Tensor::from_fn(&[h, w], |i| if on(i % w, i / w) { 1.0 } else { 0.0 })
    }

    #[test]
    fn rectangle_box_and_centre() {
        let m = map(16, 16, |x, y| (2..=5).contains(&y) && (3..=9).contains(&x));
        let g = derive_geometric(&m, &GeometricParams::default());
        assert_eq!(
            g.boxes,
            vec![BoxPrompt {
                x_min: 3,
                y_min: 2,
                x_max: 9,
                y_max: 5
            }]
        );
        assert_eq!(g.points, vec![PointPrompt::foreground(6, 3)]);
    }

    #[test]
    fn empty_foreground_falls_back_to_argmax() {
        let mut m = Tensor::full(&[8, 8], 0.1);
        m.data_mut()[19] = 0.4;
        let p = GeometricParams {
            mask_size: Some(16),
            ..Default::default()
        };
        let g = derive_geometric(&m, &p);
        assert!(g.boxes.is_empty());
        assert_eq!(g.points, vec![PointPrompt::foreground(3, 2)]);
        assert_eq!(g.mask.unwrap().shape(), &[16, 16]);
    }

    #[test]
    fn larger_blob_wins_the_point() {
        let m = map(20, 20, |x, y| {
            (x < 3 && y < 3) || ((10..18).contains(&x) && (12..19).contains(&y))
        });
        let g = derive_geometric(&m, &GeometricParams::default());
        assert_eq!(g.points.len(), 1);
        let pt = g.points[0];
        assert!((10..18).contains(&pt.x) && (12..19).contains(&pt.y));
        assert_eq!(
            g.boxes[0],
            BoxPrompt {
                x_min: 0,
                y_min: 0,
                x_max: 17,
                y_max: 18
            }
        );
    }

    #[test]
    fn ring_centroid_snaps_onto_the_ring() {
        let m = map(9, 9, |x, y| {
            (1..=7).contains(&x) && (1..=7).contains(&y) && (x == 1 || x == 7 || y == 1 || y == 7)
        });
        let g = derive_geometric(&m, &GeometricParams::default());
        let pt = g.points[0];
        assert!(m.data()[pt.y * 9 + pt.x] > 0.5);
        // (4,1) is the first of the four ring pixels at distance 3 from (4,4)
        assert_eq!((pt.x, pt.y), (4, 1));
    }

    #[test]
    fn tiny_components_are_dropped() {
        let m = map(40, 40, |x, y| (x == 0 && y == 0) || (x >= 20 && y >= 20));
        let p = GeometricParams {
            min_area_fraction: 0.01,
            ..Default::default()
        };
        let g = derive_geometric(&m, &p);
        assert_eq!(g.boxes[0].x_min, 20);
    }

    #[test]
    fn per_component_boxes_and_point_cap() {
        let m = map(20, 20, |x, y| (x < 3 && y < 3) || (x > 10 && y > 10));
        let p = GeometricParams {
            per_component_boxes: true,
            max_points: 5,
            ..Default::default()
        };
        let g = derive_geometric(&m, &p);
        assert_eq!(g.boxes.len(), 2);
        assert_eq!(g.points.len(), 2);
    }
}
