//! Paired dataset loading, preprocessing to the two working resolutions,
//! synthetic data and PNG mask I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Modality, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear_planes, resize_nearest_plane, Tensor};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// One aligned RGB / auxiliary / ground-truth triple at its native size.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[3, H, W]` in `[0, 1]`; single-channel sources are replicated.
    pub aux: Tensor,
    /// `[H, W]` with values in `{0, 1}`.
    pub gt: Tensor,
}

impl SamplePair {
    pub fn size(&self) -> (usize, usize) {
        (self.gt.dim(0), self.gt.dim(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub rgb_mean: [f64; 3],
    pub rgb_std: [f64; 3],
    pub aux_mean: [f64; 3],
    pub aux_std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedSample {
    pub id: String,
    pub rgb_large: Tensor,
    pub rgb_small: Tensor,
    pub aux_small: Tensor,
    pub gt_large: Tensor,
    pub norm: Normalization,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `[3, H, W]` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            d[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Single-channel image as `[H, W]` in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Tensor::new(&[h, w], data)
}

fn replicate3(plane: &Tensor) -> Result<Tensor> {
    Tensor::concat(&[plane, plane, plane], 0)?.into_reshape(&[3, plane.dim(0), plane.dim(1)])
}

/// Every matched triple under `root/RGB`, `root/{T|Depth}` and `root/GT`,
/// sorted by id.
pub fn load_dataset(root: &Path, modality: Modality) -> Result<Vec<SamplePair>> {
    let aux_dir = modality.dir_name();
    let rgb = list_images(&root.join("RGB"))?;
    let aux = list_images(&root.join(aux_dir))?;
    let gt = list_images(&root.join("GT"))?;
    for (id, _) in aux.iter().chain(gt.iter()) {
        if !rgb.contains_key(id) {
            return Err(Error::Orphan {
                id: id.clone(),
                missing: "RGB/".into(),
            });
        }
    }
    let mut out = Vec::with_capacity(rgb.len());
    for (id, rgb_path) in &rgb {
        let orphan = |missing: &str| Error::Orphan {
            id: id.clone(),
            missing: format!("{missing}/"),
        };
        let aux_path = aux.get(id).ok_or_else(|| orphan(aux_dir))?;
        let gt_path = gt.get(id).ok_or_else(|| orphan("GT"))?;
        let rgb_t = read_rgb(rgb_path)?;
        let aux_t = replicate3(&read_gray(aux_path)?)?;
        let gt_t = read_gray(gt_path)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let size = (gt_t.dim(0), gt_t.dim(1));
        for (name, t) in [("RGB", &rgb_t), (aux_dir, &aux_t)] {
            if (t.dim(1), t.dim(2)) != size {
                return Err(Error::Dataset(format!(
                    "sample `{id}`: {name} is {}x{}, GT is {}x{}",
                    t.dim(2),
                    t.dim(1),
                    size.1,
                    size.0
                )));
            }
        }
        out.push(SamplePair {
            id: id.clone(),
            rgb: rgb_t,
            aux: aux_t,
            gt: gt_t,
        });
    }
    Ok(out)
}

/// Matched RGB / auxiliary paths under `root`, sorted by id. Ground truth is
/// not required.
pub fn list_pairs(root: &Path, modality: Modality) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let aux_dir = modality.dir_name();
    let rgb = list_images(&root.join("RGB"))?;
    let aux = list_images(&root.join(aux_dir))?;
    if let Some(id) = aux.keys().find(|id| !rgb.contains_key(*id)) {
        return Err(Error::Orphan {
            id: id.clone(),
            missing: "RGB/".into(),
        });
    }
    rgb.into_iter()
        .map(|(id, r)| match aux.get(&id) {
            Some(a) => Ok((id, r, a.clone())),
            None => Err(Error::Orphan {
                id,
                missing: format!("{aux_dir}/"),
            }),
        })
        .collect()
}

/// An unlabelled pair; the ground truth is all zeros.
pub fn load_pair(id: &str, rgb_path: &Path, aux_path: &Path) -> Result<SamplePair> {
    let rgb = read_rgb(rgb_path)?;
    let aux = replicate3(&read_gray(aux_path)?)?;
    if rgb.shape() != aux.shape() {
        return Err(Error::Dataset(format!(
            "sample `{id}`: RGB is {}x{}, auxiliary is {}x{}",
            rgb.dim(2),
            rgb.dim(1),
            aux.dim(2),
            aux.dim(1)
        )));
    }
    let gt = Tensor::zeros(&[rgb.dim(1), rgb.dim(2)]);
    Ok(SamplePair {
        id: id.to_string(),
        rgb,
        aux,
        gt,
    })
}

fn resize_normalize(img: &Tensor, size: usize, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    let (h, w) = (img.dim(1), img.dim(2));
    let mut data = resize_bilinear_planes(img.data(), 3, h, w, size, size);
    for (c, plane) in data.chunks_mut(size * size).enumerate() {
        for v in plane {
            *v = (*v - mean[c]) / std[c];
        }
    }
    Tensor::new(&[3, size, size], data)
}

/// Bilinear resize of both images, nearest-neighbour resize of the ground
/// truth, then per-channel normalisation.
pub fn preprocess(s: &SamplePair, cfg: &RunConfig) -> Result<PreprocessedSample> {
    for (name, t) in [("rgb", &s.rgb), ("aux", &s.aux), ("gt", &s.gt)] {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("sample `{}` {name}", s.id)));
        }
    }
    let norm = Normalization {
        rgb_mean: cfg.norm_mean,
        rgb_std: cfg.norm_std,
        aux_mean: cfg.aux_norm_mean,
        aux_std: cfg.aux_norm_std,
    };
    let (h, w) = s.size();
    let big = cfg.large_size;
    let gt = resize_nearest_plane(s.gt.data(), h, w, big, big);
    Ok(PreprocessedSample {
        id: s.id.clone(),
        rgb_large: resize_normalize(&s.rgb, big, &norm.rgb_mean, &norm.rgb_std)?,
        rgb_small: resize_normalize(&s.rgb, cfg.small_size, &norm.rgb_mean, &norm.rgb_std)?,
        aux_small: resize_normalize(&s.aux, cfg.small_size, &norm.aux_mean, &norm.aux_std)?,
        gt_large: Tensor::new(&[big, big], gt)?,
        norm,
    })
}

/// Modality-specific degradation applied by the synthetic generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Corruption {
    #[default]
    None,
    /// Low illumination: the RGB image is scaled towards black.
    RgbDark,
    /// A low-quality auxiliary image: strong additive noise.
    AuxNoisy,
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Corruption::None),
            "rgb_dark" => Ok(Corruption::RgbDark),
            "aux_noisy" => Ok(Corruption::AuxNoisy),
            _ => Err(Error::Config(format!(
                "unknown corruption `{s}` (none, rgb_dark, aux_noisy)"
            ))),
        }
    }
}

/// `n` random ellipses and rectangles rendered into matching RGB, auxiliary
/// and ground-truth images. A pure function of its arguments.
pub fn make_synthetic_dataset(n: usize, size: usize, seed: u64, corruption: Corruption) -> Vec<SamplePair> {
    assert!(n >= 1 && size >= 32, "need n >= 1 and size >= 32");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = size as f64;
            let cx = rng.gen_range(0.35..0.65) * s;
            let cy = rng.gen_range(0.35..0.65) * s;
            let rx = rng.gen_range(0.18..0.3) * s;
            let ry = rng.gen_range(0.18..0.3) * s;
            let ellipse = rng.gen_bool(0.5);
            let inside = |x: usize, y: usize| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                }
            };
            let bg: [f64; 3] = [rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)];
            let fg: [f64; 3] = [rng.gen_range(0.5..0.95), rng.gen_range(0.5..0.95), rng.gen_range(0.5..0.95)];
            let aux_bg: f64 = rng.gen_range(0.05..0.3);
            let aux_fg: f64 = rng.gen_range(0.7..0.95);
            let noise = match corruption {
                Corruption::AuxNoisy => 0.35,
                _ => 0.03,
            };
            let dark = if corruption == Corruption::RgbDark { 0.15 } else { 1.0 };

            let mut gt = Tensor::zeros(&[size, size]);
            let mut rgb = Tensor::zeros(&[3, size, size]);
            let mut aux = Tensor::zeros(&[3, size, size]);
            for y in 0..size {
                for x in 0..size {
                    let on = inside(x, y);
                    let p = y * size + x;
                    gt.data_mut()[p] = on as u8 as f64;
                    for c in 0..3 {
                        let base = if on { fg[c] } else { bg[c] };
                        let v = (base + rng.gen_range(-0.03..0.03)) * dark;
                        rgb.data_mut()[c * size * size + p] = v.clamp(0.0, 1.0);
                    }
                    let a = if on { aux_fg } else { aux_bg } + rng.gen_range(-noise..noise);
                    let a = a.clamp(0.0, 1.0);
                    for c in 0..3 {
                        aux.data_mut()[c * size * size + p] = a;
                    }
                }
            }
            SamplePair {
                id: format!("syn_{i:04}"),
                rgb,
                aux,
                gt,
            }
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_image<I: Into<image::DynamicImage>>(img: I, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.into()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// `[H, W]` map in `[0, 1]` as 8-bit grayscale PNG.
pub fn write_mask_png(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = (map.dim(0), map.dim(1));
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(map.data()[y as usize * w + x as usize])])
    });
    save_image(img, path)
}

fn write_rgb_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = (t.dim(1), t.dim(2));
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    });
    save_image(img, path)
}

/// Write samples in the `RGB/ {T|Depth}/ GT/` layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, samples: &[SamplePair], modality: Modality) -> Result<()> {
    for s in samples {
        let name = format!("{}.png", s.id);
        write_rgb_png(&root.join("RGB").join(&name), &s.rgb)?;
        let aux = s.aux.narrow(0, 0, 1).into_reshape(&[s.aux.dim(1), s.aux.dim(2)])?;
        write_mask_png(&root.join(modality.dir_name()).join(&name), &aux)?;
        write_mask_png(&root.join("GT").join(&name), &s.gt)?;
    }
    Ok(())
}
