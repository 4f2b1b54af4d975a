//! Real-weights backend: overwrite the frozen registry entries from a
//! safetensors file through a name-mapping table.
//!
//! Source names follow the released segmenter's layout (`image_encoder.*`,
//! `prompt_encoder.*`, `mask_decoder.*`); the semantic encoder is read under
//! its registry names. Torch linears are stored `[out, in]`, ours `[in, out]`,
//! so most entries carry a transform.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use super::{FoundationDims, IMAGE_ENCODER, MASK_DECODER, PROMPT_ENCODER, SEMANTIC_ENCODER};
use crate::error::{Error, Result};
use crate::params::{ParameterRegistry, Tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Flatten trailing axes to a matrix and transpose it.
    Transpose,
    /// Take rows `[part * len, (part + 1) * len)` of a fused projection, then transpose.
    SplitTranspose { part: usize, parts: usize },
    /// Take the `part`-th of `parts` equal chunks of a fused bias.
    Split { part: usize, parts: usize },
    /// Repeat every element `n` times (transposed-conv bias to per-pixel linear bias).
    RepeatEach(usize),
    /// Keep only the first row.
    FirstRow,
}

#[derive(Clone, Debug)]
pub struct Mapping {
    pub source: String,
    pub target: String,
    pub transform: Transform,
}

fn m(source: String, target: String, transform: Transform) -> Mapping {
    Mapping {
        source,
        target,
        transform,
    }
}

fn linear_pair(out: &mut Vec<Mapping>, src: &str, dst: &str) {
    out.push(m(format!("{src}.weight"), format!("{dst}.weight"), Transform::Transpose));
    out.push(m(format!("{src}.bias"), format!("{dst}.bias"), Transform::Identity));
}

fn same_pair(out: &mut Vec<Mapping>, src: &str, dst: &str) {
    out.push(m(format!("{src}.weight"), format!("{dst}.weight"), Transform::Identity));
    out.push(m(format!("{src}.bias"), format!("{dst}.bias"), Transform::Identity));
}

fn attention(out: &mut Vec<Mapping>, src: &str, dst: &str) {
    for (s, t) in [("q_proj", "q"), ("k_proj", "k"), ("v_proj", "v"), ("out_proj", "out")] {
        linear_pair(out, &format!("{src}.{s}"), &format!("{dst}.{t}"));
    }
}

/// The full source-to-registry table for the given dimensions.
pub fn mapping_table(d: &FoundationDims) -> Vec<Mapping> {
    let mut t = Vec::new();
    same_pair(&mut t, "image_encoder.patch_embed.proj", &format!("{IMAGE_ENCODER}.patch_embed"));
    for i in 0..d.blocks {
        let s = format!("image_encoder.blocks.{i}");
        let p = format!("{IMAGE_ENCODER}.block{i}");
        same_pair(&mut t, &format!("{s}.norm1"), &format!("{p}.norm1"));
        same_pair(&mut t, &format!("{s}.norm2"), &format!("{p}.norm2"));
        for (part, name) in ["q", "k", "v"].iter().enumerate() {
            t.push(m(
                format!("{s}.attn.qkv.weight"),
                format!("{p}.attn.{name}.weight"),
                Transform::SplitTranspose { part, parts: 3 },
            ));
            t.push(m(
                format!("{s}.attn.qkv.bias"),
                format!("{p}.attn.{name}.bias"),
                Transform::Split { part, parts: 3 },
            ));
        }
        linear_pair(&mut t, &format!("{s}.attn.proj"), &format!("{p}.attn.out"));
        linear_pair(&mut t, &format!("{s}.mlp.lin1"), &format!("{p}.mlp.fc1"));
        linear_pair(&mut t, &format!("{s}.mlp.lin2"), &format!("{p}.mlp.fc2"));
    }
    linear_pair(&mut t, "image_encoder.neck.0", &format!("{IMAGE_ENCODER}.neck.proj"));
    same_pair(&mut t, "image_encoder.neck.1", &format!("{IMAGE_ENCODER}.neck.norm"));

    let pe = PROMPT_ENCODER;
    t.push(m(
        "prompt_encoder.pe_layer.positional_encoding_gaussian_matrix".into(),
        format!("{pe}.pe_gaussian"),
        Transform::Identity,
    ));
    for (idx, name) in [(1, "point_fg"), (2, "box_tl"), (3, "box_br")] {
        t.push(m(
            format!("prompt_encoder.point_embeddings.{idx}.weight"),
            format!("{pe}.{name}"),
            Transform::FirstRow,
        ));
    }
    t.push(m(
        "prompt_encoder.no_mask_embed.weight".into(),
        format!("{pe}.no_mask"),
        Transform::FirstRow,
    ));
    for (idx, name) in [(0, "conv1"), (1, "norm1"), (3, "conv2"), (4, "norm2"), (6, "conv3")] {
        same_pair(
            &mut t,
            &format!("prompt_encoder.mask_downscaling.{idx}"),
            &format!("{pe}.mask_downscale.{name}"),
        );
    }

    let md = MASK_DECODER;
    t.push(m("mask_decoder.mask_tokens.weight".into(), format!("{md}.mask_token"), Transform::FirstRow));
    for r in 0..d.decoder_rounds {
        let s = format!("mask_decoder.transformer.layers.{r}");
        let p = format!("{md}.round{r}");
        attention(&mut t, &format!("{s}.self_attn"), &format!("{p}.self_attn"));
        attention(&mut t, &format!("{s}.cross_attn_token_to_image"), &format!("{p}.token_to_image"));
        attention(&mut t, &format!("{s}.cross_attn_image_to_token"), &format!("{p}.image_to_token"));
        linear_pair(&mut t, &format!("{s}.mlp.lin1"), &format!("{p}.mlp.fc1"));
        linear_pair(&mut t, &format!("{s}.mlp.lin2"), &format!("{p}.mlp.fc2"));
        for n in 1..=4 {
            same_pair(&mut t, &format!("{s}.norm{n}"), &format!("{p}.norm{n}"));
        }
    }
    attention(
        &mut t,
        "mask_decoder.transformer.final_attn_token_to_image",
        &format!("{md}.final_attn"),
    );
    same_pair(&mut t, "mask_decoder.transformer.norm_final_attn", &format!("{md}.final_norm"));
    for (idx, name) in [(0, "upscale1"), (3, "upscale2")] {
        t.push(m(
            format!("mask_decoder.output_upscaling.{idx}.weight"),
            format!("{md}.{name}.weight"),
            Transform::Identity,
        ));
        t.push(m(
            format!("mask_decoder.output_upscaling.{idx}.bias"),
            format!("{md}.{name}.bias"),
            Transform::RepeatEach(4),
        ));
    }
    same_pair(&mut t, "mask_decoder.output_upscaling.1", &format!("{md}.upscale_norm"));
    for (idx, name) in [(0, "fc1"), (1, "fc2"), (2, "fc3")] {
        linear_pair(
            &mut t,
            &format!("mask_decoder.output_hypernetworks_mlps.0.layers.{idx}"),
            &format!("{md}.hyper.{name}"),
        );
    }
    t
}

fn apply(transform: &Transform, src: &Tensor, target_shape: &[usize]) -> Result<Tensor> {
    let matrix = |t: &Tensor| -> (usize, usize) {
        let rows = t.dim(0);
        (rows, t.numel() / rows.max(1))
    };
    let out = match transform {
        Transform::Identity => src.clone(),
        Transform::Transpose => {
            let (r, c) = matrix(src);
            src.reshape(&[r, c])?.permute(&[1, 0])
        }
        Transform::SplitTranspose { part, parts } => {
            let (r, c) = matrix(src);
            let len = r / parts;
            src.reshape(&[r, c])?.narrow(0, part * len, len).permute(&[1, 0])
        }
        Transform::Split { part, parts } => {
            let len = src.numel() / parts;
            Tensor::new(&[len], src.data()[part * len..(part + 1) * len].to_vec())?
        }
        Transform::RepeatEach(n) => {
            let data = src.data().iter().flat_map(|&v| std::iter::repeat_n(v, *n)).collect();
            Tensor::new(&[src.numel() * n], data)?
        }
        Transform::FirstRow => {
            let (_, c) = matrix(src);
            Tensor::new(&[c], src.data()[..c].to_vec())?
        }
    };
    let n: usize = target_shape.iter().product();
    if out.numel() != n {
        return Err(Error::shape(format!(
            "mapped tensor has {} elements, target {:?} needs {n}",
            out.numel(),
            target_shape
        )));
    }
    out.into_reshape(target_shape)
}

fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f64> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "{name}: unsupported dtype {other:?} (expected F32 or F64)"
                )))
            }
        };
        out.insert(name, Tensor::new(view.shape(), data)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    /// Source tensors with no mapping entry.
    pub unused: Vec<String>,
}

/// Overwrite every frozen entry from `path`; fails if any frozen entry has no source.
pub fn load_into(reg: &mut ParameterRegistry, d: &FoundationDims, path: &Path) -> Result<LoadReport> {
    let source = read_tensors(path)?;
    let mut mapped: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut used = std::collections::BTreeSet::new();
    for entry in mapping_table(d) {
        let Some(src) = source.get(&entry.source) else { continue };
        let target = reg
            .get(&entry.target)
            .ok_or_else(|| Error::Checkpoint(format!("mapping targets unknown `{}`", entry.target)))?;
        let shape = target.value.shape().to_vec();
        let value = apply(&entry.transform, src, &shape)
            .map_err(|e| Error::Checkpoint(format!("{} -> {}: {e}", entry.source, entry.target)))?;
        mapped.insert(entry.target, value);
        used.insert(entry.source);
    }
    // the semantic encoder is stored under registry names
    for (name, t) in &source {
        if name.starts_with(SEMANTIC_ENCODER) {
            mapped.insert(name.clone(), t.clone());
            used.insert(name.clone());
        }
    }
    let missing: Vec<String> = reg
        .names_with(Tag::Frozen)
        .filter(|n| !mapped.contains_key(*n))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: {} frozen parameters have no source, first: {}",
            path.display(),
            missing.len(),
            missing[0]
        )));
    }
    let loaded = mapped.len();
    for (name, value) in mapped {
        reg.set(&name, value)?;
    }
    Ok(LoadReport {
        loaded,
        unused: source.keys().filter(|k| !used.contains(*k)).cloned().collect(),
    })
}

/// Write the frozen entries of `reg` under their source names, inverting the
/// table. Used to produce weight files for this backend and in tests.
pub fn export_frozen(reg: &ParameterRegistry, d: &FoundationDims, path: &Path) -> Result<()> {
    let mut fused: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for entry in mapping_table(d) {
        let t = reg.tensor(&entry.target)?;
        let (shape, data): (Vec<usize>, Vec<f64>) = match &entry.transform {
            Transform::Identity => (t.shape().to_vec(), t.data().to_vec()),
            Transform::Transpose => {
                let back = t.permute(&[1, 0]);
                (back.shape().to_vec(), back.into_data())
            }
            Transform::SplitTranspose { part, parts } => {
                let back = t.permute(&[1, 0]);
                let (r, c) = (back.dim(0), back.dim(1));
                let slot = fused
                    .entry(entry.source.clone())
                    .or_insert_with(|| (vec![r * parts, c], vec![0.0; r * parts * c]));
                slot.1[part * r * c..(part + 1) * r * c].copy_from_slice(back.data());
                continue;
            }
            Transform::Split { part, parts } => {
                let n = t.numel();
                let slot = fused
                    .entry(entry.source.clone())
                    .or_insert_with(|| (vec![n * parts], vec![0.0; n * parts]));
                slot.1[part * n..(part + 1) * n].copy_from_slice(t.data());
                continue;
            }
            Transform::RepeatEach(n) => (
                vec![t.numel() / n],
                t.data().iter().step_by(*n).copied().collect(),
            ),
            Transform::FirstRow => (vec![1, t.numel()], t.data().to_vec()),
        };
        fused.insert(entry.source, (shape, data));
    }
    for e in reg.entries() {
        if e.name.starts_with(SEMANTIC_ENCODER) {
            fused.insert(e.name.clone(), (e.value.shape().to_vec(), e.value.data().to_vec()));
        }
    }
    let bytes: BTreeMap<String, (Vec<usize>, Vec<u8>)> = fused
        .into_iter()
        .map(|(k, (s, d))| (k, (s, d.iter().flat_map(|v| v.to_le_bytes()).collect())))
        .collect();
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = bytes
        .iter()
        .map(|(k, (s, d))| {
            safetensors::tensor::TensorView::new(Dtype::F64, s.clone(), d)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(views, &None, path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
