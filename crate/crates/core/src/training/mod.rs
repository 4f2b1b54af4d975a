//! Dual-supervised training: BCE + Dice on the decoder output and on the
//! coarse map, AdamW on the trainable set only.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{bce_loss, dice_loss, BCE_EPS, DICE_SMOOTH};
pub use optim::AdamW;

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data_io::PreprocessedSample;
use crate::error::{Error, Result};
use crate::model::{Sammese, SemanticFeatures};
use crate::params::{BindMode, ParameterRegistry};
use crate::tensor::{resize_nearest_plane, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub bce_main: f64,
    pub dice_main: f64,
    pub bce_coarse: f64,
    pub dice_coarse: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,step,bce_main,dice_main,bce_coarse,dice_coarse,total";

    fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("bce_main", self.bce_main),
            ("dice_main", self.dice_main),
            ("bce_coarse", self.bce_coarse),
            ("dice_coarse", self.dice_coarse),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.bce_main, self.dice_main, self.bce_coarse, self.dice_coarse, self.total
        )
    }
}

/// Graph nodes of the four loss terms and their weighted sum.
pub struct LossTerms {
    pub bce_main: Var,
    pub dice_main: Var,
    pub bce_coarse: Var,
    pub dice_coarse: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Var| g.value(x).item();
        LossReport {
            bce_main: v(self.bce_main),
            dice_main: v(self.dice_main),
            bce_coarse: v(self.bce_coarse),
            dice_coarse: v(self.dice_coarse),
            total: v(self.total),
        }
    }
}

/// `[BCE + Dice](main, G) + [BCE + Dice](coarse, G)` with the configured
/// weights (all one by default).
pub fn total_loss(g: &Graph, cfg: &RunConfig, main: Var, coarse: Var, gt: Var) -> Result<LossTerms> {
    let bce_main = bce_loss(g, main, gt, cfg.bce_eps)?;
    let dice_main = dice_loss(g, main, gt, cfg.dice_smooth)?;
    let bce_coarse = bce_loss(g, coarse, gt, cfg.bce_eps)?;
    let dice_coarse = dice_loss(g, coarse, gt, cfg.dice_smooth)?;
    let pair = |b: Var, d: Var, w: f64| -> Result<Var> {
        let s = g.add(g.scale(b, cfg.bce_weight), g.scale(d, cfg.dice_weight))?;
        Ok(g.scale(s, w))
    };
    let total = g.add(
        pair(bce_main, dice_main, cfg.main_weight)?,
        pair(bce_coarse, dice_coarse, cfg.coarse_weight)?,
    )?;
    Ok(LossTerms {
        bce_main,
        dice_main,
        bce_coarse,
        dice_coarse,
        total,
    })
}

/// A preprocessed sample with its frozen pyramid features cached.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub rgb_large: Tensor,
    pub feats: SemanticFeatures,
    /// Ground truth at the prediction resolution.
    pub gt: Tensor,
}

pub fn prepare(model: &Sammese, reg: &ParameterRegistry, samples: &[PreprocessedSample]) -> Result<Vec<TrainSample>> {
    let size = model.cfg.large_size;
    samples
        .iter()
        .map(|s| {
            let (h, w) = (s.gt_large.dim(0), s.gt_large.dim(1));
            let gt = if (h, w) == (size, size) {
                s.gt_large.clone()
            } else {
                Tensor::new(&[size, size], resize_nearest_plane(s.gt_large.data(), h, w, size, size))?
            };
            Ok(TrainSample {
                id: s.id.clone(),
                rgb_large: s.rgb_large.clone(),
                feats: model.semantic_features(reg, &s.rgb_small, &s.aux_small)?,
                gt,
            })
        })
        .collect()
}

/// Loss of one batch, with gradients applied when `opt` is given.
pub fn step(
    model: &Sammese,
    reg: &mut ParameterRegistry,
    batch: &[&TrainSample],
    opt: Option<&mut AdamW>,
) -> Result<LossReport> {
    let g = Graph::new();
    let (report, grads) = {
        let mode = if opt.is_some() { BindMode::Train } else { BindMode::Inference };
        let b = reg.bind(&g, mode);
        let imgs: Vec<&Tensor> = batch.iter().map(|s| &s.rgb_large).collect();
        let feats: Vec<&SemanticFeatures> = batch.iter().map(|s| &s.feats).collect();
        let out = model.forward(&b, &imgs, &feats)?;
        let size = model.cfg.large_size;
        let gts: Vec<Tensor> = batch
            .iter()
            .map(|s| s.gt.reshape(&[1, size, size]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = gts.iter().collect();
        let gt = g.constant(Tensor::concat(&refs, 0)?);
        let terms = total_loss(&g, &model.cfg, out.main, out.coarse, gt)?;
        let report = terms.report(&g);
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite(format!("loss term `{term}`")));
        }
        let grads = if opt.is_some() {
            Some(b.gradients(&g.backward(terms.total)))
        } else {
            None
        };
        (report, grads)
    };
    if let (Some(opt), Some(grads)) = (opt, grads) {
        opt.step(reg, &grads)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// `(epoch, global step, report)` for every optimisation step.
    pub steps: Vec<(usize, usize, LossReport)>,
    /// Mean report per finished epoch.
    pub epochs: Vec<LossReport>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for (e, st, r) in &self.steps {
            let _ = writeln!(s, "{}", r.csv_row(*e, *st));
        }
        s
    }
}

fn mean_report(rs: &[LossReport]) -> LossReport {
    let n = rs.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in rs {
        m.bce_main += r.bce_main / n;
        m.dice_main += r.dice_main / n;
        m.bce_coarse += r.bce_coarse / n;
        m.dice_coarse += r.dice_coarse / n;
        m.total += r.total / n;
    }
    m
}

/// Train for `cfg.epochs` epochs (or until `cfg.max_steps` steps when set).
///
/// Sample order is shuffled by a generator seeded from `cfg.seed`. When
/// `out_dir` is given, `epoch_NNN.ckpt`, `last.ckpt` and `train_log.csv` are
/// written after every epoch. `on_epoch` sees each epoch's mean report.
pub fn train(
    model: &Sammese,
    reg: &mut ParameterRegistry,
    data: &[TrainSample],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<TrainLog> {
    let cfg = &model.cfg;
    if data.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let mut opt = AdamW::from_config(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0fda_7a5e_7000);
    let mut log = TrainLog::default();
    let mut global = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_reports = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && global >= cfg.max_steps {
                break;
            }
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let r = step(model, reg, &batch, Some(&mut opt))
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, step {global}")),
                    other => other,
                })?;
            log.steps.push((epoch, global, r));
            epoch_reports.push(r);
            global += 1;
        }
        if epoch_reports.is_empty() {
            break;
        }
        let mean = mean_report(&epoch_reports);
        log.epochs.push(mean);
        on_epoch(epoch, &mean);
        if let Some(dir) = out_dir {
            checkpoint::save(&dir.join(format!("epoch_{epoch:03}.ckpt")), reg, cfg, epoch)?;
            checkpoint::save(&dir.join("last.ckpt"), reg, cfg, epoch)?;
            let p = dir.join("train_log.csv");
            std::fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        if cfg.max_steps > 0 && global >= cfg.max_steps {
            break 'epochs;
        }
    }
    Ok(log)
}
