//! Command-line front end: `train`, `predict`, `eval`, `ablate`, `synth-data`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{AdapterVariant, FusionVariant, Modality, PromptVariant, RunConfig};
use crate::data_io::{self, Corruption, SamplePair};
use crate::error::Error;
use crate::metrics::{self, EvalResult};
use crate::model::Sammese;
use crate::params::{ParameterRegistry, Tag};
use crate::prompt_gen::GeometricPrompts;
use crate::tensor::{resize_bilinear_planes, Tensor};
use crate::training;

#[derive(Debug, Parser)]
#[command(name = "sammese", version, about = "Multi-modal salient object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a paired dataset and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Write saliency maps for image pairs with a trained checkpoint.
    Predict(PredictArgs),
    /// Score saliency maps against ground-truth masks.
    Eval(EvalArgs),
    /// Train and score a family of model variants side by side.
    Ablate(AblateArgs),
    /// Write a synthetic paired dataset.
    SynthData(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Build a named variant, e.g. `no-mcfm` or `no-semantic`.
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Stub,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoMcfm,
    ComplexMcfm,
    NoMadapter,
    NoFusion,
    AdapterFx,
    AdapterFsem,
    NoSemantic,
    NoGeometric,
}

impl Ablation {
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::NoMcfm => cfg.fusion = FusionVariant::Simple,
            Ablation::ComplexMcfm => cfg.fusion = FusionVariant::Complex,
            Ablation::NoMadapter => cfg.adapter = AdapterVariant::None,
            Ablation::NoFusion => cfg.adapter = AdapterVariant::NoFusion,
            Ablation::AdapterFx => cfg.adapter = AdapterVariant::PlainBlock,
            Ablation::AdapterFsem => cfg.adapter = AdapterVariant::PlainSemantic,
            Ablation::NoSemantic => cfg.prompts = PromptVariant::NoSemantic,
            Ablation::NoGeometric => cfg.prompts = PromptVariant::NoGeometric,
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoMcfm => "w/o MCFM",
            Ablation::ComplexMcfm => "w/ CD",
            Ablation::NoMadapter => "w/o MAdapter",
            Ablation::NoFusion => "w/o Fusion",
            Ablation::AdapterFx => "w/ Adapter_f_x",
            Ablation::AdapterFsem => "w/ Adapter_f_sem",
            Ablation::NoSemantic => "w/o Semantic",
            Ablation::NoGeometric => "w/o Geometric",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root with `RGB/`, `T/` or `Depth/`, and `GT/`; overrides `train_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `checkpoint_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root with `RGB/` and the auxiliary directory.
    #[arg(long, conflicts_with_all = ["rgb", "aux"])]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "aux")]
    pub rgb: Option<PathBuf>,
    #[arg(long, requires = "rgb")]
    pub aux: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `prompts.json` with the derived boxes and points.
    #[arg(long)]
    pub dump_prompts: bool,
    /// Also write the coarse maps under `coarse/`.
    #[arg(long)]
    pub coarse: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory for `metrics.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Prompts,
    Madapter,
    Fusion,
    Queries,
    Layers,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub which: Which,
    /// Comma-separated values for `queries` and `layers`.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    /// Training set; overrides `train_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation set; overrides `test_dir` (defaults to the training set).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Directory for `ablation.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Thermal,
    Depth,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `none`, `rgb_dark` or `aux_noisy`.
    #[arg(long, default_value = "none")]
    pub corruption: Corruption,
    #[arg(long, value_enum, default_value = "thermal")]
    pub modality: ModalityArg,
}

/// Failure of one command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SynthData(a) => cmd_synth(a),
    }
}

/// Resolve the run configuration from a file plus flag overrides.
pub fn resolve_config(a: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) if !p.is_file() => {
            return Err(CliError::Usage(format!("config file {} not found", p.display())))
        }
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.backend {
        cfg.set("backend", if b == BackendArg::Stub { "stub" } else { "pretrained" })?;
    }
    if let Some(ab) = a.ablate {
        ab.apply(&mut cfg);
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("`--set {kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn trainable_count(reg: &ParameterRegistry) -> usize {
    reg.count(Tag::Trainable)
}

fn dataset_dir(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} dataset given (flag or config)")))?;
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{what} dataset {} does not exist", dir.display())));
    }
    Ok(dir)
}

fn load_preprocessed(root: &Path, cfg: &RunConfig) -> CliResult<(Vec<SamplePair>, Vec<data_io::PreprocessedSample>)> {
    let raw = data_io::load_dataset(root, cfg.modality)?;
    if raw.is_empty() {
        return Err(CliError::Usage(format!("dataset {} is empty", root.display())));
    }
    let pre = raw
        .iter()
        .map(|s| data_io::preprocess(s, cfg))
        .collect::<crate::Result<Vec<_>>>()?;
    Ok((raw, pre))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.config)?;
    let root = dataset_dir(&a.data, &cfg.train_dir, "training")?;
    let out = a
        .out
        .or_else(|| cfg.checkpoint_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/train"));
    let (mut reg, model) = Sammese::build(&cfg)?;
    println!("learnable parameters: {}", trainable_count(&reg));
    let (_, pre) = load_preprocessed(&root, &cfg)?;
    let samples = training::prepare(&model, &reg, &pre)?;
    println!("training on {} samples from {}", samples.len(), root.display());
    write_file(&out.join("config.cfg"), &cfg.to_text())?;
    training::train(&model, &mut reg, &samples, Some(&out), |epoch, r| {
        println!(
            "epoch {epoch:>3}  bce_main {:.5}  dice_main {:.5}  bce_coarse {:.5}  dice_coarse {:.5}  total {:.5}",
            r.bce_main, r.dice_main, r.bce_coarse, r.dice_coarse, r.total
        );
    })?;
    println!("checkpoint: {}", out.join("last.ckpt").display());
    Ok(())
}

/// Resize a `[S, S]` map to `[h, w]` bilinearly.
pub fn to_native(map: &Tensor, h: usize, w: usize) -> crate::Result<Tensor> {
    let (sh, sw) = (map.dim(0), map.dim(1));
    if (sh, sw) == (h, w) {
        return Ok(map.clone());
    }
    Tensor::new(&[h, w], resize_bilinear_planes(map.data(), 1, sh, sw, h, w))
}

/// Predict every sample and score it against its ground truth at native size.
pub fn evaluate_model(model: &Sammese, reg: &ParameterRegistry, samples: &[SamplePair]) -> crate::Result<EvalResult> {
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(reg, &data_io::preprocess(s, &model.cfg)?)?;
        let (h, w) = s.size();
        per_image.push(metrics::evaluate_pair(&s.id, &to_native(&p.main, h, w)?, &s.gt));
    }
    Ok(EvalResult::from_images(per_image))
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    if !a.ckpt.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", a.ckpt.display())));
    }
    let (reg, model, _) = checkpoint::restore(&a.ckpt)?;
    println!("learnable parameters: {}", trainable_count(&reg));
    let pairs: Vec<(String, PathBuf, PathBuf)> = match (&a.input, &a.rgb, &a.aux) {
        (Some(root), _, _) => {
            if !root.is_dir() {
                return Err(CliError::Usage(format!("input {} does not exist", root.display())));
            }
            data_io::list_pairs(root, model.cfg.modality)?
        }
        (None, Some(r), Some(x)) => {
            let id = r
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("prediction")
                .to_string();
            vec![(id, r.clone(), x.clone())]
        }
        _ => return Err(CliError::Usage("give --input DIR or --rgb FILE --aux FILE".into())),
    };

    let mut prompts: BTreeMap<String, GeometricPrompts> = BTreeMap::new();
    let mut failures = 0;
    for (id, rgb, aux) in &pairs {
        let result = (|| -> crate::Result<GeometricPrompts> {
            let s = data_io::load_pair(id, rgb, aux)?;
            let p = model.predict(&reg, &data_io::preprocess(&s, &model.cfg)?)?;
            let (h, w) = s.size();
            data_io::write_mask_png(&a.out.join(format!("{id}.png")), &to_native(&p.main, h, w)?)?;
            if a.coarse {
                data_io::write_mask_png(&a.out.join("coarse").join(format!("{id}.png")), &to_native(&p.coarse, h, w)?)?;
            }
            Ok(p.prompts)
        })();
        match result {
            Ok(p) => {
                prompts.insert(id.clone(), p);
            }
            Err(e) => {
                eprintln!("{id}: {e}");
                failures += 1;
            }
        }
    }
    if a.dump_prompts {
        let json = serde_json::to_string_pretty(&prompts).map_err(Error::from)?;
        write_file(&a.out.join("prompts.json"), &json)?;
    }
    println!("wrote {} of {} maps to {}", pairs.len() - failures, pairs.len(), a.out.display());
    if failures > 0 {
        return Err(CliError::Runtime(Error::Dataset(format!("{failures} input(s) failed"))));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    for (dir, what) in [(&a.pred, "prediction"), (&a.gt, "ground-truth")] {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{what} directory {} does not exist", dir.display())));
        }
    }
    let r = metrics::evaluate_dataset(&a.pred, &a.gt)?;
    println!("{}", EvalResult::table_header());
    println!("{}", r.table_row(&format!("{} images", r.per_image.len())));
    let empty = r.per_image.iter().filter(|m| m.empty_gt).count();
    if empty > 0 {
        println!("note: {empty} ground truth mask(s) had no foreground; their F-measure is 0");
    }
    if let Some(out) = a.out {
        write_file(&out.join("metrics.csv"), &r.to_csv())?;
    }
    Ok(())
}

/// Labelled configurations for one ablation family.
pub fn ablation_variants(base: &RunConfig, which: Which, values: &[usize]) -> CliResult<Vec<(String, RunConfig)>> {
    let with = |ab: Ablation| {
        let mut c = base.clone();
        ab.apply(&mut c);
        (ab.label().to_string(), c)
    };
    let full = ("full".to_string(), base.clone());
    let sweep = |key: &str, default: &[usize]| -> CliResult<Vec<(String, RunConfig)>> {
        let vals = if values.is_empty() { default } else { values };
        vals.iter()
            .map(|v| {
                let mut c = base.clone();
                c.set(key, &v.to_string())?;
                c.validate()?;
                Ok((format!("{key} = {v}"), c))
            })
            .collect()
    };
    Ok(match which {
        Which::Prompts => vec![full, with(Ablation::NoSemantic), with(Ablation::NoGeometric)],
        Which::Madapter => vec![
            full,
            with(Ablation::NoFusion),
            with(Ablation::AdapterFx),
            with(Ablation::AdapterFsem),
        ],
        Which::Fusion => vec![full, with(Ablation::NoMcfm), with(Ablation::ComplexMcfm)],
        Which::Queries => sweep("num_queries", &[1, 10, 30, 50])?,
        Which::Layers => sweep("mcfm_level", &[1, 2, 3, 4])?,
    })
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let base = resolve_config(&a.config)?;
    let train_root = dataset_dir(&a.data, &base.train_dir, "training")?;
    let test_root = match (&a.test, &base.test_dir) {
        (None, None) => train_root.clone(),
        (flag, cfg) => dataset_dir(flag, cfg, "test")?,
    };
    let variants = ablation_variants(&base, a.which, &a.values)?;
    let (_, train_pre) = load_preprocessed(&train_root, &base)?;
    let test_raw = data_io::load_dataset(&test_root, base.modality)?;

    let mut table = format!("{:<24} {:>10} {}\n", "variant", "params", &EvalResult::table_header()[25..]);
    let mut csv = String::from("variant,params,s_measure,e_measure_max,f_beta_max,mae\n");
    println!("{}", table.trim_end());
    for (label, cfg) in variants {
        let (mut reg, model) = Sammese::build(&cfg)?;
        let params = trainable_count(&reg);
        let samples = training::prepare(&model, &reg, &train_pre)?;
        training::train(&model, &mut reg, &samples, None, |_, _| {})?;
        let r = evaluate_model(&model, &reg, &test_raw)?;
        let row = r.table_row(&label);
        let line = format!("{:<24} {:>10} {}", label, params, &row[25..]);
        println!("{line}");
        let _ = writeln!(table, "{line}");
        let _ = writeln!(
            csv,
            "{label},{params},{:.6},{:.6},{:.6},{:.6}",
            r.s_measure, r.e_measure_max, r.f_beta_max, r.mae
        );
    }
    if let Some(out) = a.out {
        write_file(&out.join("ablation.csv"), &csv)?;
        write_file(&out.join("ablation.txt"), &table)?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    if a.n == 0 || a.size < 8 {
        return Err(CliError::Usage("need --n >= 1 and --size >= 8".into()));
    }
    let modality = match a.modality {
        ModalityArg::Thermal => Modality::Thermal,
        ModalityArg::Depth => Modality::Depth,
    };
    let samples = data_io::make_synthetic_dataset(a.n, a.size, a.seed, a.corruption);
    data_io::save_dataset(&a.out, &samples, modality)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}
