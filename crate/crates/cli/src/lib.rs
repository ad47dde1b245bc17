//! Subcommands of the `pointadapt` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pointadapt::datakit::{
    generate_synthetic, load_dataset, read_annotations, write_annotations, AnnotationRecord, Checkpoint,
    InstanceAnnotation, SceneSpec, Split, WriteOutcome,
};
use pointadapt::maskops::{enclosing_box, leakage_rate, overlap_map, refine, refine_stack, BinaryMaskSet};
use pointadapt::pipeline::{direct_test, evaluate, evaluate_with, predict_points, pretrain, train, Variant};
use pointadapt::{Error, Grid, ProbMaskStack, Result, Segmenter};

use config::RunConfigFile;

#[derive(Debug, Parser)]
#[command(
    name = "pointadapt",
    version,
    about = "Point-supervised adaptation of a promptable segmenter"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenerateData(GenerateArgs),
    /// Train a base model with full supervision on source-style scenes.
    Pretrain(RunArgs),
    /// Adapt a base model with point supervision.
    Train(TrainArgs),
    /// Point-prompted evaluation on the test split.
    Eval(EvalArgs),
    /// Mean overlap between predicted instances.
    Leakage(LeakageArgs),
    /// Apply the confidence gate and overlap removal to stored predictions.
    Refine(RefineArgs),
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub n_points: Option<u8>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

impl RunArgs {
    /// The configuration file with command-line overrides applied.
    fn resolve(&self) -> Result<RunConfigFile> {
        let mut c = RunConfigFile::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.run.seed = s;
        }
        if let Some(n) = self.n_points {
            c.run.n_points = n as usize;
        }
        if let Some(v) = self.variant {
            c.run.variant = v;
        }
        if let Some(o) = &self.out {
            c.data.out = o.display().to_string();
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "synthetic", value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u16).range(16..=1024))]
    pub size: u16,
    /// Use the source style (vivid colours, light texture).
    #[arg(long)]
    pub source: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Overrides `data.dataset`.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Overrides `data.base`.
    #[arg(long, value_name = "PATH")]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Adapter checkpoint; the unadapted base is evaluated without one.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub gt_as_prediction: bool,
}

#[derive(Debug, Args)]
pub struct LeakageArgs {
    /// Prediction annotations (jsonl).
    #[arg(long, value_name = "PATH")]
    pub predictions: PathBuf,
    /// Number of prompt points the predictions were made with.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub n_points: u8,
    /// Row label; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f64,
    /// Refine binary masks with overlap removal only.
    #[arg(long)]
    pub skip_gate: bool,
}

/// Exit code for a failure: 2 usage or validation, 3 data or compatibility,
/// 4 internal.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) => 2,
        Error::InputDomain(_)
        | Error::Corruption { .. }
        | Error::Compatibility(_)
        | Error::Parse { .. }
        | Error::Io { .. } => 3,
        Error::Structural(_) => 4,
    }
}

/// Runs one command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match &cli.command {
        Command::GenerateData(a) => generate(a, out),
        Command::Pretrain(a) => cmd_pretrain(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Leakage(a) => cmd_leakage(a, out),
        Command::Refine(a) => cmd_refine(a, out),
    }
}

fn emit(out: &mut dyn std::io::Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn generate(a: &GenerateArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let base = if a.source {
        SceneSpec::source(a.seed)
    } else {
        SceneSpec {
            seed: a.seed,
            ..SceneSpec::default()
        }
    };
    let spec = SceneSpec {
        height: a.size as usize,
        width: a.size as usize,
        ..base
    };
    if a.train + a.test == 0 {
        return Err(Error::Validation(vec!["--train and --test cannot both be zero".into()]));
    }
    let (_, outcome) = generate_synthetic(&spec, a.train, a.test, &a.out)?;
    let manifest = a.out.join(pointadapt::datakit::dataset::MANIFEST_FILE);
    let note = match outcome {
        WriteOutcome::Written => "written",
        WriteOutcome::Unchanged => "unchanged",
    };
    emit(out, format_args!("{} ({note})", manifest.display()))
}

/// Loads `data.base`, or pretrains a base in process when it is unset.
fn load_base(c: &RunConfigFile) -> Result<Segmenter> {
    match c.data.base() {
        Some(path) => {
            let mut model = Segmenter::new(c.toy_config())?;
            Checkpoint::<f32>::load(&path)?.apply_base(&mut model)?;
            Ok(model)
        }
        None => {
            log::info!("no base checkpoint configured; pretraining in process");
            pretrain::<f32>(c.toy_config(), &c.pretrain_config()).map(|(m, _)| m)
        }
    }
}

fn print_config(c: &RunConfigFile, out: &mut dyn std::io::Write) -> Result<()> {
    out.write_all(c.to_toml().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_pretrain(a: &RunArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut c = a.resolve()?;
    if let Some(s) = a.seed {
        c.model.pretrain.seed = s;
    }
    if a.print_config {
        return print_config(&c, out);
    }
    c.validate()?;
    let dir = c.data.out().unwrap_or_else(|| PathBuf::from("run"));
    create_dir(&dir)?;
    let (model, report) = pretrain::<f32>(c.toy_config(), &c.pretrain_config())?;
    let path = dir.join("base.ckpt");
    let meta = serde_json::json!({ "steps": c.model.pretrain.steps, "seed": c.model.pretrain.seed });
    Checkpoint::base(&model, meta).save(&path)?;
    emit(out, format_args!("final loss {:.4}", report.final_loss()))?;
    emit(out, format_args!("{}", path.display()))
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfigFile> {
        let mut c = self.run.resolve()?;
        if let Some(d) = &self.dataset {
            c.data.dataset = d.display().to_string();
        }
        if let Some(b) = &self.base {
            c.data.base = b.display().to_string();
        }
        Ok(c)
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let c = a.resolve()?;
    if a.run.print_config {
        return print_config(&c, out);
    }
    c.validate()?;
    let dataset_dir = c.require("dataset")?;
    let dataset = load_dataset(&dataset_dir)?;
    let base = load_base(&c)?;
    let cfg = c.train_config();
    let dir = c.data.out().unwrap_or_else(|| PathBuf::from("run"));
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), c.to_toml().as_bytes())?;
    if cfg.epochs == 0 {
        let r = direct_test(&base, &dataset.split(Split::Test), cfg.n_points, cfg.seed)?;
        return emit(out, format_args!("direct  {}", r.summary()));
    }
    let outcome = train(&base, &cfg, &dataset)?;
    let mut records = String::new();
    for r in &outcome.reports {
        records.push_str(&serde_json::to_string(r).expect("report serializes"));
        records.push('\n');
        emit(
            out,
            format_args!(
                "epoch {}  loss {:.4}  test mIoU {:.2}  F1 {:.2}",
                r.epoch,
                r.mean_total,
                100.0 * r.test_miou,
                100.0 * r.test_f1
            ),
        )?;
    }
    write_file(&dir.join("epochs.jsonl"), records.as_bytes())?;
    let ckpt = dir.join("adapters.ckpt");
    outcome.checkpoint.save(&ckpt)?;
    emit(out, format_args!("final  {}", outcome.final_eval.summary()))?;
    emit(out, format_args!("{}", ckpt.display()))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let c = a.train.resolve()?;
    if a.train.run.print_config {
        return print_config(&c, out);
    }
    c.validate()?;
    let dataset = load_dataset(&c.require("dataset")?)?;
    let test = dataset.split(Split::Test);
    if a.gt_as_prediction {
        let r = evaluate_with(&test, |s| {
            Ok(s.instances
                .iter()
                .filter(|i| i.mask.any())
                .map(|i| (i.mask.clone(), i.mask.clone()))
                .collect())
        })?;
        return emit(out, format_args!("{}", r.summary()));
    }
    let mut model = load_base(&c)?;
    if let Some(path) = &a.checkpoint {
        Checkpoint::<f32>::load(path)?.apply_adapters(&mut model)?;
    }
    let (n, seed) = (c.run.n_points, c.run.seed);
    let report = evaluate(&model, &test, n, seed)?;
    if let Some(dir) = c.data.out() {
        create_dir(&dir)?;
        let mut records = Vec::with_capacity(test.len());
        for s in &test {
            let preds = predict_points(&model, s, n, seed)?;
            let (h, w) = (s.image.height(), s.image.width());
            records.push(AnnotationRecord {
                image_id: s.image_id.clone(),
                split: Some(s.split),
                file: None,
                height: h,
                width: w,
                instances: preds
                    .iter()
                    .map(|p| InstanceAnnotation {
                        probability: Some(p.mask_prob.as_slice().to_vec()),
                        ..InstanceAnnotation::from_mask(p.instance_id, None, &p.binary(0.5))
                    })
                    .collect(),
            });
        }
        write_annotations(&dir.join("predictions.jsonl"), &records)?;
    }
    emit(out, format_args!("{}", report.summary()))
}

fn record_masks(r: &AnnotationRecord) -> Result<BinaryMaskSet> {
    let mut ids = Vec::with_capacity(r.instances.len());
    let mut masks = Vec::with_capacity(r.instances.len());
    for inst in &r.instances {
        let mask = inst.mask(r.height, r.width)?.ok_or_else(|| {
            Error::InputDomain(format!("instance {} of {} has no mask", inst.instance_id, r.image_id))
        })?;
        ids.push(inst.instance_id);
        masks.push(mask);
    }
    BinaryMaskSet::new(ids, masks)
}

fn cmd_leakage(a: &LeakageArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let records = read_annotations(&a.predictions)?;
    let mut rates = Vec::with_capacity(records.len());
    for r in records.iter().filter(|r| !r.instances.is_empty()) {
        rates.push(leakage_rate(&record_masks(r)?));
    }
    if records.iter().all(|r| r.instances.is_empty()) {
        log::warn!(
            "{}: no predicted instances; leakage is reported as 0.0%",
            a.predictions.display()
        );
        eprintln!("warning: no predicted instances in {}", a.predictions.display());
    }
    let mean = if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    let name = a.name.clone().unwrap_or_else(|| {
        a.predictions
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "predictions".into())
    });
    let column = format!("{}-Point", a.n_points);
    let width = name.len().max("Dataset".len());
    emit(out, format_args!("{:<width$}  {:>8}", "Dataset", column))?;
    emit(out, format_args!("{:<width$}  {:>7.1}%", name, 100.0 * mean))
}

fn cmd_refine(a: &RefineArgs, out: &mut dyn std::io::Write) -> Result<()> {
    if !(0.0..1.0).contains(&a.epsilon) {
        return Err(Error::Validation(vec![format!(
            "--epsilon must lie in [0, 1), got {}",
            a.epsilon
        )]));
    }
    let records = read_annotations(&a.input)?;
    let mut refined_records = Vec::with_capacity(records.len());
    let mut kept = 0usize;
    for r in &records {
        if r.instances.is_empty() {
            refined_records.push(r.clone());
            continue;
        }
        let ids: Vec<_> = r.instances.iter().map(|i| i.instance_id).collect();
        let refined = if a.skip_gate {
            let set = record_masks(r)?;
            refine(&set, &overlap_map(&set))?
        } else {
            let mut layers = Vec::with_capacity(r.instances.len());
            for inst in &r.instances {
                let p = inst.probability.clone().ok_or_else(|| {
                    Error::InputDomain(format!(
                        "{}: instance {} of {} has no probability mask; pass --skip-gate to refine binary masks \
                         with overlap removal only",
                        a.input.display(),
                        inst.instance_id,
                        r.image_id
                    ))
                })?;
                layers.push(Grid::from_vec(r.height, r.width, p)?);
            }
            let stack = ProbMaskStack::new(r.image_id.as_str(), ids, layers)?;
            refine_stack(&stack, a.epsilon as f32)?
        };
        let instances = r
            .instances
            .iter()
            .zip(refined.masks())
            .map(|(inst, m)| {
                kept += m.any() as usize;
                InstanceAnnotation {
                    bbox: enclosing_box(m),
                    ..InstanceAnnotation::from_mask(inst.instance_id, inst.category.clone(), m)
                }
            })
            .collect();
        refined_records.push(AnnotationRecord { instances, ..r.clone() });
    }
    write_annotations(&a.output, &refined_records)?;
    let total: usize = records.iter().map(|r| r.instances.len()).sum();
    emit(
        out,
        format_args!("{} images, {kept} of {total} instances kept", records.len()),
    )?;
    emit(out, format_args!("{}", a.output.display()))
}

/// Entry point shared by the binary and tests; returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>, out: &mut dyn std::io::Write) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli, out) {
        Ok(()) => {
            let _ = out.flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
