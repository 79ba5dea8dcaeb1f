//! Command-line front end for `tcnn`.
//!
//! Settings resolve as: flag, then `--config` file, then values recorded in
//! the input checkpoint, then built-in defaults.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tcnn::gpsa::{export_attention_maps, gpsa_forward, query_attention_maps, GpsaConfig, GpsaLayer};
use tcnn::io::checkpoint::{load_checkpoint, save_checkpoint, stored_dtype, Checkpoint};
use tcnn::io::data::{load_cifar10, synthetic_split, Split};
use tcnn::io::KvMap;
use tcnn::model::{build_cnn, ModelConfig, ModelGraph};
use tcnn::reparam::{transform_last_stage_with, verify_equivalence, Downsample, InitMode};
use tcnn::tensor::gradcheck_projected;
use tcnn::train::{
    evaluate, lr_sweep, schedule_csv, schedule_experiment, schedule_sweep, schedule_table, sweep_csv, ExperimentSetup,
    MetricsLog, TrainPlan, Trainer,
};
use tcnn::{DType, Element, Tensor};

#[derive(Parser, Debug)]
#[command(name = "tcnn", version, about = "Convolutional networks with gated positional self-attention")]
pub struct Cli {
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Floating point precision. Defaults to the checkpoint's, else f32.
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<Precision>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a CNN (or a hybrid with --hybrid) from scratch.
    Train(TrainArgs),
    /// Replace the last stage's 3x3 convolutions by GPSA layers.
    Transform(TransformArgs),
    /// Fine-tune a checkpoint with AdamW.
    Finetune(FinetuneArgs),
    /// Compare two checkpoints on random probes.
    Verify(VerifyArgs),
    /// Export attention maps and gate/span values.
    Inspect(InspectArgs),
    /// Test loss and accuracy.
    Eval(EvalArgs),
    /// Transform-timing experiment.
    Experiment(ExperimentArgs),
    /// Fine-tune under several peak learning rates.
    LrSweep(LrSweepArgs),
    /// Finite-difference check of the GPSA gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// synthetic | cifar10
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PlanArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    /// sgd | adamw
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Constant learning rate of the gates.
    #[arg(long)]
    pub gating_lr: Option<f64>,
    /// Stochastic depth rate.
    #[arg(long)]
    pub dr: Option<f64>,
    /// Training resolution.
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model preset: tiny | small.
    #[arg(long)]
    pub model: Option<String>,
    /// Transform the untrained CNN before training.
    #[arg(long)]
    pub hybrid: bool,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "paper")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "subsample")]
    pub downsample: DownsampleArg,
    /// Std of random W_qry / W_key entries (0 keeps them zero).
    #[arg(long, default_value_t = 0.0)]
    pub qk_std: f64,
    /// Surgery report as key = value text.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Paper,
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DownsampleArg {
    Subsample,
    Avgpool,
}

impl From<DownsampleArg> for Downsample {
    fn from(d: DownsampleArg) -> Self {
        match d {
            DownsampleArg::Subsample => Downsample::Subsample,
            DownsampleArg::Avgpool => Downsample::AvgPool,
        }
    }
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Reference checkpoint.
    pub a: PathBuf,
    /// Candidate checkpoint.
    pub b: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    /// Probe resolution; defaults to the model's.
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Test-set image index.
    #[arg(long, default_value_t = 0)]
    pub image: usize,
    /// Query pixel `row,col` on each layer's input grid; defaults to the centre.
    #[arg(long, value_parser = parse_query)]
    pub query: Option<(usize, usize)>,
    #[arg(long, default_value = "inspect")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Evaluation resolution.
    #[arg(long)]
    pub res: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Epochs before surgery; several values share one CNN run.
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40")]
    pub t1: Vec<usize>,
    /// Epochs after surgery. With --same-optimizer it must equal budget − t1.
    #[arg(long)]
    pub t2: Option<usize>,
    /// Keep the optimizer and schedule across surgery.
    #[arg(long)]
    pub same_optimizer: bool,
    /// Fresh fine-tuning epochs for the extra T-CNN and CNN rows (0 to skip).
    #[arg(long, default_value_t = 10)]
    pub finetune_epochs: usize,
    #[arg(long, value_enum, default_value = "paper")]
    pub mode: ModeArg,
    #[arg(long, short, default_value = "schedule.csv")]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Debug)]
pub struct LrSweepArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lrs: Vec<f64>,
    #[arg(long, short, default_value = "lr_sweep.csv")]
    pub out: PathBuf,
    /// Directory for one metrics CSV per rate.
    #[arg(long)]
    pub logs: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

fn parse_query(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(r)?, p(c)?))
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    cli_dispatch_to(argv, &mut std::io::stdout())
}

/// [`cli_dispatch`] writing reports to `out`.
pub fn cli_dispatch_to<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Runs a parsed command. Returns the exit code for failed checks.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let config = match &cli.config {
        Some(p) => KvMap::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => KvMap::new(),
    };
    let dtype = match (cli.dtype, input_path(&cli.command)) {
        (Some(Precision::F32), _) => DType::F32,
        (Some(Precision::F64), _) => DType::F64,
        (None, Some(p)) => stored_dtype(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, None) => match config.get("dtype") {
            Some("f64") => DType::F64,
            Some("f32") | None => DType::F32,
            Some(other) => bail!("dtype = {other:?}: expected f32 or f64"),
        },
    };
    match dtype {
        DType::F32 => run_typed::<f32>(cli, &config, out),
        DType::F64 => run_typed::<f64>(cli, &config, out),
    }
}

fn input_path(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Transform(a) => Some(&a.input),
        Command::Finetune(a) => Some(&a.input),
        Command::Verify(a) => Some(&a.a),
        Command::Inspect(a) => Some(&a.input),
        Command::Eval(a) => Some(&a.input),
        Command::LrSweep(a) => Some(&a.input),
        _ => None,
    }
}

fn run_typed<T: Element>(cli: &Cli, config: &KvMap, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => cmd_train::<T>(a, config, out),
        Command::Transform(a) => cmd_transform::<T>(a, out),
        Command::Finetune(a) => cmd_finetune::<T>(a, config, out),
        Command::Verify(a) => cmd_verify::<T>(a, out),
        Command::Inspect(a) => cmd_inspect::<T>(a, config, out),
        Command::Eval(a) => cmd_eval::<T>(a, config, out),
        Command::Experiment(a) => cmd_experiment::<T>(a, config, out),
        Command::LrSweep(a) => cmd_lr_sweep::<T>(a, config, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

/// Data settings as `data.*` keys: checkpoint meta, then config file, then flags.
fn data_settings(args: &DataArgs, config: &KvMap, meta: Option<&KvMap>) -> KvMap {
    let mut kv = KvMap::new();
    if let Some(m) = meta {
        kv.merge(&m.section("data"));
    }
    kv.merge(&config.section("data"));
    if let Some(v) = &args.dataset {
        kv.set("dataset", v);
    }
    if let Some(v) = &args.data_dir {
        kv.set("dir", v.display());
    }
    if let Some(v) = args.n_train {
        kv.set("n_train", v);
    }
    if let Some(v) = args.n_test {
        kv.set("n_test", v);
    }
    if let Some(v) = args.classes {
        kv.set("classes", v);
    }
    if let Some(v) = args.data_seed {
        kv.set("seed", v);
    }
    kv
}

fn load_data(settings: &KvMap) -> Result<Split> {
    match settings.get("dataset").unwrap_or("synthetic") {
        "synthetic" => Ok(synthetic_split(
            settings.get_or("n_train", 8000)?,
            settings.get_or("n_test", 2000)?,
            settings.get_or("res", 32)?,
            settings.get_or("classes", 10)?,
            settings.get_or("seed", 0)?,
        )?),
        "cifar10" => {
            let dir = settings.get("dir").ok_or_else(|| anyhow!("cifar10 needs --data-dir"))?;
            Ok(load_cifar10(Path::new(dir))?)
        }
        other => bail!("unknown dataset {other:?} (synthetic|cifar10)"),
    }
}

fn run_meta(settings: &KvMap, split: &Split) -> KvMap {
    let mut meta = KvMap::new();
    for k in settings.keys() {
        meta.set(&format!("data.{k}"), settings.get(k).expect("listed key"));
    }
    let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
    meta.set("data.mean", join(&split.mean)).set("data.std", join(&split.std));
    meta
}

/// `base` at the data's resolution, then the config section, then flags.
fn plan_from(base: TrainPlan, data: &Split, args: &PlanArgs, section: &KvMap) -> Result<TrainPlan> {
    let mut plan = TrainPlan { resolution: data.train.height, ..base };
    plan.apply_kv(section)?;
    let mut kv = KvMap::new();
    if let Some(v) = args.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = args.max_lr {
        kv.set("max_lr", v);
    }
    if let Some(v) = args.min_lr {
        kv.set("min_lr", v);
    }
    if let Some(v) = &args.optimizer {
        kv.set("optimizer", v);
    }
    if let Some(v) = args.warmup {
        kv.set("warmup_epochs", v);
    }
    if let Some(v) = args.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = args.weight_decay {
        kv.set("weight_decay", v);
    }
    if let Some(v) = args.gating_lr {
        kv.set("gating_lr", v);
    }
    if let Some(v) = args.dr {
        kv.set("dr", v);
    }
    if let Some(v) = args.res {
        kv.set("res", v);
    }
    if let Some(v) = args.seed {
        kv.set("seed", v);
    }
    if args.no_flip {
        kv.set("flip", false);
    }
    plan.apply_kv(&kv)?;
    Ok(plan)
}

fn model_config(preset: Option<&str>, config: &KvMap) -> Result<ModelConfig> {
    if let Some(p) = preset {
        return Ok(ModelConfig::preset(p)?);
    }
    if config.keys().any(|k| k.starts_with("model.") && k != "model.preset") && config.contains("model.name") {
        return Ok(ModelConfig::from_kv(config)?);
    }
    Ok(ModelConfig::preset(config.get("model.preset").unwrap_or("tiny"))?)
}

fn init_mode(mode: ModeArg, dtype: DType) -> InitMode {
    match mode {
        ModeArg::Paper => InitMode::paper(),
        ModeArg::Strict => InitMode::strict_for(dtype),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train<T: Element>(a: &TrainArgs, config: &KvMap, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = model_config(a.model.as_deref(), config)?;
    let settings = data_settings(&a.data, config, None);
    let data = load_data(&settings)?;
    cfg.n_classes = data.train.n_classes;
    let plan = plan_from(TrainPlan::from_scratch(), &data, &a.plan, &config.section("train"))?;
    let mut model: ModelGraph<T> = build_cnn(&cfg)?;
    if a.hybrid {
        model = transform_last_stage_with(&model, &InitMode::paper(), Downsample::Subsample)?.0;
    }
    let mut trainer = Trainer::new(plan.clone(), data.train.len())?;
    let mut log = MetricsLog::default();
    trainer.train_epochs(&mut model, &data, plan.total_epochs, &mut log)?;
    let mut meta = run_meta(&settings, &data);
    meta.merge(&prefixed("train", &plan.to_kv()));
    save_checkpoint(&a.out, &model, Some(&trainer.state), &meta)?;
    if let Some(p) = &a.metrics {
        write_file(p, &log.to_csv())?;
    }
    let acc = log.last().map_or(0.0, |e| e.test_acc);
    writeln!(out, "trained {} epochs, test acc {acc:.2}%, saved {}", plan.total_epochs, a.out.display())?;
    Ok(0)
}

fn prefixed(prefix: &str, kv: &KvMap) -> KvMap {
    let mut out = KvMap::new();
    for k in kv.keys() {
        out.set(&format!("{prefix}.{k}"), kv.get(k).expect("listed key"));
    }
    out
}

fn cmd_transform<T: Element>(a: &TransformArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = load::<T>(&a.input)?;
    let mode = InitMode { qk_std: a.qk_std, ..init_mode(a.mode, T::DTYPE) };
    let (model, report) = transform_last_stage_with(&ck.model, &mode, a.downsample.into())?;
    save_checkpoint(&a.out, &model, None, &ck.meta)?;
    if let Some(p) = &a.report {
        write_file(p, &report.to_kv().to_string())?;
    }
    write!(out, "{}", report.to_text())?;
    writeln!(out, "saved {}", a.out.display())?;
    Ok(0)
}

fn cmd_finetune<T: Element>(a: &FinetuneArgs, config: &KvMap, out: &mut dyn Write) -> Result<i32> {
    let ck = load::<T>(&a.input)?;
    let settings = data_settings(&a.data, config, Some(&ck.meta));
    let data = load_data(&settings)?;
    let plan = plan_from(TrainPlan::finetune(), &data, &a.plan, &config.section("finetune"))?;
    let mut model = ck.model;
    let mut trainer = Trainer::new(plan.clone(), data.train.len())?;
    let mut log = MetricsLog::default();
    trainer.train_epochs(&mut model, &data, plan.total_epochs, &mut log)?;
    let mut meta = ck.meta.clone();
    meta.merge(&prefixed("finetune", &plan.to_kv()));
    save_checkpoint(&a.out, &model, Some(&trainer.state), &meta)?;
    if let Some(p) = &a.metrics {
        write_file(p, &log.to_csv())?;
    }
    let acc = log.last().map_or(0.0, |e| e.test_acc);
    writeln!(out, "fine-tuned {} epochs at res {}, test acc {acc:.2}%", plan.total_epochs, plan.resolution)?;
    Ok(0)
}

fn cmd_verify<T: Element>(a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let x = load::<T>(&a.a)?.model;
    let y = load::<T>(&a.b)?.model;
    let res = a.res.unwrap_or(x.config.resolution);
    let r = verify_equivalence(&x, &y, a.probes, a.tol, res, a.seed)?;
    writeln!(
        out,
        "max abs deviation {:.3e}, max rel {:.3e} over {} probes at {res}x{res}: {}",
        r.max_abs,
        r.max_rel,
        r.n_probes,
        if r.passed { "PASS" } else { "FAIL" }
    )?;
    Ok(if r.passed { 0 } else { 1 })
}

fn cmd_inspect<T: Element>(a: &InspectArgs, config: &KvMap, out: &mut dyn Write) -> Result<i32> {
    let ck = load::<T>(&a.input)?;
    if !ck.model.is_transformed() {
        bail!("{} has no GPSA layers", a.input.display());
    }
    let mut settings = data_settings(&a.data, config, Some(&ck.meta));
    // Only the test image is needed.
    settings.set("n_train", 1).set("n_test", a.image + 1);
    let data = load_data(&settings)?;
    if a.image >= data.test.len() {
        bail!("image {} out of range ({} test images)", a.image, data.test.len());
    }
    let (x, _) = data.test.batch::<T>(&[a.image], &[])?;
    std::fs::create_dir_all(&a.out_dir)?;
    let inputs = ck.model.gpsa_inputs(&x)?;
    let layers = ck.model.gpsa_layers();
    let mut csv = String::from("layer,name,head,gate,span,center_row,center_col\n");
    let mut written = 0;
    for (li, (input, (name, layer))) in inputs.iter().zip(&layers).enumerate() {
        let (h, w) = (input.height - 2 * input.pad, input.width - 2 * input.pad);
        let (qr, qc) = a.query.unwrap_or((h / 2, w / 2));
        if qr >= h || qc >= w {
            bail!("query ({qr},{qc}) outside the {h}x{w} grid of {name}");
        }
        let tokens = Tensor::from_vec(input.tokens.to_vec(), &[input.height * input.width, layer.config.d_in])?;
        let maps = query_attention_maps(&tokens, layer, input.height, input.width, qr + input.pad, qc + input.pad)?;
        written += export_attention_maps(&a.out_dir, li, &maps)?.len();
        let (gates, spans, centers) = (layer.gating_values(), layer.attention_span(), layer.center_values());
        for hd in 0..layer.n_heads() {
            csv += &format!(
                "{li},{name},{hd},{:.6},{:.6},{:.6},{:.6}\n",
                gates[hd], spans[hd], centers[hd][0], centers[hd][1]
            );
        }
    }
    write_file(&a.out_dir.join("gates.csv"), &csv)?;
    writeln!(out, "wrote {written} attention maps and gates.csv to {}", a.out_dir.display())?;
    Ok(0)
}

fn cmd_eval<T: Element>(a: &EvalArgs, config: &KvMap, out: &mut dyn Write) -> Result<i32> {
    let ck = load::<T>(&a.input)?;
    let mut settings = data_settings(&a.data, config, Some(&ck.meta));
    settings.set("n_train", 1);
    let mut data = load_data(&settings)?;
    let res = a.res.unwrap_or(data.test.height);
    if res != data.test.height {
        data = data.resized(res)?;
    }
    let (loss, acc) = evaluate(&ck.model, &data.test, 250)?;
    writeln!(out, "res {res}: test loss {loss:.4}, test acc {acc:.2}% on {} images", data.test.len())?;
    Ok(0)
}

fn cmd_experiment<T: Element>(a: &ExperimentArgs, config: &KvMap, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = model_config(a.model.as_deref(), config)?;
    let settings = data_settings(&a.data, config, None);
    let data = load_data(&settings)?;
    cfg.n_classes = data.train.n_classes;
    let scratch = plan_from(TrainPlan::from_scratch(), &data, &a.plan, &config.section("train"))?;
    let finetune = plan_from(TrainPlan::finetune(), &data, &PlanArgs::default(), &config.section("finetune"))?;
    let setup = ExperimentSetup { model: &cfg, data: &data, scratch, finetune, init: init_mode(a.mode, T::DTYPE) };
    let budget = setup.scratch.total_epochs;
    let rows = if a.same_optimizer {
        if let Some(t2) = a.t2 {
            if let Some(&t1) = a.t1.iter().find(|&&t1| t1 + t2 != budget) {
                bail!("--same-optimizer needs t1 + t2 = {budget}, got {t1} + {t2}");
            }
        }
        schedule_sweep::<T>(&setup, &a.t1, a.finetune_epochs)?
    } else {
        let t2 = a.t2.unwrap_or(a.finetune_epochs);
        a.t1.iter().map(|&t1| schedule_experiment::<T>(&setup, t1, t2, false)).collect::<tcnn::Result<Vec<_>>>()?
    };
    write_file(&a.out, &schedule_csv(&rows))?;
    write!(out, "{}", schedule_table(&rows))?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(0)
}

fn cmd_lr_sweep<T: Element>(a: &LrSweepArgs, config: &KvMap, out: &mut dyn Write) -> Result<i32> {
    let ck = load::<T>(&a.input)?;
    let settings = data_settings(&a.data, config, Some(&ck.meta));
    let data = load_data(&settings)?;
    let plan = plan_from(TrainPlan::finetune(), &data, &a.plan, &config.section("finetune"))?;
    let runs = lr_sweep(&ck.model, &a.lrs, &plan, &data)?;
    write_file(&a.out, &sweep_csv(&runs, plan.warmup_epochs))?;
    if let Some(dir) = &a.logs {
        for r in &runs {
            write_file(&dir.join(format!("lr_{:e}.csv", r.max_lr)), &r.log.to_csv())?;
        }
    }
    for r in &runs {
        writeln!(out, "max lr {:e}: dip depth {:.2} points", r.max_lr, r.dip_depth(plan.warmup_epochs))?;
    }
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let mut cfg = GpsaConfig::new(a.heads, 3, 5);
    cfg.bias = true;
    let mut layer = GpsaLayer::<f64>::random(cfg, &mut rng)?;
    layer.centers = Tensor::uniform(&[a.heads, 2], -1.3, 1.3, &mut rng).requires_grad_();
    layer.gate = Tensor::uniform(&[a.heads], -1.5, 1.5, &mut rng).requires_grad_();
    let x = Tensor::<f64>::randn(&[2, 12, 3], 1.0, &mut rng);
    type Get = fn(&GpsaLayer<f64>) -> Tensor<f64>;
    type Set = fn(&mut GpsaLayer<f64>, Tensor<f64>);
    let classes: [(&str, Get, Set); 8] = [
        ("w_qry", |l| l.w_qry.clone(), |l, t| l.w_qry = t),
        ("w_key", |l| l.w_key.clone(), |l, t| l.w_key = t),
        ("w_val", |l| l.w_val.clone(), |l, t| l.w_val = t),
        ("w_out", |l| l.w_out.clone(), |l, t| l.w_out = t),
        ("alpha_raw", |l| l.alpha_raw.clone(), |l, t| l.alpha_raw = t),
        ("centers", |l| l.centers.clone(), |l, t| l.centers = t),
        ("gate", |l| l.gate.clone(), |l, t| l.gate = t),
        ("bias", |l| l.bias.clone().expect("bias enabled"), |l, t| l.bias = Some(t)),
    ];
    let mut ok = true;
    for (name, get, set) in classes {
        let r = gradcheck_projected(
            |p| {
                let mut l = layer.clone();
                set(&mut l, p.clone());
                gpsa_forward(&x, &l, 3, 4)
            },
            &get(&layer),
            1e-5,
            a.tol,
            a.seed,
        )?;
        ok &= r.passed;
        writeln!(out, "{name:<10} rel err {:.2e} {}", r.max_rel_err, if r.passed { "ok" } else { "FAIL" })?;
    }
    let r = gradcheck_projected(|p| gpsa_forward(p, &layer, 3, 4), &x, 1e-5, a.tol, a.seed)?;
    ok &= r.passed;
    writeln!(out, "{:<10} rel err {:.2e} {}", "input", r.max_rel_err, if r.passed { "ok" } else { "FAIL" })?;
    Ok(if ok { 0 } else { 1 })
}
