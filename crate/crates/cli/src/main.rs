use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use atrous::checkpoint::{self, Checkpoint};
use atrous::config::{RunConfig, KEYS};
use atrous::conv::valid_weight_fraction;
use atrous::dataset::{channel_mean, write_pgm, Manifest};
use atrous::eval::{evaluate_with, InferenceConfig};
use atrous::gradcheck::{self, Fault};
use atrous::model::SegmentationModel;
use atrous::norm::BnMode;
use atrous::synth::{self, ClassMenu, CLASS_NAMES};
use atrous::train::{run_training, LogRow, TrainData};

#[derive(Parser)]
#[command(name = "atrous", version, about = "Atrous-convolution semantic segmentation at desk scale")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic shape dataset with train/val manifests (80/20).
    GenerateData(GenerateArgs),
    /// Train a model from a config file and write a checkpoint plus CSV log.
    #[command(after_long_help = config_help())]
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and write per-class IOU.
    Eval(EvalArgs),
    /// Fraction of valid 3x3 weights against atrous rate on a feature map.
    AnalyzeFov(FovArgs),
    /// Finite-difference check of every analytic backward pass.
    Gradcheck(GradcheckArgs),
    /// Print the default config file.
    DefaultConfig,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 65)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (`section.key = value` lines); omitted keys take defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// CSV log path [default: checkpoint path with `.csv` appended].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Classes (names or ids, comma separated) whose images are duplicated.
    #[arg(long, value_delimiter = ',')]
    bootstrap_hard_classes: Vec<String>,
    /// Copies of each hard-class image per epoch.
    #[arg(long)]
    bootstrap_factor: Option<usize>,
    /// Compute the loss on downsampled labels instead of upsampled logits.
    #[arg(long)]
    no_upsample_logits: bool,
    /// Keep batch norm frozen from initialization in every stage.
    #[arg(long)]
    no_bn_finetune: bool,
    /// Training crop size.
    #[arg(long)]
    crop: Option<usize>,
    /// Output stride for every stage.
    #[arg(long, value_parser = ["8", "16", "32"])]
    train_os: Option<String>,
    /// Images per update.
    #[arg(long)]
    batch: Option<usize>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every N updates (0: silent).
    #[arg(long, default_value_t = 100)]
    progress: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = ["8", "16", "32"])]
    eval_os: String,
    /// Input scales, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    scales: Vec<f64>,
    /// Also average left-right flipped inputs.
    #[arg(long)]
    flip: bool,
    #[arg(long, default_value_t = atrous::dataset::IGNORE_LABEL)]
    ignore_label: u8,
    /// CSV of per-class IOU.
    #[arg(long)]
    report: PathBuf,
    /// Directory for predicted label maps (PGM).
    #[arg(long)]
    pred_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FovArgs {
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [65, 65])]
    feature_size: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 70)]
    max_rate: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one analytic gradient (conv, bn, aspp, loss) to see the check fail.
    #[arg(long)]
    corrupt: Option<String>,
}

/// Error classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<atrous::Error> for Failure {
    fn from(e: atrous::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.into()))
}

fn config_help() -> String {
    let defaults = RunConfig::default().entries();
    let mut out = String::from("Config keys (default in brackets):\n");
    for (key, doc) in KEYS {
        let shown: Vec<String> = match key.strip_prefix("stageN.") {
            Some(field) => defaults
                .iter()
                .filter(|(k, _)| k.starts_with("stage") && k.ends_with(&format!(".{field}")))
                .map(|(k, v)| format!("{}={v}", k.split_once('.').unwrap().0))
                .collect(),
            None => defaults.iter().filter(|(k, _)| k == key).map(|(_, v)| v.clone()).collect(),
        };
        out.push_str(&format!("  {key:<24} {doc} [{}]\n", shown.join(" ")));
    }
    out
}

fn parse_class(name: &str) -> anyhow::Result<u8> {
    if let Ok(id) = name.parse::<u8>() {
        return Ok(id);
    }
    match CLASS_NAMES.iter().position(|c| *c == name) {
        Some(i) => Ok(i as u8),
        None => bail!("unknown class {name:?} (expected an id or one of {})", CLASS_NAMES.join(", ")),
    }
}

fn load_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    let t = &mut cfg.train;
    if !args.bootstrap_hard_classes.is_empty() {
        t.hard_classes = args.bootstrap_hard_classes.iter().map(|c| parse_class(c)).collect::<anyhow::Result<_>>()?;
    }
    if let Some(f) = args.bootstrap_factor {
        t.bootstrap_factor = f;
    }
    if args.no_upsample_logits {
        t.upsample_logits = false;
    }
    if args.no_bn_finetune {
        t.stages.iter_mut().for_each(|s| s.bn_mode = BnMode::Frozen);
    }
    if let Some(c) = args.crop {
        t.crop_size = c;
    }
    if let Some(os) = &args.train_os {
        let os: usize = os.parse()?;
        t.stages.iter_mut().for_each(|s| s.output_stride = os);
    }
    if let Some(b) = args.batch {
        t.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(&c) = t.hard_classes.iter().find(|&&c| c as usize >= cfg.aspp.num_classes) {
        bail!("hard class {c} is not below aspp.num_classes = {}", cfg.aspp.num_classes);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &atrous::eval::IouReport) {
    for (c, iou) in report.per_class.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("");
        match iou {
            Some(v) => println!("iou {c} {name} {v:.4}"),
            None => println!("iou {c} {name} absent"),
        }
    }
    println!("miou {}", report.mean);
}

fn class_names(num_classes: usize) -> Vec<&'static str> {
    (0..num_classes).map(|c| CLASS_NAMES.get(c).copied().unwrap_or("")).collect()
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let ds = synth::write_dataset(&args.out, args.seed, args.count, args.size, &ClassMenu::default())?;
    println!("wrote {} train and {} val samples to {}", ds.train.len(), ds.val.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = usage(load_config(&args))?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let train_set = Manifest::load(base.join(&cfg.data.train_manifest))?.load_samples()?;
    let val_set = Manifest::load(base.join(&cfg.data.val_manifest))?.load_samples()?;
    if train_set.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("training manifest is empty")));
    }

    let first_os = cfg.train.stages.first().map_or(16, |s| s.output_stride);
    let mut model = SegmentationModel::from_seed(&cfg.network.spec()?, &cfg.aspp, first_os, cfg.seed)?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out_checkpoint.clone().into_os_string();
        p.push(".csv");
        p.into()
    });
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{}", LogRow::CSV_HEADER).context("writing log")?;

    let data = TrainData { train: &train_set, val: &val_set, fill: channel_mean(&train_set) };
    let start = Instant::now();
    let mut write_err = None;
    let outcome = run_training(&mut model, &data, &cfg.train, cfg.seed, |row| {
        if let Err(e) = writeln!(log, "{}", row.to_csv()) {
            write_err.get_or_insert(e);
        }
        if args.progress > 0 && (row.iter % args.progress == 0 || row.val_miou.is_some()) {
            let miou = row.val_miou.map(|m| format!(" val_miou {m:.4}")).unwrap_or_default();
            eprintln!(
                "iter {} lr {:.6} loss {:.4}{miou} ({:.0}s)",
                row.iter,
                row.lr,
                row.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).context("writing log").into());
    }

    checkpoint::save_model(&mut model, Some(&outcome.optimizer), outcome.iterations)
        .write(&args.out_checkpoint)
        .with_context(|| format!("writing {}", args.out_checkpoint.display()))?;

    let conf = evaluate_with(&mut model, &val_set, &cfg.infer, cfg.train.ignore_label, |_, _| Ok(()))?;
    let report = conf.mean_iou()?;
    print_report(&report);
    println!("train_seconds {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let cfg = InferenceConfig { eval_os: usage(args.eval_os.parse::<usize>())?, scales: args.scales, flip: args.flip };
    usage(cfg.validate())?;
    let ck = Checkpoint::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let mut model = checkpoint::load_model(&ck)?;
    let manifest = Manifest::load(&args.manifest)?;
    let samples = manifest.load_samples()?;
    if let Some(dir) = &args.pred_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let conf = evaluate_with(&mut model, &samples, &cfg, args.ignore_label, |i, pred| {
        if let Some(dir) = &args.pred_dir {
            let name = manifest.entries[i]
                .label
                .file_name()
                .map(PathBuf::from)
                .unwrap_or_else(|| format!("{i:05}.pgm").into());
            write_pgm(dir.join(name), pred)?;
        }
        Ok(())
    })?;
    let report = conf.mean_iou()?;
    fs::write(&args.report, report.to_csv(&class_names(model.num_classes())))
        .with_context(|| format!("writing {}", args.report.display()))?;
    print_report(&report);
    Ok(())
}

fn analyze_fov(args: FovArgs) -> Result<(), Failure> {
    let (h, w) = (args.feature_size[0], args.feature_size[1]);
    if h == 0 || w == 0 || args.kernel == 0 || args.max_rate == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("feature size, kernel and max rate must be positive")));
    }
    let mut csv = String::from("rate,valid_weight_fraction\n");
    for rate in 1..=args.max_rate {
        csv.push_str(&format!("{rate},{}\n", valid_weight_fraction(h, w, args.kernel, rate)));
    }
    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let fault = match args.corrupt.as_deref() {
        None => None,
        Some(name) => match Fault::parse(name) {
            Some(f) => Some(f),
            None => return Err(Failure::Usage(anyhow::anyhow!("unknown component {name:?} (conv, bn, aspp, loss)"))),
        },
    };
    let report = gradcheck::run_all(args.seed, fault)?;
    for (name, err) in &report.components {
        println!("{name} {err:.3e}");
    }
    println!("max {:.3e} (tolerance {:.0e})", report.max_error(), gradcheck::TOLERANCE);
    if !report.passed() {
        return Err(Failure::Runtime(anyhow::anyhow!("gradient check failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::AnalyzeFov(a) => analyze_fov(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
