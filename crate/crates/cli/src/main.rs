use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hmsa::autolabel::{self, LabelMode, StorageEstimate};
use hmsa::config::{ModelConfig, RunConfig, RunManifest, SyntheticConfig};
use hmsa::fusion::{argmax_prediction, FusionMode, ScaleSet};
use hmsa::inference::{fuse_outputs, predict};
use hmsa::pgm::write_pgm;
use hmsa::segnet::{load_checkpoint, save_checkpoint, AttentionMap, LogitMap, Network, ScaledForward};
use hmsa::synth::experiment::{run_seed, ExperimentConfig};
use hmsa::synth::report::{attention_scale_report, write_report};
use hmsa::synth::{relative_training_cost, ConfusionMatrix, Dataset, CLASS_NAMES};
use hmsa::tensor::io::{load_tensor, save_tensor};
use hmsa::tensor::Tensor;
use hmsa::trainer::{forward_macs, train};
use hmsa::{Error, Result, IGNORE_ID};

const SEED_ENV: &str = "HMSA_SEED";

#[derive(Parser)]
#[command(name = "hmsa", version, about = "Hierarchical multi-scale attention for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a TOML run configuration.
    Train(TrainArgs),
    /// Predict one image at one or more scales.
    Infer(InferArgs),
    /// Fuse per-scale logit tensors saved on disk.
    Fuse(FuseArgs),
    /// Score a directory of predictions against ground truth.
    Eval(EvalArgs),
    /// Write thresholded hard labels from a teacher network.
    Autolabel(AutolabelArgs),
    /// Training-cost and label-storage arithmetic.
    Cost {
        #[command(subcommand)]
        what: CostCommand,
    },
    /// Per-class effective weight of every scale.
    Report(ReportArgs),
    /// Run the built-in invariant suite.
    Selftest {
        /// Perturb the named check.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train and evaluate the synthetic scale-specialisation experiment.
    Experiment {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Seeds both initialisation and sampling. Overrides HMSA_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    poly_exponent: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    /// Two training scales, low first.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    train_scales: Option<Vec<f64>>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `[3, H, W]` image tensor.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "0.5,1.0,2.0")]
    scales: String,
    /// hier, explicit, avg, max or single.
    #[arg(long, default_value = "hier")]
    fusion: String,
    #[arg(long, default_value = "infer")]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// `SCALE=LOGITS[,ATTENTION]`, once per scale.
    #[arg(long = "input", required = true)]
    inputs: Vec<String>,
    #[arg(long, default_value = "hier")]
    fusion: String,
    #[arg(long, default_value = "fuse")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct AutolabelArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Directory of `.hmst` images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = autolabel::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value = "0.5,1.0,2.0")]
    scales: String,
}

#[derive(Subcommand)]
enum CostCommand {
    /// Relative training cost of a scale set, modelled and counted.
    Training {
        #[arg(long, default_value = "0.5,1.0")]
        scales: String,
        /// Crop side used for the counted multiply-accumulates.
        #[arg(long, default_value_t = 64)]
        crop: usize,
    },
    /// Bytes needed to store auto-generated labels.
    Storage {
        #[arg(long)]
        images: u64,
        #[arg(long)]
        width: u64,
        #[arg(long)]
        height: u64,
        #[arg(long)]
        classes: u64,
        #[arg(long, default_value_t = 4)]
        bytes: u64,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; the default synthetic validation split otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "0.5,1.0,2.0")]
    scales: String,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Index of the first scene in the seed's stream.
    #[arg(long, default_value_t = 0)]
    first: u64,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn load_network(path: &Path) -> Result<Network> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", path.display())),
        Error::Data(m) => Error::Data(format!("{} is not a usable checkpoint: {m}", path.display())),
        other => other,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed.or(env_seed()?) {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let t = &mut cfg.train;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field.clone() { t.$field = v; })* };
    }
    set!(epochs, base_lr, poly_exponent, momentum, weight_decay, aux_weight, log_every);
    if let Some(s) = &a.train_scales {
        t.train_scales = [s[0], s[1]];
    }
    if a.steps_per_epoch.is_some() {
        t.steps_per_epoch = a.steps_per_epoch;
    }
    if a.train_dir.is_some() {
        cfg.data.train_dir = a.train_dir;
    }
    if a.val_dir.is_some() {
        cfg.data.val_dir = a.val_dir;
    }
    cfg.train.validate()?;

    let mut manifest = RunManifest::new("train", Some(cfg.train.seed), to_json(&cfg));
    let (data, val) = cfg.data.load()?;
    let mut net = cfg.model.build()?;
    std::fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let summary = train(&mut net, &data, val.as_ref(), &cfg.train, &mut log)?;
    std::io::Write::flush(&mut log)?;
    let ckpt = a.out.join("checkpoint.hmsc");
    save_checkpoint(&ckpt, &net)?;
    let resolved = a.out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml_string()?)?;
    manifest.outputs = vec![ckpt, log_path, resolved];
    manifest.finish(&a.out)?;
    println!("iterations {}", summary.iterations);
    if let (Some(loss), Some(Some(m))) = (summary.epoch_loss.last(), summary.epoch_miou.last()) {
        println!("final epoch loss {loss:.4} val mIoU {m:.4}");
    }
    Ok(())
}

fn write_attention_maps(out: &Path, per_scale: &[ScaledForward], written: &mut Vec<PathBuf>) -> Result<()> {
    for f in per_scale {
        let path = out.join(format!("attention_r{}.pgm", f.scale));
        write_pgm(&path, &f.attention.0)?;
        written.push(path);
    }
    Ok(())
}

fn write_weight_maps(out: &Path, scales: &[f64], weights: &[Tensor<f32>], written: &mut Vec<PathBuf>) -> Result<()> {
    for (s, w) in scales.iter().zip(weights) {
        let path = out.join(format!("weights_r{s}.pgm"));
        write_pgm(&path, w)?;
        written.push(path);
    }
    Ok(())
}

fn write_prediction(out: &Path, logits: &LogitMap, written: &mut Vec<PathBuf>) -> Result<()> {
    let logits_path = out.join("logits.hmst");
    save_tensor(&logits_path, &logits.0)?;
    let pred_path = out.join("prediction.hmsl");
    autolabel::write_labels(&pred_path, &argmax_prediction(logits)?)?;
    written.extend([pred_path, logits_path]);
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let scales = ScaleSet::parse(&a.scales)?;
    let mode: FusionMode = a.fusion.parse()?;
    let net = load_network(&a.checkpoint)?;
    let image: Tensor<f32> = load_tensor(&a.image)?;
    let mut manifest = RunManifest::new(
        "infer",
        None,
        json!({"checkpoint": a.checkpoint, "image": a.image, "scales": scales.scales(), "fusion": a.fusion}),
    );
    let pred = predict(&net, &image, &scales, mode)?;
    std::fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    write_prediction(&a.out, &pred.logits, &mut written)?;
    write_attention_maps(&a.out, &pred.per_scale, &mut written)?;
    if let Some(w) = &pred.effective_weights {
        write_weight_maps(&a.out, scales.scales(), w, &mut written)?;
    }
    manifest.outputs = written;
    manifest.finish(&a.out)?;
    Ok(())
}

fn parse_fuse_input(spec: &str) -> Result<ScaledForward> {
    let usage = || Error::Usage(format!("expected SCALE=LOGITS[,ATTENTION], got {spec:?}"));
    let (scale, files) = spec.split_once('=').ok_or_else(usage)?;
    let scale: f64 = scale.trim().parse().map_err(|_| usage())?;
    let mut files = files.split(',');
    let logits: Tensor<f32> = load_tensor(files.next().ok_or_else(usage)?)?;
    if logits.shape().len() != 3 {
        return Err(Error::Dimension(format!("logits must be [C, H, W], got {:?}", logits.shape())));
    }
    let attention = match files.next() {
        Some(p) => load_tensor(p)?,
        None => Tensor::full(&[1, logits.shape()[1], logits.shape()[2]], 0.5)?,
    };
    Ok(ScaledForward {
        scale,
        logits: LogitMap(logits),
        attention: AttentionMap(attention),
        aux_logits: None,
    })
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let mode: FusionMode = a.fusion.parse()?;
    let mut per_scale = a.inputs.iter().map(|s| parse_fuse_input(s)).collect::<Result<Vec<_>>>()?;
    per_scale.sort_by(|x, y| x.scale.total_cmp(&y.scale));
    let scales = ScaleSet::new(per_scale.iter().map(|f| f.scale).collect())?;
    let top = per_scale.last().expect("at least one input");
    let (h, w) = (top.logits.height(), top.logits.width());
    let manifest_cfg = json!({"inputs": a.inputs, "fusion": a.fusion});
    let mut manifest = RunManifest::new("fuse", None, manifest_cfg);
    let (logits, weights) = fuse_outputs(&per_scale, mode, h, w)?;
    std::fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    write_prediction(&a.out, &logits, &mut written)?;
    if let Some(ws) = &weights {
        write_weight_maps(&a.out, scales.scales(), ws, &mut written)?;
    }
    manifest.outputs = written;
    manifest.finish(&a.out)?;
    Ok(())
}

fn label_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "hmsl") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (pred, truth) = (label_files(&a.pred)?, label_files(&a.truth)?);
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions in {} but {} truth maps in {}",
            pred.len(),
            a.pred.display(),
            truth.len(),
            a.truth.display()
        )));
    }
    let mut cm: Option<ConfusionMatrix> = None;
    for (p, t) in pred.iter().zip(&truth) {
        let (p, t) = (autolabel::read_labels(p)?, autolabel::read_labels(t)?);
        let cm = cm.get_or_insert_with(|| ConfusionMatrix::new(t.num_classes() as usize));
        cm.add(&p, &t, IGNORE_ID).map_err(|e| Error::Data(e.to_string()))?;
    }
    let cm = cm.expect("non-empty");
    for (c, iou) in cm.iou().iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
        match iou {
            Some(v) => println!("{c:>3} {name:<16} {v:.4}"),
            None => println!("{c:>3} {name:<16} absent"),
        }
    }
    println!("mIoU {:.4}", cm.mean_iou());
    Ok(())
}

fn cmd_autolabel(a: AutolabelArgs) -> Result<()> {
    let scales = ScaleSet::parse(&a.scales)?;
    let net = load_network(&a.teacher)?;
    let mut manifest = RunManifest::new(
        "autolabel",
        None,
        json!({"teacher": a.teacher, "input": a.input, "threshold": a.threshold, "scales": scales.scales()}),
    );
    let summary = autolabel::autolabel_dir(&net, &a.input, &a.out, a.threshold, &scales)?;
    println!("{} files, labelled fraction {:.4}", summary.files.len(), summary.labelled_fraction);
    manifest.outputs = summary.files;
    manifest.finish(&a.out)?;
    Ok(())
}

fn cmd_cost(what: CostCommand) -> Result<()> {
    match what {
        CostCommand::Training { scales, crop } => {
            let set = ScaleSet::parse(&scales)?;
            let modelled = relative_training_cost(set.scales())?;
            let net = ModelConfig::default().build()?;
            let counted = forward_macs(&net, crop, crop, set.scales())? as f64 / forward_macs(&net, crop, crop, &[1.0])? as f64;
            println!("modelled {modelled}");
            println!("counted {counted:.4}");
        }
        CostCommand::Storage { images, width, height, classes, bytes } => {
            let est = StorageEstimate { images, width, height, classes, bytes_per_value: bytes };
            let soft = autolabel::storage_cost(&est, LabelMode::Soft)?;
            let hard = autolabel::storage_cost(&est, LabelMode::Hard)?;
            println!("soft {soft} bytes ({:.1} TB)", soft as f64 / 1e12);
            println!("hard {hard} bytes ({:.1} GB)", hard as f64 / 1e9);
            println!("ratio {}", soft as f64 / hard as f64);
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let scales = ScaleSet::parse(&a.scales)?;
    let net = load_network(&a.checkpoint)?;
    let ds = match &a.data {
        Some(dir) => Dataset::load(dir)?,
        None => SyntheticConfig::default().datasets()?.1,
    };
    let mut manifest = RunManifest::new(
        "report",
        None,
        json!({"checkpoint": a.checkpoint, "data": a.data, "scales": scales.scales()}),
    );
    let report = attention_scale_report(&net, &ds, &scales)?;
    print!("{}", report.table());
    manifest.outputs = write_report(&a.out, &net, &ds, &scales, &report)?;
    manifest.finish(&a.out)?;
    Ok(())
}

fn cmd_selftest(corrupt: Option<String>) -> Result<bool> {
    if let Some(name) = &corrupt {
        if !hmsa::selftest::CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::Usage(format!("unknown check {name:?}")));
        }
    }
    let start = std::time::Instant::now();
    let checks = hmsa::selftest::run(corrupt.as_deref());
    for c in &checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed in {:.1?}", checks.len() - failed, start.elapsed());
    Ok(failed == 0)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::default();
    if let Some(seed) = a.seed.or(env_seed()?) {
        cfg.seed = seed;
    }
    let mut manifest = RunManifest::new("generate", Some(cfg.seed), to_json(&cfg.spec));
    let ds = Dataset::synthetic(&cfg.spec, cfg.seed, a.first, a.count)?;
    ds.save(&a.out, &format!("seed {} first {} count {}", cfg.seed, a.first, a.count))?;
    manifest.outputs = vec![a.out.join("images"), a.out.join("labels"), a.out.join("manifest")];
    manifest.finish(&a.out)?;
    Ok(())
}

fn cmd_experiment(seeds: Vec<u64>) -> Result<()> {
    let cfg = ExperimentConfig::default();
    let data = cfg.data.datasets()?;
    for seed in seeds {
        let r = run_seed(&cfg, &data, seed)?;
        println!(
            "seed {seed}: hierarchical {:.4} average {:.4} hierarchical+0.25 {:.4}",
            r.hierarchical, r.average, r.hierarchical_with_quarter
        );
        print!("{}", r.report.table());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Dimension(_) => 3,
        Error::Divergence(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Autolabel(a) => cmd_autolabel(a),
        Command::Cost { what } => cmd_cost(what),
        Command::Report(a) => cmd_report(a),
        Command::Selftest { corrupt } => match cmd_selftest(corrupt) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Generate(a) => cmd_generate(a),
        Command::Experiment { seeds } => cmd_experiment(seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
