//! `gdip`: data generation, training, enhancement, evaluation and
//! verification.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use gdip_core::bench::{bench, bench_image, bench_interleaved};
use gdip_core::checkpoint::load_model;
use gdip_core::datagen::{generate_dataset, load_samples, ConditionKind, GenOptions, Manifest, MAX_OBJECTS};
use gdip_core::detect::CLASS_NAMES;
use gdip_core::gdip::GateReport;
use gdip_core::io::{read_image, write_image};
use gdip_core::ip_ops::IpKind;
use gdip_core::metrics::GateSummary;
use gdip_core::model::Model;
use gdip_core::suite::{self, Scope};
use gdip_core::trainer::{evaluate, load_val, train_on, TrainConfig};
use gdip_core::GdipError;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "gdip", version, about = "Gated differentiable image processing for object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "clear")]
        condition: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = MAX_OBJECTS)]
        max_objects: usize,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` pairs; dotted keys address nested fields.
        #[arg(long, num_args = 1..)]
        r#override: Vec<String>,
    },
    /// Enhance one image with a GDIP or MGDIP checkpoint.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gates: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Summary CSV (mAP, per-class AP, PSNR).
        #[arg(long)]
        out: PathBuf,
        /// TP/FP/FN curves CSV; defaults to `<out stem>_curves.csv`.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Per-detection CSV.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Mean gate activation per condition.
    Gates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image inference latency.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Second checkpoint measured interleaved; prints the latency ratio.
        #[arg(long)]
        against: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("GDIP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("GDIP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData {
            out,
            count,
            condition,
            seed,
            size,
            max_objects,
        } => gen_data(&out, count, &condition, seed, size, max_objects),
        Command::Train { config, r#override } => train(&config, &r#override),
        Command::Enhance {
            ckpt,
            input,
            out,
            gates,
        } => enhance(&ckpt, &input, &out, gates.as_deref()),
        Command::Eval {
            ckpt,
            data,
            out,
            curves,
            detections,
        } => eval(&ckpt, &data, &out, curves, detections.as_deref()),
        Command::Gradcheck { scope } => gradcheck(&scope),
        Command::Gates { ckpt, data, out } => gates(&ckpt, &data, &out),
        Command::Bench { ckpt, iters, against } => bench_cmd(&ckpt, iters, against.as_deref()),
    }
}

fn gen_data(out: &Path, count: usize, condition: &str, seed: u64, size: usize, max_objects: usize) -> CliResult<()> {
    let condition: ConditionKind = condition.parse().map_err(usage)?;
    if count == 0 || max_objects == 0 {
        return Err(usage("--count and --max-objects must be >= 1"));
    }
    let opts = GenOptions {
        count,
        condition,
        seed,
        size,
        max_objects,
    };
    let manifest = generate_dataset(out, &opts).map_err(|e| match e {
        GdipError::InvalidArgument(_) => usage(e),
        e => runtime(format!("{}: {e}", out.display())),
    })?;
    println!(
        "wrote {} samples to {} (adverse fraction {:.4})",
        manifest.rows.len(),
        out.display(),
        manifest.adverse_fraction()
    );
    Ok(())
}

/// Parses an override value as JSON, falling back to a plain string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_override(config: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override {spec:?} is not key=value")))?;
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(usage(format!("override key {key:?} has an empty segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override {key:?} does not address an object field")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), override_value(raw));
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Loads the config file, applies overrides and resolves relative data
/// paths against the config's directory.
fn load_config(path: &Path, overrides: &[String]) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).map_err(|e| usage(format!("config: {e}")))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let rebase = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
    cfg.train_data = rebase(&cfg.train_data);
    cfg.val_data = cfg.val_data.as_deref().map(rebase);
    cfg.run_dir = rebase(&cfg.run_dir);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn train(config: &Path, overrides: &[String]) -> CliResult<()> {
    let cfg = load_config(config, overrides)?;
    let model_cfg = cfg.model_config();
    let startup = |e: GdipError| match e {
        GdipError::Io(_) | GdipError::Format { .. } | GdipError::MissingClear(_) | GdipError::InvalidArgument(_) => {
            usage(e)
        }
        e => runtime(e),
    };
    let train_set = Manifest::load(&cfg.train_data)
        .and_then(|m| load_samples(&m, model_cfg.uses_reconstruction()))
        .map_err(startup)?;
    if train_set.is_empty() {
        return Err(usage("training set is empty"));
    }
    let val_set = match &cfg.val_data {
        Some(p) => load_val(p).map_err(startup)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&cfg.run_dir).map_err(runtime)?;
    let metadata = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
    });
    fs::write(
        cfg.run_dir.join("metadata.json"),
        serde_json::to_string_pretty(&metadata).map_err(runtime)?,
    )
    .map_err(runtime)?;
    let outcome = train_on(&cfg, &train_set, &val_set).map_err(runtime)?;
    if let Some(last) = outcome.logs.last() {
        println!(
            "trained {} epochs; final l_total {:.6}; best epoch {}; run dir {}",
            last.epoch,
            last.loss.l_total,
            outcome.best_epoch,
            cfg.run_dir.display()
        );
    }
    Ok(())
}

fn load_ckpt(path: &Path) -> CliResult<Model> {
    load_model(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Average gate per operation over the levels of one image.
fn mean_gates(reports: &[GateReport]) -> String {
    IpKind::ALL
        .iter()
        .map(|&k| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.get(k)).collect();
            if v.is_empty() {
                String::new()
            } else {
                format!("{:.6}", v.iter().sum::<f64>() / v.len() as f64)
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn enhance(ckpt: &Path, input: &Path, out: &Path, gates: Option<&Path>) -> CliResult<()> {
    let model = load_ckpt(ckpt)?;
    if !model.config.variant.enhances() {
        return Err(usage(format!(
            "{:?} checkpoint has no enhancement path at inference",
            model.config.variant
        )));
    }
    let img = read_image(input).map_err(|e| usage(format!("{}: {e}", input.display())))?;
    let (z, reports) = model
        .enhance(&img)
        .map_err(runtime)?
        .ok_or_else(|| runtime("model produced no enhancement"))?;
    write_image(out, &z).map_err(runtime)?;
    if let Some(path) = gates {
        let csv = format!("{}\n{}\n", GateReport::csv_header(), mean_gates(&reports));
        fs::write(path, csv).map_err(runtime)?;
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path, curves: Option<PathBuf>, detections: Option<&Path>) -> CliResult<()> {
    let model = load_ckpt(ckpt)?;
    let samples = load_val(data).map_err(|e| usage(format!("{}: {e}", data.display())))?;
    let ev = evaluate(&model, &samples).map_err(runtime)?;
    fs::write(out, ev.summary.summary_csv(&CLASS_NAMES)).map_err(runtime)?;
    let curves = curves.unwrap_or_else(|| {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
        out.with_file_name(format!("{stem}_curves.csv"))
    });
    fs::write(&curves, ev.summary.curves_csv()).map_err(runtime)?;
    if let Some(path) = detections {
        let mut s = String::from("image,class,cx,cy,w,h,confidence\n");
        for (i, im) in ev.images.iter().enumerate() {
            for d in &im.detections {
                let b = d.bbox;
                let _ = writeln!(
                    s,
                    "{i},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    CLASS_NAMES[d.class], b.cx, b.cy, b.w, b.h, d.confidence
                );
            }
        }
        fs::write(path, s).map_err(runtime)?;
    }
    println!("map {:.6} over {} images", ev.summary.map, samples.len());
    Ok(())
}

fn gradcheck(scope: &str) -> CliResult<()> {
    let scope: Scope = scope.parse().map_err(usage)?;
    let results = suite::run(scope).map_err(runtime)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<6} {:<24} checked {:>6}  max rel error {:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_error
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed (tolerance {:e})", results.len(), suite::TOLERANCE);
    Ok(())
}

fn gates(ckpt: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let model = load_ckpt(ckpt)?;
    if !model.config.variant.enhances() {
        return Err(usage(format!("{:?} checkpoint has no gates at inference", model.config.variant)));
    }
    let manifest = Manifest::load(data).map_err(|e| usage(format!("{}: {e}", data.display())))?;
    let samples = load_samples(&manifest, false).map_err(|e| usage(format!("{}: {e}", data.display())))?;
    let mut summary = GateSummary::default();
    for s in &samples {
        let (_, reports) = model
            .enhance(&s.adverse)
            .map_err(runtime)?
            .ok_or_else(|| runtime("model produced no gates"))?;
        summary.add(&s.condition, &reports);
    }
    fs::write(out, summary.to_csv()).map_err(runtime)?;
    Ok(())
}

fn bench_cmd(ckpt: &Path, iters: usize, against: Option<&Path>) -> CliResult<()> {
    if iters == 0 {
        return Err(usage("--iters must be >= 1"));
    }
    let model = load_ckpt(ckpt)?;
    let img = bench_image(&model).map_err(runtime)?;
    match against {
        None => println!("{}", bench(&model, &img, iters).map_err(runtime)?),
        Some(other) => {
            let other = load_ckpt(other)?;
            if other.config.encoder.input_size != model.config.encoder.input_size {
                return Err(usage("checkpoints use different input sizes"));
            }
            let (a, b) = bench_interleaved(&model, &other, &img, iters).map_err(runtime)?;
            println!("{}: {a}", ckpt.display());
            println!("against: {b}");
            println!("ratio {:.4}", a.mean_ms / b.mean_ms);
        }
    }
    Ok(())
}
