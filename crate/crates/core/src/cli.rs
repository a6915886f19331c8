//! `gazekit` subcommands. [`run`] returns the process exit code:
//! 0 on success, 1 on configuration or usage errors, 2 when some inputs
//! failed and the rest were processed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::assign::assign_gazed_object;
use crate::config::CliConfig;
use crate::error::{Error, Result};
use crate::hha::encode_hha;
use crate::ingest::{self, DetectionSet};
use crate::metrics::{evaluate, render_csv, render_table};
use crate::model::{AnnotatedSample, Prediction, Task};
use crate::predictors::{Predictor, PredictorKind};
use crate::prompt::{build_person_record, build_record, hha_path_for, parse_response, GazeRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gazekit",
    version,
    about = "Gaze dataset preparation, baselines and evaluation"
)]
pub struct Cli {
    /// TOML config file; defaults to $GAZEKIT_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode depth maps as HHA images.
    Hha(HhaArgs),
    /// Turn annotations into conversation records.
    Build(BuildArgs),
    /// Run a baseline predictor.
    Predict(PredictArgs),
    /// Parse raw model responses into predictions.
    Parse(ParseArgs),
    /// Score predictions against annotations.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepthFormat {
    Png16,
    Pfm,
}

#[derive(Debug, Args)]
pub struct HhaArgs {
    /// A depth file or a directory of them.
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Metres per count for 16-bit PNG input.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<DepthFormat>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Detector output used to fill in missing gazed objects.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "gaze_target")]
    pub tasks: Vec<Task>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<u32>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub kind: Option<PredictorKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Oracle noise sigma in normalized units.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub bias_grid: Option<u32>,
    /// Training annotations for fixed_bias.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// JSONL of {"sample_id", "text"} lines.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub report: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Class vocabulary, one per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Row label; defaults to the predictions file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub lambda: Option<u32>,
}

/// Parse `args` (including the program name) and run. Never panics on bad
/// input; every failure becomes an exit code and a log line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let (mut cfg, config_path) = CliConfig::resolve(cli.config.as_deref())?;
    let lambda = match &cli.command {
        Command::Build(a) => a.lambda,
        Command::Predict(a) => a.lambda,
        Command::Parse(a) => a.lambda,
        Command::Evaluate(a) => a.lambda,
        Command::Hha(_) => None,
    };
    if let Some(l) = lambda {
        cfg.prompt.lambda_margin = l;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let ctx = Context { cfg, config_path };
    pool.install(|| match &cli.command {
        Command::Hha(a) => cmd_hha(a, ctx),
        Command::Build(a) => cmd_build(a, ctx),
        Command::Predict(a) => cmd_predict(a, ctx),
        Command::Parse(a) => cmd_parse(a, ctx),
        Command::Evaluate(a) => cmd_evaluate(a, ctx),
    })
}

struct Context {
    cfg: CliConfig,
    config_path: Option<PathBuf>,
}

/// Sidecar written next to every output file.
#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_file: Option<String>,
    config: &'a CliConfig,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    details: serde_json::Value,
}

pub fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_meta(
    out: &Path,
    command: &'static str,
    ctx: &Context,
    details: serde_json::Value,
) -> Result<()> {
    let p = Provenance {
        tool: "gazekit",
        version: crate::VERSION,
        command,
        config_file: ctx.config_path.as_ref().map(|p| p.display().to_string()),
        config: &ctx.cfg,
        details,
    };
    ingest::write_json(&p, &meta_path(out))
}

fn exit_for(failures: usize) -> i32 {
    if failures == 0 {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

// ---------------------------------------------------------------------------
// hha
// ---------------------------------------------------------------------------

fn format_of(path: &Path) -> Option<DepthFormat> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "png" => Some(DepthFormat::Png16),
        "pfm" => Some(DepthFormat::Pfm),
        _ => None,
    }
}

fn hha_inputs(a: &HhaArgs) -> Result<Vec<(PathBuf, DepthFormat)>> {
    if a.depth.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&a.depth)
            .map_err(|e| Error::io(&a.depth, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            // skip our own outputs when writing into the input directory
            .filter(|p| !p.to_string_lossy().ends_with(".hha.png"))
            .collect();
        files.sort();
        Ok(files
            .into_iter()
            .filter_map(|p| {
                let f = format_of(&p)?;
                (a.format.is_none() || a.format == Some(f)).then_some((p, f))
            })
            .collect())
    } else if a.depth.exists() {
        let f = a.format.or_else(|| format_of(&a.depth)).ok_or_else(|| {
            Error::Config(format!(
                "cannot tell the format of {}; pass --format",
                a.depth.display()
            ))
        })?;
        Ok(vec![(a.depth.clone(), f)])
    } else {
        Err(Error::Config(format!(
            "depth input {} does not exist",
            a.depth.display()
        )))
    }
}

fn cmd_hha(a: &HhaArgs, ctx: Context) -> Result<i32> {
    if !(a.scale.is_finite() && a.scale > 0.0) {
        return Err(Error::Config(format!(
            "--scale must be positive, got {}",
            a.scale
        )));
    }
    ctx.cfg.hha.validate()?;
    let inputs = hha_inputs(a)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let results: Vec<Result<PathBuf>> = inputs
        .par_iter()
        .map(|(path, fmt)| {
            let depth = match fmt {
                DepthFormat::Png16 => ingest::load_depth_png16(path, a.scale)?,
                DepthFormat::Pfm => ingest::load_depth_pfm(path)?,
            };
            let hha = encode_hha(&depth, &ctx.cfg.hha)?;
            let name = hha_path_for(path);
            let out = a
                .out
                .join(name.file_name().expect("hha path has a file name"));
            ingest::write_hha_png(&hha, &out)?;
            Ok(out)
        })
        .collect();
    let mut ok = 0;
    let mut failed = Vec::new();
    for ((path, _), r) in inputs.iter().zip(results) {
        match r {
            Ok(out) => {
                info!("{} -> {}", path.display(), out.display());
                ok += 1;
            }
            Err(e) => {
                error!("{}: {e}", path.display());
                failed.push(path.display().to_string());
            }
        }
    }
    eprintln!("{ok} ok, {} failed", failed.len());
    write_meta(
        &a.out.join("hha"),
        "hha",
        &ctx,
        serde_json::json!({ "scale": a.scale, "ok": ok, "failed": failed }),
    )?;
    Ok(exit_for(failed.len()))
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

fn load_manifest(path: &Path) -> Result<(ingest::AnnotationLoad, usize)> {
    let load = ingest::load_annotations(path)?;
    for e in &load.errors {
        warn!("{}: {e}", path.display());
    }
    if load.clamped > 0 {
        warn!(
            "{}: clamped {} coordinates into the image",
            path.display(),
            load.clamped
        );
    }
    let n = load.errors.len();
    Ok((load, n))
}

fn with_assigned_object(
    s: &AnnotatedSample,
    dets: &DetectionSet,
    ctx: &Context,
) -> AnnotatedSample {
    let mut s = s.clone();
    if s.gazed_object.is_none() {
        if let Some(c) = s.gaze_centroid() {
            s.gazed_object =
                assign_gazed_object(&c, s.image_size, dets.get(&s.sample_id), &ctx.cfg.assign)
                    .cloned();
        }
    }
    s
}

fn cmd_build(a: &BuildArgs, ctx: Context) -> Result<i32> {
    ctx.cfg.prompt.validate()?;
    ctx.cfg.assign.validate()?;
    if a.tasks.is_empty() {
        return Err(Error::Config("--tasks is empty".into()));
    }
    let (load, mut failures) = load_manifest(&a.annotations)?;
    let manifest = load.manifest;
    let dets = match &a.detections {
        Some(p) => {
            let d = ingest::load_detections(p)?;
            for e in &d.errors {
                warn!("{}: {e}", p.display());
            }
            failures += d.errors.len();
            let mut set = d.detections;
            let moved = set.clamp_to(&manifest);
            if moved > 0 {
                warn!("{}: clamped {moved} detection boxes", p.display());
            }
            set
        }
        None => DetectionSet::default(),
    };
    let samples: Vec<AnnotatedSample> = manifest
        .samples
        .par_iter()
        .map(|s| with_assigned_object(s, &dets, &ctx))
        .collect();

    let mut by_image: BTreeMap<&Path, Vec<&AnnotatedSample>> = BTreeMap::new();
    for s in &samples {
        by_image.entry(s.image_path.as_path()).or_default().push(s);
    }
    let mut records: Vec<GazeRecord> = Vec::new();
    let mut skipped = 0;
    for task in &a.tasks {
        if *task == Task::PersonDetection {
            // one record per image, in first-appearance order
            let mut seen = std::collections::HashSet::new();
            for s in &samples {
                if seen.insert(s.image_path.as_path()) {
                    records.push(build_person_record(
                        &by_image[s.image_path.as_path()],
                        &ctx.cfg.prompt,
                    )?);
                }
            }
            continue;
        }
        let built: Vec<Result<GazeRecord>> = samples
            .par_iter()
            .map(|s| build_record(s, *task, &ctx.cfg.prompt))
            .collect();
        for (s, r) in samples.iter().zip(built) {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    info!("skipping {} for {task}: {e}", s.sample_id);
                    skipped += 1;
                }
            }
        }
    }
    ingest::write_records(&records, &a.out)?;
    eprintln!("{} records, {skipped} skipped", records.len());
    write_meta(
        &a.out,
        "build",
        &ctx,
        serde_json::json!({
            "annotations": a.annotations.display().to_string(),
            "tasks": a.tasks.iter().map(Task::as_str).collect::<Vec<_>>(),
            "records": records.len(),
            "skipped": skipped,
        }),
    )?;
    Ok(exit_for(failures))
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn cmd_predict(a: &PredictArgs, mut ctx: Context) -> Result<i32> {
    let spec = &mut ctx.cfg.predictor;
    if let Some(k) = a.kind {
        spec.kind = k;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
        ctx.cfg.seed_given = true;
    }
    if let Some(n) = a.noise {
        spec.oracle_noise_sigma = n;
    }
    if let Some(g) = a.bias_grid {
        spec.bias_grid = g;
    }
    ctx.cfg.prompt.validate()?;
    ctx.cfg.predictor.validate()?;
    let spec = ctx.cfg.predictor;
    if spec.kind == PredictorKind::Random && !ctx.cfg.seed_given {
        return Err(Error::Config(
            "--seed is required for the random predictor".into(),
        ));
    }
    let (load, failures) = load_manifest(&a.annotations)?;
    let manifest = load.manifest;

    let train = match (&a.train, spec.kind) {
        (Some(p), PredictorKind::FixedBias) => Some(load_manifest(p)?.0.manifest),
        (None, PredictorKind::FixedBias) => {
            warn!("no --train given; fitting fixed_bias on the evaluation annotations");
            None
        }
        _ => None,
    };
    let predictor = Predictor::new(&spec, Some(train.as_ref().unwrap_or(&manifest)))?;
    let preds: Vec<Prediction> = manifest
        .samples
        .par_iter()
        .map(|s| predictor.predict(s, &ctx.cfg.prompt))
        .collect::<Result<_>>()?;
    ingest::write_predictions(&preds, &a.out)?;
    eprintln!("{} predictions", preds.len());
    let bias = match &predictor {
        Predictor::FixedBias(t) => serde_json::to_value(t).expect("bias table serializes"),
        _ => serde_json::Value::Null,
    };
    write_meta(
        &a.out,
        "predict",
        &ctx,
        serde_json::json!({
            "annotations": a.annotations.display().to_string(),
            "predictions": preds.len(),
            "bias_table": bias,
        }),
    )?;
    Ok(exit_for(failures))
}

// ---------------------------------------------------------------------------
// parse
// ---------------------------------------------------------------------------

/// A response line the codec rejected.
#[derive(Debug, Serialize)]
pub struct ParseFailure {
    pub line: usize,
    pub sample_id: Option<String>,
    pub offset: Option<usize>,
    pub message: String,
}

pub fn errors_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".errors.jsonl");
    PathBuf::from(s)
}

fn cmd_parse(a: &ParseArgs, ctx: Context) -> Result<i32> {
    ctx.cfg.prompt.validate()?;
    let (lines, line_errors) = ingest::read_responses(&a.responses)?;
    let mut failures: Vec<ParseFailure> = line_errors
        .into_iter()
        .map(|e| ParseFailure {
            line: e.line,
            sample_id: None,
            offset: None,
            message: e.message,
        })
        .collect();
    let parsed: Vec<Result<Prediction>> = lines
        .par_iter()
        .map(|l| {
            let mut p = parse_response(&l.text, &ctx.cfg.prompt)?;
            p.sample_id = l.sample_id.clone();
            if let Some(t) = l.task {
                p.task = t;
            }
            p.out_score = l.out_score;
            p.validate()?;
            Ok(p)
        })
        .collect();
    let mut preds = Vec::new();
    for (i, (l, r)) in lines.iter().zip(parsed).enumerate() {
        match r {
            Ok(p) => preds.push(p),
            Err(e) => {
                let offset = match &e {
                    Error::MalformedResponse { offset, .. } => Some(*offset),
                    _ => None,
                };
                warn!("response {} ({}): {e}", i + 1, l.sample_id);
                failures.push(ParseFailure {
                    line: i + 1,
                    sample_id: Some(l.sample_id.clone()),
                    offset,
                    message: e.to_string(),
                });
            }
        }
    }
    ingest::write_predictions(&preds, &a.out)?;
    let ep = errors_path(&a.out);
    if failures.is_empty() {
        if ep.exists() {
            std::fs::remove_file(&ep).map_err(|e| Error::io(&ep, e))?;
        }
    } else {
        let mut w =
            std::io::BufWriter::new(std::fs::File::create(&ep).map_err(|e| Error::io(&ep, e))?);
        for f in &failures {
            serde_json::to_writer(&mut w, f).map_err(|e| Error::format(&ep, e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(&ep, e))?;
        }
        w.flush().map_err(|e| Error::io(&ep, e))?;
    }
    eprintln!("{} parsed, {} failed", preds.len(), failures.len());
    write_meta(
        &a.out,
        "parse",
        &ctx,
        serde_json::json!({ "parsed": preds.len(), "failed": failures.len() }),
    )?;
    Ok(exit_for(failures.len()))
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(a: &EvaluateArgs, ctx: Context) -> Result<i32> {
    ctx.cfg.prompt.validate()?;
    ctx.cfg.metrics.validate()?;
    let (preds, pred_errors) = ingest::read_predictions(&a.predictions)?;
    for e in &pred_errors {
        warn!("{}: {e}", a.predictions.display());
    }
    let (load, ann_failures) = load_manifest(&a.annotations)?;
    let mut manifest = load.manifest;
    if let Some(v) = &a.vocab {
        manifest.vocabulary = ingest::load_vocabulary(v)?;
    }
    let eval = evaluate(&preds, &manifest, &ctx.cfg.metrics, &ctx.cfg.prompt);
    for e in &eval.errors {
        warn!("{}: prediction {e}; ignored", a.predictions.display());
    }
    let name = a.name.clone().unwrap_or_else(|| {
        a.predictions
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let dataset = manifest.name.clone();
    let report = &eval.report;
    let text = match a.report {
        ReportFormat::Table => render_table(&[(&dataset, &name, report)]),
        ReportFormat::Csv => render_csv(&[(&dataset, &name, report)]),
        ReportFormat::Json => {
            let doc = serde_json::json!({
                "dataset": dataset,
                "predictor": name,
                "report": report,
                "tool": "gazekit",
                "version": crate::VERSION,
                "config": &ctx.cfg,
            });
            serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
        }
    };
    match &a.out {
        Some(p) => {
            std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            write_meta(
                p,
                "evaluate",
                &ctx,
                serde_json::to_value(report).expect("report serializes"),
            )?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(exit_for(pred_errors.len() + ann_failures))
}
