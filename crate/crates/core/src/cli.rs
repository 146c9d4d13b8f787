//! Command-line surface. [`dispatch`] maps argv to an exit code:
//! 0 success, 1 validation error, 2 runtime or numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::data::{generate_synthetic, split_subject_independent, Dataset, SyntheticConfig};
use crate::encoder::BackboneKind;
use crate::error::{Error, Result};
use crate::gradcheck::{run_grad_check, GradCheckConfig, TOLERANCE};
use crate::inference::{
    classify_batch, classify_caption, embed_samples, manipulate, summarize_manipulations, write_embeddings_csv,
    write_manipulation_csv,
};
use crate::losses::DenominatorMode;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Model;
use crate::schema::TaskSchema;
use crate::trainer::{Checkpoint, RunOptions, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "stylespace", version, about = "Disentangled speaking-style embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic multi-factor dataset as JSONL.
    GenSynthetic(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Per-task balanced accuracy, macro and weighted F1.
    Eval(EvalArgs),
    /// Per-task nearest-prototype predictions for every sample.
    Classify(ClassifyArgs),
    /// Classify style captions against the prototypes.
    ClassifyCaption(CaptionArgs),
    /// Move one task slice of each style vector onto a target prototype.
    Manipulate(ManipulateArgs),
    /// Export META and task embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Compare analytic and finite-difference gradients of every loss.
    GradCheck(GradCheckArgs),
    /// Parameter counts per model section.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss log; defaults to the checkpoint path with a `.losses.csv` suffix.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Hold out this share of subjects (split seeded by --seed).
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub dim_meta: Option<usize>,
    #[arg(long)]
    pub dim_task: Option<usize>,
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    #[arg(long)]
    pub denominator_mode: Option<DenominatorMode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Optional; must match the checkpoint schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Evaluate only the held-out subjects of this split.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Number of held-out splits, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics JSON; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(required = true)]
    pub captions: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Task name; all tasks when omitted.
    #[arg(long)]
    pub task: Option<String>,
    /// Class name; all classes of the task when omitted.
    #[arg(long)]
    pub target_class: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Report CSV (task, orig_sim, manip_sim, accuracy); standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the manipulated style vectors.
    #[arg(long)]
    pub style_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Tag rows as train/test using this subject split.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long, default_value_t = BackboneKind::FrameMlp)]
    pub backbone: BackboneKind,
    #[arg(long, default_value_t = 5)]
    pub batches: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Parses and runs; errors go to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes one command, writing machine output to `out`.
pub fn run(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Classify(a) => classify_cmd(a, out),
        Command::ClassifyCaption(a) => caption_cmd(a, out),
        Command::Manipulate(a) => manipulate_cmd(a, out),
        Command::ExportEmbeddings(a) => export(a),
        Command::GradCheck(a) => grad_check(a, out),
        Command::Stats(a) => stats(a, out),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Resolved settings written next to a CSV artifact.
fn write_provenance(artifact: &Path, value: &impl Serialize) -> Result<()> {
    let path = sidecar(artifact, ".provenance.json");
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn gen_synthetic(a: GenArgs) -> Result<i32> {
    let schema = TaskSchema::load(&a.schema)?;
    let mut cfg: SyntheticConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.n {
        cfg.samples = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.subjects {
        cfg.subjects = v;
    }
    if let Some(v) = a.bins {
        cfg.bins = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    let data = generate_synthetic(&schema, &cfg)?;
    data.write_jsonl(&a.out)?;
    write_provenance(&a.out, &json!({ "command": "gen-synthetic", "config": cfg }))?;
    Ok(0)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    macro_rules! set {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag.clone() {
                cfg.$field = v;
            }
        };
    }
    set!(a.seed, seed);
    set!(a.steps, max_steps);
    set!(a.batch_size, batch_size);
    set!(a.lr, learning_rate);
    set!(a.tau, tau);
    set!(a.momentum, momentum);
    set!(a.dim_meta, meta_dim);
    set!(a.dim_task, task_dim);
    set!(a.backbone, backbone);
    set!(a.denominator_mode, denominator_mode);
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let schema = TaskSchema::load(&a.schema)?;
    let data = Dataset::load_jsonl(&a.data, &schema)?;
    let cfg = resolve_train_config(&a)?;
    let data = match a.test_fraction {
        Some(f) => split_subject_independent(&data, f, cfg.seed)?.0,
        None => data,
    };
    let bins = data.bins().ok_or_else(|| Error::Config("training data is empty".into()))?;
    let mut trainer = match &a.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.schema != schema {
                return Err(Error::schema("checkpoint schema differs from --schema"));
            }
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            t.config.max_steps = cfg.max_steps;
            t.config.validate()?;
            t
        }
        None => Trainer::new(&schema, bins, cfg)?,
    };
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| sidecar(&a.out, ".losses.csv"));
    let records = trainer.run(
        &data,
        &RunOptions {
            loss_csv: Some(loss_csv.clone()),
            checkpoint_path: Some(a.out.clone()),
        },
    )?;
    write_provenance(
        &loss_csv,
        &json!({ "command": "train", "config": trainer.config, "test_fraction": a.test_fraction }),
    )?;
    if let Some(last) = records.last() {
        emit(out, &format!("step {} total {:.6}\n", last.step, last.losses.total))?;
    }
    Ok(0)
}

fn load_model(checkpoint: &Path, schema: Option<&Path>) -> Result<(Checkpoint, Model)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(p) = schema {
        if TaskSchema::load(p)? != ckpt.schema {
            return Err(Error::schema("--schema differs from the checkpoint schema"));
        }
    }
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    if a.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    if a.runs > 1 && a.test_fraction.is_none() {
        return Err(Error::Config("--runs above 1 needs --test-fraction".into()));
    }
    let (ckpt, model) = load_model(&a.checkpoint, a.schema.as_deref())?;
    let data = Dataset::load_jsonl(&a.data, &model.schema)?;
    let mut per_run = Vec::with_capacity(a.runs);
    for r in 0..a.runs as u64 {
        let test = match a.test_fraction {
            Some(f) => split_subject_independent(&data, f, a.seed + r)?.1,
            None => data.clone(),
        };
        per_run.push(evaluate(&model, &test)?);
    }
    let mut report = MetricsReport::from_runs(per_run)?;
    report.config = Some(json!({
        "command": "eval",
        "checkpoint": a.checkpoint,
        "data": a.data,
        "test_fraction": a.test_fraction,
        "runs": a.runs,
        "seed": a.seed,
        "train_config": ckpt.config,
    }));
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("metrics", e))? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => emit(out, &text)?,
    }
    Ok(0)
}

fn classify_cmd(a: ClassifyArgs, out: &mut dyn Write) -> Result<i32> {
    let (_, model) = load_model(&a.checkpoint, a.schema.as_deref())?;
    let data = Dataset::load_jsonl(&a.data, &model.schema)?;
    let frames: Vec<_> = data.samples().iter().map(|s| &s.frames).collect();
    let preds = classify_batch(&model, &frames)?;
    let schema = &model.schema;
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    for t in 0..schema.num_tasks() {
        header.push(format!("{}_class", schema.task_name(t)));
        header.push(format!("{}_score", schema.task_name(t)));
    }
    w.write_record(&header)?;
    for (s, p) in data.samples().iter().zip(&preds) {
        let mut rec = vec![s.id.clone()];
        for (t, q) in p.iter().enumerate() {
            rec.push(schema.class_name(t, q.class).to_string());
            rec.push(format!("{:.8e}", q.score));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_output(a.out.as_deref(), &bytes, out)?;
    if let Some(p) = &a.out {
        write_provenance(p, &json!({ "command": "classify", "checkpoint": a.checkpoint, "data": a.data }))?;
    }
    Ok(0)
}

fn write_output(path: Option<&Path>, bytes: &[u8], out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::io(p, e)),
        None => out.write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn caption_cmd(a: CaptionArgs, out: &mut dyn Write) -> Result<i32> {
    let (_, model) = load_model(&a.checkpoint, None)?;
    let mut results = Vec::with_capacity(a.captions.len());
    for c in &a.captions {
        results.push(classify_caption(&model, c)?);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["caption", "task", "class", "score"])?;
    for (caption, preds) in a.captions.iter().zip(&results) {
        for (t, p) in preds.iter().enumerate() {
            let (class, score) = match p {
                Some(p) => (model.schema.class_name(t, p.class).to_string(), format!("{:.8e}", p.score)),
                None => ("absent".to_string(), String::new()),
            };
            w.write_record([caption.as_str(), model.schema.task_name(t), &class, &score])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_output(None, &bytes, out)?;
    Ok(0)
}

fn manipulate_cmd(a: ManipulateArgs, out: &mut dyn Write) -> Result<i32> {
    let (_, model) = load_model(&a.checkpoint, a.schema.as_deref())?;
    let schema = model.schema.clone();
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::Config(format!("--alpha must lie in [0, 1], got {}", a.alpha)));
    }
    let tasks: Vec<usize> = match &a.task {
        Some(name) => vec![schema
            .task_index(name)
            .ok_or_else(|| Error::Config(format!("unknown task '{name}'")))?],
        None => {
            if a.target_class.is_some() {
                return Err(Error::Config("--target-class needs --task".into()));
            }
            (0..schema.num_tasks()).collect()
        }
    };
    let mut pairs = Vec::new();
    for &t in &tasks {
        match &a.target_class {
            Some(name) => pairs.push((
                t,
                schema
                    .class_index(t, name)
                    .ok_or_else(|| Error::Config(format!("unknown class '{name}' for task '{}'", schema.task_name(t))))?,
            )),
            None => pairs.extend((0..schema.num_classes(t)).map(|c| (t, c))),
        }
    }
    let data = Dataset::load_jsonl(&a.data, &schema)?;
    let mut reports = Vec::new();
    let mut styles = Vec::new();
    for &(t, c) in &pairs {
        for s in data.samples() {
            let (style, report) = manipulate(&model, &s.frames, t, c, a.alpha)?;
            reports.push(report);
            styles.push((s.id.clone(), t, c, style));
        }
    }
    let summary = summarize_manipulations(&schema, &reports);
    let prov = json!({
        "command": "manipulate",
        "checkpoint": a.checkpoint,
        "data": a.data,
        "alpha": a.alpha,
        "task": a.task,
        "target_class": a.target_class,
    });
    match &a.out {
        Some(p) => {
            write_manipulation_csv(std::fs::File::create(p).map_err(|e| Error::io(p, e))?, &summary)?;
            write_provenance(p, &prov)?;
        }
        None => write_manipulation_csv(&mut *out, &summary)?,
    }
    if let Some(p) = &a.style_out {
        let mut w = csv::Writer::from_writer(std::fs::File::create(p).map_err(|e| Error::io(p, e))?);
        let mut header = vec!["id".to_string(), "task".to_string(), "target_class".to_string()];
        for t in 0..schema.num_tasks() {
            header.extend((0..model.task_dim()).map(|k| format!("{}_{k}", schema.task_name(t))));
        }
        w.write_record(&header)?;
        for (id, t, c, style) in &styles {
            let mut rec = vec![id.clone(), schema.task_name(*t).to_string(), schema.class_name(*t, *c).to_string()];
            rec.extend(style.concat().iter().map(|v| format!("{v:.8e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
        write_provenance(p, &prov)?;
    }
    Ok(0)
}

fn export(a: ExportArgs) -> Result<i32> {
    let (_, model) = load_model(&a.checkpoint, a.schema.as_deref())?;
    let data = Dataset::load_jsonl(&a.data, &model.schema)?;
    let mut rows = Vec::new();
    match a.test_fraction {
        Some(f) => {
            let (train, test) = split_subject_independent(&data, f, a.seed)?;
            rows.extend(embed_samples(&model, &train.samples().iter().collect::<Vec<_>>(), "train")?);
            rows.extend(embed_samples(&model, &test.samples().iter().collect::<Vec<_>>(), "test")?);
        }
        None => rows.extend(embed_samples(&model, &data.samples().iter().collect::<Vec<_>>(), "all")?),
    }
    let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_embeddings_csv(file, &model.schema, model.meta_dim(), model.task_dim(), &rows)?;
    write_provenance(
        &a.out,
        &json!({
            "command": "export-embeddings",
            "checkpoint": a.checkpoint,
            "data": a.data,
            "test_fraction": a.test_fraction,
            "seed": a.seed,
        }),
    )?;
    Ok(0)
}

fn grad_check(a: GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = GradCheckConfig {
        seed: a.seed,
        backbone: a.backbone,
        batches: a.batches,
        ..Default::default()
    };
    let report = run_grad_check(&cfg)?;
    let mut text = String::new();
    for (c, e) in &report.max_rel_error {
        text.push_str(&format!("{c}\t{e:.3e}\n"));
    }
    emit(out, &text)?;
    Ok(if report.passed(TOLERANCE) { 0 } else { 2 })
}

fn stats(a: StatsArgs, out: &mut dyn Write) -> Result<i32> {
    let (_, model) = load_model(&a.checkpoint, None)?;
    let encoder = model.encoder.count_parameters();
    let heads = model.heads.count_parameters();
    let caption = model.caption.count_parameters();
    let prototypes: usize = (0..model.schema.num_tasks())
        .map(|t| model.bank.task(t).len())
        .sum();
    let v = json!({
        "backbone": model.encoder.shape.kind,
        "encoder": encoder,
        "projection_heads": heads,
        "caption_encoder": caption,
        "trainable": encoder + heads + caption,
        "prototypes": prototypes,
    });
    let text = serde_json::to_string_pretty(&v).map_err(|e| Error::json("stats", e))? + "\n";
    emit(out, &text)?;
    Ok(0)
}
