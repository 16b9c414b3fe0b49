//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 verification failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use framedistill::checks::{run_scope, Scope};
use framedistill::par::Execution;
use framedistill::synth::{
    dataset_digest, dataset_digest_in_memory, dataset_files, generate, load_dataset, save_dataset, Dataset,
    DatasetSpec,
};
use framedistill::train::ablate::run_ablation;
use framedistill::train::bench::{bench_student, bench_teacher, write_csv, BenchConfig};
use framedistill::train::checkpoint::write_atomic;
use framedistill::train::metrics::{truncate_csv, truncate_jsonl};
use framedistill::train::{
    evaluate, model_from_checkpoint, Axis, Checkpoint, EvalMode, MetricsRow, MetricsWriter, Model, Prepared, Stage,
    TrainConfig, Trainer,
};

/// Overrides the output directory of every command.
pub const OUT_ENV: &str = "FRAMEDISTILL_OUT";
pub const MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "framedistill", version, about = "Keyframe selection and Q-Former distillation on synthetic video QA")]
struct Cli {
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Run the teacher or student stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Train a matched set of student arms from one teacher.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Per-video inference latency against the frame budget.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Dataset spec JSON; defaults fill missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config JSON; defaults fill missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_default_config")]
    stage: Option<Stage>,
    /// Finished teacher checkpoint (student stage).
    #[arg(long)]
    teacher_ckpt: Option<PathBuf>,
    /// Dataset directory; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a mid-run checkpoint of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Print the default config as JSON and exit.
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// `hard` (argmax and gather) or `soft-tau` (relaxed weights at 0.01).
    #[arg(long, default_value = "hard")]
    mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    axis: Axis,
    /// Student seed offsets shared by every arm.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Shared teacher; trained first when omitted.
    #[arg(long)]
    teacher_ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Comma-separated subset of ops, prompter, qformer, end2end.
    #[arg(long, value_delimiter = ',', default_value = "ops,prompter,qformer,end2end")]
    scope: Vec<Scope>,
    /// Random instances per check.
    #[arg(long, default_value_t = 10)]
    instances: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frame counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    frames: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 200)]
    timed: usize,
    /// Also time the teacher over all frames.
    #[arg(long)]
    teacher: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Bad arguments or inputs; exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Failed checks; exit code 3.
#[derive(Debug)]
struct VerificationFailed(usize);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<VerificationFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<framedistill::Error>() {
            return match e {
                framedistill::Error::Config { .. } => 1,
                _ => 2,
            };
        }
        if cause.is::<serde_json::Error>() {
            return 1;
        }
    }
    2
}

pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Ablate(a) => ablate(a, exec),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a, exec),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

// ---- shared plumbing ----------------------------------------------------

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// SHA-256 of the running executable.
fn build_digest() -> String {
    std::env::current_exe()
        .and_then(fs::read)
        .map(|b| hex::encode(Sha256::digest(b)))
        .unwrap_or_else(|_| "unavailable".into())
}

/// `--out`, then the environment override, then the command default.
fn output_dir(flag: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(default)
}

/// Fails unless `force` when any of `files` already exists in `dir`; with
/// `force`, removes them.
fn claim_outputs(dir: &Path, files: &[String], force: bool) -> Result<()> {
    let existing: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).filter(|p| p.exists()).collect();
    if !existing.is_empty() && !force {
        return Err(usage(format!(
            "refusing to overwrite {} (pass --force)",
            existing.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    for p in existing {
        fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn intermediate_checkpoints(dir: &Path) -> Vec<String> {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.starts_with("checkpoint-step") && n.ends_with(".ckpt"))
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    config: serde_json::Value,
    build_digest: String,
    dataset_digest: Option<String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    artifacts: Vec<String>,
    status: String,
}

/// Collects what a command produced and writes the manifest at the end.
struct Run {
    command: &'static str,
    dir: PathBuf,
    started: u128,
    config: serde_json::Value,
    dataset_digest: Option<String>,
    artifacts: Vec<String>,
}

impl Run {
    fn new(command: &'static str, dir: PathBuf) -> Self {
        Self {
            command,
            dir,
            started: unix_ms(),
            config: serde_json::Value::Null,
            dataset_digest: None,
            artifacts: Vec::new(),
        }
    }

    fn artifact(&mut self, path: &Path) {
        let s = path.display().to_string();
        if !self.artifacts.contains(&s) {
            self.artifacts.push(s);
        }
    }

    fn finish<T>(self, result: Result<T>) -> Result<T> {
        let status = match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {e:#}"),
        };
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            config: self.config,
            build_digest: build_digest(),
            dataset_digest: self.dataset_digest,
            started_unix_ms: self.started,
            finished_unix_ms: unix_ms(),
            artifacts: self.artifacts,
            status,
        };
        let path = self.dir.join(MANIFEST);
        let written = serde_json::to_vec_pretty(&manifest)
            .map_err(anyhow::Error::from)
            .and_then(|bytes| write_atomic(&path, &bytes).map_err(anyhow::Error::from));
        match (result, written) {
            (Ok(v), Ok(())) => Ok(v),
            (Ok(_), Err(e)) => Err(e.context(format!("writing {}", path.display()))),
            (Err(e), _) => Err(e),
        }
    }
}

fn read_json(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => TrainConfig::from_json(&read_json(p)?).with_context(|| format!("config {}", p.display())),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

/// Loads `--data` or generates the dataset `spec` describes. Returns the
/// dataset and its digest.
fn obtain_data(path: Option<&Path>, spec: &DatasetSpec, exec: Execution) -> Result<(Dataset, String)> {
    match path {
        Some(dir) => {
            let data = load_dataset(dir).with_context(|| format!("dataset {}", dir.display()))?;
            let digest = dataset_digest(dir)?;
            Ok((data, digest))
        }
        None => {
            let data = generate(spec, exec)?;
            let digest = dataset_digest_in_memory(&data)?;
            Ok((data, digest))
        }
    }
}

/// Rejects a dataset whose frame geometry differs from the checkpoint's.
fn check_geometry(model: &DatasetSpec, data: &DatasetSpec) -> Result<()> {
    if model.frames != data.frames {
        return Err(usage(format!(
            "frame count mismatch: checkpoint expects T={}, dataset has T={}",
            model.frames, data.frames
        )));
    }
    if (model.patches, model.raw_dim) != (data.patches, data.raw_dim) {
        return Err(usage(format!(
            "frame shape mismatch: checkpoint expects [{}, {}], dataset has [{}, {}]",
            model.patches, model.raw_dim, data.patches, data.raw_dim
        )));
    }
    Ok(())
}

fn prepare(data: Dataset, cfg: &TrainConfig, exec: Execution) -> Result<Prepared> {
    let encoder = Model::new(cfg)?.encoder;
    Ok(Prepared::new(data, &encoder, exec)?)
}

// ---- commands -----------------------------------------------------------

fn gen_data(a: GenDataArgs, exec: Execution) -> Result<()> {
    let spec: DatasetSpec = match &a.spec {
        Some(p) => serde_json::from_str(&read_json(p)?).with_context(|| format!("spec {}", p.display()))?,
        None => DatasetSpec::default(),
    };
    spec.validate()?;
    let dir = output_dir(a.out, || PathBuf::new());
    if dir.as_os_str().is_empty() {
        return Err(usage(format!("gen-data needs --out or {OUT_ENV}")));
    }
    let mut files: Vec<String> = dataset_files().iter().map(|s| s.to_string()).collect();
    files.push(MANIFEST.into());
    claim_outputs(&dir, &files, a.force)?;
    let mut run = Run::new("gen-data", dir.clone());
    run.config = serde_json::to_value(&spec)?;
    let result = (|| -> Result<()> {
        let data = generate(&spec, exec)?;
        save_dataset(&data, &dir)?;
        for f in dataset_files() {
            run.artifact(&dir.join(f));
        }
        let digest = dataset_digest(&dir)?;
        println!(
            "dataset: T={} K={} train={} val={} digest {digest}",
            spec.frames, spec.keyframes, spec.num_train, spec.num_val
        );
        run.dataset_digest = Some(digest);
        Ok(())
    })();
    run.finish(result)
}

fn train(a: TrainArgs, exec: Execution) -> Result<()> {
    if a.print_default_config {
        println!("{}", serde_json::to_string_pretty(&TrainConfig::default())?);
        return Ok(());
    }
    let stage = a.stage.expect("clap enforces --stage");
    let cfg = load_config(a.config.as_deref())?;
    if stage == Stage::Student && a.teacher_ckpt.is_none() && a.resume.is_none() {
        return Err(usage("the student stage requires --teacher-ckpt"));
    }
    let dir = output_dir(a.out, || PathBuf::from(&cfg.output_dir)).join(stage.name());
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resume {
        if ck.stage != stage {
            return Err(usage(format!(
                "--resume checkpoint is from the {} stage, not {}",
                ck.stage.name(),
                stage.name()
            )));
        }
    } else {
        let mut files: Vec<String> = ["checkpoint.ckpt", "metrics.csv", "metrics.jsonl", MANIFEST]
            .iter()
            .map(|s| s.to_string())
            .collect();
        files.extend(intermediate_checkpoints(&dir));
        claim_outputs(&dir, &files, a.force)?;
    }
    fs::create_dir_all(&dir)?;
    let teacher = match (&resume, &a.teacher_ckpt) {
        (None, Some(p)) if stage == Stage::Student => Some(load_checkpoint(p)?),
        _ => None,
    };

    let mut run = Run::new("train", dir.clone());
    run.config = serde_json::to_value(&cfg)?;
    let result = (|| -> Result<()> {
        let (data, digest) = obtain_data(a.data.as_deref(), &cfg.data, exec)?;
        run.dataset_digest = Some(digest);
        let prepared = prepare(data, &cfg, exec)?;
        let mut trainer = match (&resume, stage) {
            (Some(ck), _) => Trainer::resume(&cfg, ck, &prepared, exec)?,
            (None, Stage::Teacher) => Trainer::teacher(&cfg, &prepared, exec)?,
            (None, Stage::Student) => Trainer::student(&cfg, teacher.as_ref().expect("checked above"), &prepared, exec)?,
        };
        if let Some(ck) = &resume {
            truncate_csv(&dir.join("metrics.csv"), ck.step)?;
            truncate_jsonl(&dir.join("metrics.jsonl"), ck.step)?;
            eprintln!("resuming {} stage at step {} of {}", stage.name(), ck.step, ck.total_steps);
        }
        let mut writer = MetricsWriter::open(&dir, "metrics", resume.is_some())?;
        run.artifact(&dir.join("metrics.csv"));
        run.artifact(&dir.join("metrics.jsonl"));
        let total = trainer.total_steps();
        let mut saved = Vec::new();
        let out = trainer.run(
            |row: &MetricsRow| {
                writer.write(row)?;
                if row.split == "val" {
                    eprintln!(
                        "step {}/{total}: val accuracy {:.4}{}",
                        row.step,
                        row.accuracy,
                        row.keyframe_recall.map(|r| format!(", keyframe recall {r:.4}")).unwrap_or_default()
                    );
                }
                Ok(())
            },
            |ck: &Checkpoint| {
                let name = if ck.is_complete() {
                    "checkpoint.ckpt".to_string()
                } else {
                    format!("checkpoint-step{}.ckpt", ck.step)
                };
                let path = dir.join(name);
                ck.save(&path)?;
                saved.push(path);
                Ok(())
            },
        )?;
        writer.flush()?;
        for p in &saved {
            run.artifact(p);
        }
        println!(
            "{} stage done: val accuracy {:.4}{}; checkpoint {}",
            stage.name(),
            out.accuracy,
            out.keyframe_recall.map(|r| format!(", keyframe recall {r:.4}")).unwrap_or_default(),
            dir.join("checkpoint.ckpt").display()
        );
        Ok(())
    })();
    run.finish(result)
}

#[derive(Serialize)]
struct SelectionLine<'a> {
    index: usize,
    selected: &'a [usize],
    keyframes: &'a [usize],
    prediction: usize,
    answer: usize,
}

fn eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let mode: EvalMode = a.mode.parse().map_err(|e: framedistill::Error| usage(e.to_string()))?;
    let ck = load_checkpoint(&a.ckpt)?;
    let model = model_from_checkpoint(&ck)?;
    let default_dir = a.ckpt.parent().unwrap_or(Path::new(".")).join("eval").join(&a.mode);
    let dir = output_dir(a.out, || default_dir);
    let stem = "metrics";
    let dump = "selections.jsonl";
    let files = vec![format!("{stem}.csv"), format!("{stem}.jsonl"), dump.to_string(), MANIFEST.to_string()];

    let (data, digest) = obtain_data(a.data.as_deref(), &ck.config.data, exec)?;
    check_geometry(&ck.config.data, &data.spec)?;
    claim_outputs(&dir, &files, a.force)?;
    let mut run = Run::new("eval", dir.clone());
    run.config = serde_json::to_value(&ck.config)?;
    run.dataset_digest = Some(digest);
    let result = (|| -> Result<()> {
        let prepared = Prepared::new(data, &model.encoder, exec)?;
        let out = evaluate(&model, ck.stage, &prepared, mode, exec)?;
        let mut writer = MetricsWriter::open(&dir, stem, false)?;
        writer.write(&MetricsRow::eval(ck.step, out.accuracy, out.keyframe_recall))?;
        writer.flush()?;
        run.artifact(&dir.join(format!("{stem}.csv")));
        run.artifact(&dir.join(format!("{stem}.jsonl")));
        match &out.selections {
            Some(sel) => {
                let mut text = String::new();
                for (i, (s, sample)) in sel.iter().zip(&prepared.data.val).enumerate() {
                    text.push_str(&serde_json::to_string(&SelectionLine {
                        index: i,
                        selected: s,
                        keyframes: &sample.keyframes,
                        prediction: out.predictions[i],
                        answer: sample.answer_idx,
                    })?);
                    text.push('\n');
                }
                write_atomic(&dir.join(dump), text.as_bytes())?;
                run.artifact(&dir.join(dump));
            }
            None => eprintln!(
                "warning: {} checkpoint reads every frame; keyframe recall and the selection dump are skipped",
                ck.stage.name()
            ),
        }
        println!(
            "{} checkpoint, mode {}: val accuracy {:.4}{}",
            ck.stage.name(),
            a.mode,
            out.accuracy,
            out.keyframe_recall.map(|r| format!(", keyframe recall {r:.4}")).unwrap_or_default()
        );
        Ok(())
    })();
    run.finish(result)
}

fn ablate(a: AblateArgs, exec: Execution) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    if a.seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    let dir = output_dir(a.out, || PathBuf::from(&cfg.output_dir).join("ablation"));
    let stem = format!("ablation_{}", a.axis.name());
    let mut files = vec![format!("{stem}.csv"), format!("{stem}.txt"), MANIFEST.to_string()];
    if a.teacher_ckpt.is_none() {
        files.push("teacher.ckpt".into());
    }
    let teacher = a.teacher_ckpt.as_deref().map(load_checkpoint).transpose()?;
    claim_outputs(&dir, &files, a.force)?;
    let mut run = Run::new("ablate", dir.clone());
    run.config = serde_json::to_value(&cfg)?;
    let result = (|| -> Result<()> {
        let (data, digest) = obtain_data(a.data.as_deref(), &cfg.data, exec)?;
        run.dataset_digest = Some(digest);
        let prepared = prepare(data, &cfg, exec)?;
        let teacher = match teacher {
            Some(ck) => ck,
            None => {
                eprintln!("training the shared teacher");
                let mut t = Trainer::teacher(&cfg, &prepared, exec)?;
                t.run(|_| Ok(()), |_| Ok(()))?;
                let ck = t.checkpoint();
                let path = dir.join("teacher.ckpt");
                ck.save(&path)?;
                run.artifact(&path);
                ck
            }
        };
        let teacher_model = model_from_checkpoint(&teacher)?;
        let teacher_acc = evaluate(&teacher_model, Stage::Teacher, &prepared, EvalMode::Hard, exec)?.accuracy;
        let table = run_ablation(&cfg, a.axis, &a.seeds, &prepared, &teacher, Some(teacher_acc), exec, |r| {
            eprintln!(
                "{} seed {}: accuracy {:.4}{}",
                r.arm,
                r.seed,
                r.accuracy,
                r.keyframe_recall.map(|x| format!(", recall {x:.4}")).unwrap_or_default()
            );
        })?;
        let csv = dir.join(format!("{stem}.csv"));
        table.write_csv(&csv)?;
        run.artifact(&csv);
        let text = table.render();
        let txt = dir.join(format!("{stem}.txt"));
        write_atomic(&txt, text.as_bytes())?;
        run.artifact(&txt);
        print!("{text}");
        Ok(())
    })();
    run.finish(result)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(usage("--instances must be >= 1"));
    }
    let mut failed = 0;
    for scope in &a.scope {
        let results = run_scope(*scope, a.instances)?;
        for r in &results {
            println!(
                "{:<48} max rel err {:.3e}  tol {:.0e}  {}",
                r.name,
                r.max_rel_err,
                r.tol,
                if r.passed() { "pass" } else { "FAIL" }
            );
            failed += usize::from(!r.passed());
        }
    }
    if failed > 0 {
        return Err(VerificationFailed(failed).into());
    }
    println!("all checks passed");
    Ok(())
}

fn bench(a: BenchArgs, exec: Execution) -> Result<()> {
    if a.frames.is_empty() || a.frames.contains(&0) {
        return Err(usage("--frames needs positive frame counts, e.g. 4,8,16,32"));
    }
    let ck = load_checkpoint(&a.ckpt)?;
    if ck.stage != Stage::Student {
        return Err(usage("bench needs a student checkpoint"));
    }
    let t = ck.config.data.frames;
    if let Some(bad) = a.frames.iter().find(|&&f| f > t) {
        return Err(usage(format!("--frames entry {bad} exceeds T={t}")));
    }
    let model = model_from_checkpoint(&ck)?;
    let default_dir = a.ckpt.parent().map(|p| p.join("bench")).unwrap_or_else(|| PathBuf::from("bench"));
    let dir = output_dir(a.out, || default_dir);
    claim_outputs(&dir, &["latency.csv".to_string(), MANIFEST.to_string()], a.force)?;
    let mut run = Run::new("bench", dir.clone());
    run.config = serde_json::to_value(&ck.config)?;
    let result = (|| -> Result<()> {
        let (data, digest) = obtain_data(a.data.as_deref(), &ck.config.data, exec)?;
        check_geometry(&ck.config.data, &data.spec)?;
        run.dataset_digest = Some(digest);
        let prepared = Prepared::new(data, &model.encoder, exec)?;
        let bc = BenchConfig {
            batch_size: a.batch_size,
            warmup_batches: a.warmup,
            timed_batches: a.timed,
        };
        let mut rows = bench_student(&model, &prepared, &a.frames, &bc)?;
        if a.teacher {
            rows.push(bench_teacher(&model, &prepared, &bc)?);
        }
        let path = dir.join("latency.csv");
        write_csv(&rows, &path)?;
        run.artifact(&path);
        println!("{:<8} {:>6} {:>10} {:>10} {:>10} {:>8}", "pipeline", "frames", "median_ms", "p95_ms", "mean_ms", "speedup");
        for r in &rows {
            println!(
                "{:<8} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>7.2}x",
                r.pipeline, r.frames, r.median_ms, r.p95_ms, r.mean_ms, r.speedup_vs_max
            );
        }
        let (lo, hi) = (a.frames.iter().min().copied(), a.frames.iter().max().copied());
        if let (Some(lo), Some(hi)) = (lo, hi) {
            let median = |f: usize| rows.iter().find(|r| r.pipeline == "student" && r.frames == f).map(|r| r.median_ms);
            if let (Some(l), Some(h)) = (median(lo), median(hi)) {
                println!("speedup {lo} vs {hi} frames: {:.2}x", h / l);
            }
        }
        Ok(())
    })();
    run.finish(result)
}
