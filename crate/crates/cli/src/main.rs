//! `survtune`: desk-scale driver for the survival instruction-tuning
//! pipeline — data preparation, synthetic cohorts, both training stages,
//! evaluation, and gradient verification.
//!
//! Exit codes are a stable contract: 0 success, 1 usage error, 2 data
//! error, 3 numeric failure (a non-finite loss aborts training, writes the
//! last good parameters, and exits 3). Every artifact-producing command
//! finishes by atomically writing a `manifest.json` naming its outputs.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use survtune_core::dataprep::{
    build_time_grid, default_stoplist, default_templates, extract_answers, generate_synth_cohort,
    preprocess_volume, read_qa_jsonl, read_reports_jsonl, read_templates, read_volume,
    word_frequency, write_qa_jsonl, write_reports_jsonl, write_volume, write_word_freq_csv,
    DataError, QAPair, ReportRecord, SynthCohortConfig, VolumeMeta, DESK_TARGET_SPACING,
    DESK_VOLUME_DIMS,
};
use survtune_core::eval::{eval_patients, evaluate, write_eval_outputs, EvalError};
use survtune_core::exec;
use survtune_core::losses::{default_sigma, TimeGrid};
use survtune_core::model::{
    init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelError, ModelParams,
    ParamGroup, Tokenizer,
};
use survtune_core::survstats::{write_cohort_csv, SurvStatsError, SurvivalRecord};
use survtune_core::train::{
    build_dataset, build_tokenizer, load_opt_state, read_train_config, run_stage1, run_stage2,
    save_opt_state, AdamW, LossSelector, Stage, StepMetrics, TrainConfig, TrainData, TrainError,
    TrainSink,
};

/// Vocabulary cap for tokenizers fitted from a corpus.
const MAX_VOCAB: usize = 512;
/// Rows written to `word_freq.csv`.
const WORD_FREQ_TOP_K: usize = 100;
/// Bump when any output file format changes.
const ARTIFACT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "survtune",
    version,
    about = "Desk-scale multimodal survival-prediction training pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the command (required by synth, pretrain, finetune).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 keeps the library default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose reports into QA pairs and rank the report vocabulary.
    PrepareData {
        /// Input reports JSONL.
        #[arg(long)]
        reports: PathBuf,
        /// Question templates JSON; defaults to the built-in six.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Generate a synthetic cohort with a known risk law.
    Synth,
    /// Stage 1: visual-instruction pre-training (projection + decoder).
    Pretrain {
        /// Cohort directory (reports.jsonl + volumes/, optional qa.jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Continue a run from this checkpoint and its `.opt` sidecar.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's total_steps (warmup is clamped to fit).
        #[arg(long)]
        total_steps: Option<u64>,
    },
    /// Stage 2: joint survival fine-tuning (decoder + adaptor + head).
    Finetune {
        /// Cohort directory (reports.jsonl + volumes/, optional qa.jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Start from fresh weights instead of a stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Continue a run from this checkpoint and its `.opt` sidecar.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's total_steps (warmup is clamped to fit).
        #[arg(long)]
        total_steps: Option<u64>,
    },
    /// Score a checkpoint on a labeled cohort.
    Evaluate {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort directory (reports.jsonl + volumes/, optional qa.jsonl).
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify tape gradients against central finite differences.
    Gradcheck {
        /// Random configurations per loss.
        #[arg(long, default_value_t = 10)]
        trials: u64,
    },
}

// ── error classification ───────────────────────────────────────────────────

/// Errors bucketed by exit code: usage 1, data 2, numeric 3.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

macro_rules! data_errors {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(DataError, ModelError, EvalError, SurvStatsError, std::io::Error, serde_json::Error);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ── manifest ───────────────────────────────────────────────────────────────

/// Provenance record written atomically as the last act of a run. The
/// timestamps are the only fields expected to differ between identical
/// re-runs.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    inputs: Vec<String>,
    out_dir: String,
    seed: Option<u64>,
    artifact_version: u32,
    started_unix: u64,
    finished_unix: u64,
    outputs: Vec<String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock before 1970")
        .as_secs()
}

/// Tracks files written under the output directory, by relative path.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Registers `rel` as an output and returns its absolute path.
    fn path(&mut self, rel: &str) -> PathBuf {
        self.files.push(rel.to_string());
        self.dir.join(rel)
    }

    /// Writes `manifest.json` via a temp-file rename. Every named output
    /// must already exist on disk.
    fn finish(
        mut self,
        command: &str,
        config: Option<&Path>,
        inputs: &[&Path],
        seed: Option<u64>,
        started_unix: u64,
    ) -> Result<(), CliError> {
        self.files.sort();
        for rel in &self.files {
            let path = self.dir.join(rel);
            if !path.exists() {
                return Err(CliError::Data(format!(
                    "internal: manifest names missing output `{rel}`"
                )));
            }
        }
        let manifest = RunManifest {
            command: command.to_string(),
            config: config.map(|p| p.display().to_string()),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            out_dir: self.dir.display().to_string(),
            seed,
            artifact_version: ARTIFACT_VERSION,
            started_unix,
            finished_unix: unix_now(),
            outputs: self.files,
        };
        let tmp = self.dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        std::fs::rename(&tmp, self.dir.join("manifest.json"))?;
        Ok(())
    }
}

// ── shared loading ─────────────────────────────────────────────────────────

struct Corpus {
    reports: Vec<ReportRecord>,
    qa: Vec<QAPair>,
    volumes: HashMap<String, Vec<f64>>,
}

/// Loads a cohort directory: `reports.jsonl`, one volume per scan under
/// `volumes/`, and `qa.jsonl` when present (otherwise QA pairs come from
/// the built-in templates). Volumes are preprocessed to the desk shape.
fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    let reports = read_reports_jsonl(&dir.join("reports.jsonl"))?;
    if reports.is_empty() {
        return Err(CliError::Data(format!(
            "no reports in {}",
            dir.join("reports.jsonl").display()
        )));
    }
    let qa_path = dir.join("qa.jsonl");
    let qa = if qa_path.exists() {
        read_qa_jsonl(&qa_path)?
    } else {
        let templates = default_templates();
        reports
            .iter()
            .flat_map(|r| extract_answers(r, &templates))
            .collect()
    };
    let prepped: Vec<Result<(String, Vec<f64>), DataError>> = exec::par_map(&reports, |rec| {
        let (raw, meta) = read_volume(&dir.join("volumes").join(&rec.scan_id))?;
        let volume = preprocess_volume(&raw, &meta, DESK_VOLUME_DIMS, DESK_TARGET_SPACING)?;
        Ok((rec.scan_id.clone(), volume))
    });
    let volumes = prepped
        .into_iter()
        .collect::<Result<HashMap<_, _>, _>>()?;
    Ok(Corpus {
        reports,
        qa,
        volumes,
    })
}

fn assemble(corpus: &Corpus, tok: &Tokenizer, params: &ModelParams) -> Result<TrainData, CliError> {
    Ok(build_dataset(
        &corpus.reports,
        &corpus.qa,
        &corpus.volumes,
        DESK_VOLUME_DIMS,
        tok,
        params,
    )?)
}

fn labeled_records(data: &TrainData) -> Vec<SurvivalRecord> {
    data.patients
        .iter()
        .filter_map(|p| p.record.clone())
        .collect()
}

/// Reads the train config, applies CLI overrides, and checks the stage.
fn resolve_train_config(
    cli: &Cli,
    command: &str,
    stage: Stage,
    total_steps: Option<u64>,
) -> Result<(TrainConfig, PathBuf), CliError> {
    let path = cli
        .config
        .clone()
        .ok_or_else(|| usage(format!("{command} requires --config <path>")))?;
    let mut cfg = read_train_config(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(total) = total_steps {
        cfg.total_steps = total;
        cfg.warmup_steps = cfg.warmup_steps.min(total);
    }
    if cfg.stage != stage {
        return Err(CliError::Data(format!(
            "config stage is {:?} but the command runs {:?}",
            cfg.stage, stage
        )));
    }
    cfg.validate()?;
    Ok((cfg, path))
}

fn require_out(cli: &Cli, command: &str) -> Result<PathBuf, CliError> {
    cli.out
        .clone()
        .ok_or_else(|| usage(format!("{command} requires --out <dir>")))
}

// ── training sink ──────────────────────────────────────────────────────────

/// Streams metrics to `metrics.jsonl` and keeps `latest.ckpt`/`latest.opt`
/// fresh at every checkpoint cadence; warnings go to stderr.
struct FileSink {
    dir: PathBuf,
    vocab: Vec<String>,
    seed: u64,
    grid: Option<TimeGrid>,
    sigma: Option<f64>,
    metrics: std::io::BufWriter<std::fs::File>,
    io_error: Option<std::io::Error>,
}

impl FileSink {
    fn new(
        outputs: &mut Outputs,
        vocab: Vec<String>,
        seed: u64,
        grid: Option<TimeGrid>,
        sigma: Option<f64>,
    ) -> Result<Self, CliError> {
        let metrics_path = outputs.path("metrics.jsonl");
        Ok(FileSink {
            dir: outputs.dir.clone(),
            vocab,
            seed,
            grid,
            sigma,
            metrics: std::io::BufWriter::new(std::fs::File::create(metrics_path)?),
            io_error: None,
        })
    }

    fn close(mut self) -> Result<(), CliError> {
        if let Err(e) = self.metrics.flush() {
            self.io_error.get_or_insert(e);
        }
        match self.io_error {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

impl TrainSink for FileSink {
    fn metrics(&mut self, m: &StepMetrics) {
        if self.io_error.is_some() {
            return;
        }
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(self.metrics, "{line}") {
            self.io_error = Some(e);
        }
    }

    fn checkpoint(
        &mut self,
        step: u64,
        params: &ModelParams,
        opt: &AdamW,
    ) -> Result<(), TrainError> {
        save_checkpoint(
            &self.dir.join("latest.ckpt"),
            params,
            &self.vocab,
            self.seed,
            step,
            self.grid.as_ref(),
            self.sigma,
        )?;
        save_opt_state(&self.dir.join("latest.opt"), opt)?;
        Ok(())
    }

    fn warn(&mut self, msg: &str) {
        eprintln!("warning: {msg}");
    }
}

/// Everything a resumed run needs: parameters, tokenizer, optimizer state,
/// the step to continue from, and the stored time grid and sigma.
type ResumeState = (ModelParams, Tokenizer, AdamW, u64, Option<TimeGrid>, Option<f64>);

/// Loads a checkpoint plus its optimizer sidecar for `--resume`, checking
/// that the two agree and that the run config matches the stored model.
fn load_resume(ckpt: &Path, cfg: &TrainConfig) -> Result<ResumeState, CliError> {
    let (params, meta) = load_checkpoint(ckpt)?;
    check_head(&meta.config, cfg)?;
    let opt = load_opt_state(&ckpt.with_extension("opt"))?;
    if opt.step != meta.step {
        return Err(CliError::Data(format!(
            "optimizer sidecar is at step {} but checkpoint is at step {}",
            opt.step, meta.step
        )));
    }
    for (slot, &group) in opt.moments.iter().zip(ParamGroup::ALL.iter()) {
        if let Some((m, _)) = slot {
            if m.len() != params.group(group).len() {
                return Err(CliError::Data(format!(
                    "optimizer sidecar does not fit the checkpoint: group {group:?} has {} \
                     parameters but {} moment entries",
                    params.group(group).len(),
                    m.len()
                )));
            }
        }
    }
    let tok = Tokenizer::from_vocab(meta.vocab);
    Ok((params, tok, opt, meta.step, meta.time_grid, meta.sigma))
}

/// The config's head choice must match the checkpoint's model; everything
/// else about the shape is validated by the checkpoint loader itself.
fn check_head(model: &ModelConfig, cfg: &TrainConfig) -> Result<(), CliError> {
    if model.head != cfg.head_kind() {
        return Err(CliError::Data(format!(
            "checkpoint head {:?} does not match config head {:?}",
            model.head,
            cfg.head_kind()
        )));
    }
    Ok(())
}

/// Persists the pre-failure parameters after a non-finite loss so the run
/// can be inspected, then reports the numeric failure.
fn handle_nan(
    err: TrainError,
    outputs: &mut Outputs,
    vocab: &[String],
    seed: u64,
    grid: Option<&TimeGrid>,
    sigma: Option<f64>,
) -> CliError {
    match err {
        TrainError::NonFinite { step, last_good } => {
            let path = outputs.path("last_good.ckpt");
            if let Err(e) = save_checkpoint(&path, &last_good, vocab, seed, step, grid, sigma) {
                return CliError::Numeric(format!(
                    "non-finite loss at step {step}; saving last good parameters also failed: {e}"
                ));
            }
            CliError::Numeric(format!(
                "non-finite loss at step {step}; last good parameters written to {}",
                path.display()
            ))
        }
        other => other.into(),
    }
}

// ── commands ───────────────────────────────────────────────────────────────

fn cmd_prepare_data(
    cli: &Cli,
    reports_path: &Path,
    templates_path: Option<&Path>,
) -> Result<(), CliError> {
    let started = unix_now();
    let out = require_out(cli, "prepare-data")?;
    let reports = read_reports_jsonl(reports_path)?;
    if reports.is_empty() {
        return Err(CliError::Data(format!(
            "no reports in {}",
            reports_path.display()
        )));
    }
    let templates = match templates_path {
        Some(p) => read_templates(p)?,
        None => default_templates(),
    };
    let qa: Vec<QAPair> = reports
        .iter()
        .flat_map(|r| extract_answers(r, &templates))
        .collect();
    let ranked = word_frequency(&reports, &default_stoplist(), WORD_FREQ_TOP_K);

    let mut outputs = Outputs::new(&out)?;
    write_qa_jsonl(&outputs.path("qa.jsonl"), &qa)?;
    write_word_freq_csv(&outputs.path("word_freq.csv"), &ranked)?;
    println!(
        "prepare-data: {} reports -> {} QA pairs, {} ranked words",
        reports.len(),
        qa.len(),
        ranked.len()
    );
    let mut inputs = vec![reports_path];
    if let Some(p) = templates_path {
        inputs.push(p);
    }
    outputs.finish("prepare-data", None, &inputs, None, started)
}

fn cmd_synth(cli: &Cli) -> Result<(), CliError> {
    let started = unix_now();
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| usage("synth requires --config <path>"))?;
    let out = require_out(cli, "synth")?;
    let mut cfg: SynthCohortConfig =
        serde_json::from_str(&std::fs::read_to_string(&config_path)?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cohort = generate_synth_cohort(&cfg)?;

    let mut outputs = Outputs::new(&out)?;
    std::fs::create_dir_all(out.join("volumes"))?;
    write_reports_jsonl(&outputs.path("reports.jsonl"), &cohort.reports)?;
    write_cohort_csv(&outputs.path("cohort.csv"), &cohort.records)?;
    let mut risks_csv = String::from("patient_id,log_risk\n");
    for (rec, risk) in cohort.records.iter().zip(&cohort.oracle_risks) {
        risks_csv.push_str(&format!("{},{}\n", rec.patient_id, risk));
    }
    std::fs::write(outputs.path("oracle_risks.csv"), risks_csv)?;
    let meta = VolumeMeta {
        dims: cohort.dims,
        spacing_mm: cohort.spacing_mm,
    };
    for (rec, volume) in cohort.reports.iter().zip(&cohort.volumes) {
        let base = outputs.dir.join("volumes").join(&rec.scan_id);
        write_volume(&base, volume, &meta)?;
        outputs.files.push(format!("volumes/{}.json", rec.scan_id));
        outputs.files.push(format!("volumes/{}.raw", rec.scan_id));
    }
    let censored = cohort.records.iter().filter(|r| !r.event).count();
    println!(
        "synth: {} patients ({} censored), oracle c-index ceiling {:.4}",
        cohort.records.len(),
        censored,
        cohort.oracle_ceiling()
    );
    outputs.finish("synth", Some(&config_path), &[], Some(cfg.seed), started)
}

fn cmd_pretrain(
    cli: &Cli,
    data_dir: &Path,
    resume: Option<&Path>,
    total_steps: Option<u64>,
) -> Result<(), CliError> {
    let started = unix_now();
    let (cfg, config_path) = resolve_train_config(cli, "pretrain", Stage::Pretrain, total_steps)?;
    let out = require_out(cli, "pretrain")?;
    let corpus = load_corpus(data_dir)?;

    let (params, tok, opt, start_step) = match resume {
        Some(ckpt) => {
            let (params, tok, opt, step, _, _) = load_resume(ckpt, &cfg)?;
            (params, tok, Some(opt), step)
        }
        None => {
            let tok = build_tokenizer(&corpus.reports, &corpus.qa, MAX_VOCAB);
            let config = ModelConfig::desk(tok.len(), cfg.head_kind());
            (init_params(&config, cfg.seed), tok, None, 0)
        }
    };
    let data = assemble(&corpus, &tok, &params)?;

    let mut outputs = Outputs::new(&out)?;
    let vocab = tok.vocab().to_vec();
    let mut sink = FileSink::new(&mut outputs, vocab.clone(), cfg.seed, None, None)?;
    let (params, opt) = match run_stage1(&data, params, &cfg, opt, start_step, &mut sink) {
        Ok(done) => done,
        Err(e) => return Err(handle_nan(e, &mut outputs, &vocab, cfg.seed, None, None)),
    };
    sink.close()?;

    save_checkpoint(
        &outputs.path("stage1.ckpt"),
        &params,
        &vocab,
        cfg.seed,
        cfg.total_steps,
        None,
        None,
    )?;
    save_opt_state(&outputs.path("stage1.opt"), &opt)?;
    outputs.files.push("latest.ckpt".into());
    outputs.files.push("latest.opt".into());
    println!(
        "pretrain: {} steps over {} samples -> stage1.ckpt",
        cfg.total_steps.saturating_sub(start_step),
        data.samples.len()
    );
    outputs.finish(
        "pretrain",
        Some(&config_path),
        &[data_dir],
        Some(cfg.seed),
        started,
    )
}

fn cmd_finetune(
    cli: &Cli,
    data_dir: &Path,
    from: Option<&Path>,
    from_scratch: bool,
    resume: Option<&Path>,
    total_steps: Option<u64>,
) -> Result<(), CliError> {
    let started = unix_now();
    let (cfg, config_path) = resolve_train_config(cli, "finetune", Stage::Finetune, total_steps)?;
    let out = require_out(cli, "finetune")?;
    if from.is_none() && !from_scratch && resume.is_none() {
        return Err(usage(
            "finetune needs a stage-1 checkpoint (--from <ckpt>) or an explicit --from-scratch",
        ));
    }
    let corpus = load_corpus(data_dir)?;

    let (params, tok, opt, start_step, mut grid, mut sigma) = match (resume, from) {
        (Some(ckpt), _) => {
            let (params, tok, opt, step, grid, sigma) = load_resume(ckpt, &cfg)?;
            (params, tok, Some(opt), step, grid, sigma)
        }
        (None, Some(ckpt)) => {
            let (params, meta) = load_checkpoint(ckpt)?;
            check_head(&meta.config, &cfg)?;
            let tok = Tokenizer::from_vocab(meta.vocab);
            (params, tok, None, 0, None, None)
        }
        (None, None) => {
            let tok = build_tokenizer(&corpus.reports, &corpus.qa, MAX_VOCAB);
            let config = ModelConfig::desk(tok.len(), cfg.head_kind());
            (init_params(&config, cfg.seed), tok, None, 0, None, None)
        }
    };
    let data = assemble(&corpus, &tok, &params)?;
    let records = labeled_records(&data);
    if records.is_empty() {
        return Err(CliError::Data(
            "finetune cohort has no survival-labeled patients".into(),
        ));
    }
    // A resumed run carries grid and sigma in its checkpoint; a fresh run
    // derives them from the cohort before the first step.
    if grid.is_none() && cfg.head == survtune_core::train::HeadChoice::Discrete {
        grid = Some(build_time_grid(&records, cfg.k_bins)?);
    }
    if sigma.is_none() {
        sigma = Some(cfg.sigma.unwrap_or_else(|| default_sigma(&records)));
    }
    let run_cfg = TrainConfig {
        sigma,
        ..cfg.clone()
    };

    let mut outputs = Outputs::new(&out)?;
    let vocab = tok.vocab().to_vec();
    let mut sink = FileSink::new(&mut outputs, vocab.clone(), cfg.seed, grid.clone(), sigma)?;
    let result = run_stage2(&data, grid.as_ref(), params, &run_cfg, opt, start_step, &mut sink);
    let (params, opt) = match result {
        Ok(done) => done,
        Err(e) => {
            return Err(handle_nan(
                e,
                &mut outputs,
                &vocab,
                cfg.seed,
                grid.as_ref(),
                sigma,
            ))
        }
    };
    sink.close()?;

    save_checkpoint(
        &outputs.path("stage2.ckpt"),
        &params,
        &vocab,
        cfg.seed,
        cfg.total_steps,
        grid.as_ref(),
        sigma,
    )?;
    save_opt_state(&outputs.path("stage2.opt"), &opt)?;
    outputs.files.push("latest.ckpt".into());
    outputs.files.push("latest.opt".into());
    println!(
        "finetune: {} steps over {} labeled patients -> stage2.ckpt",
        cfg.total_steps.saturating_sub(start_step),
        records.len()
    );
    outputs.finish(
        "finetune",
        Some(&config_path),
        &[data_dir],
        Some(cfg.seed),
        started,
    )
}

fn cmd_evaluate(cli: &Cli, checkpoint: &Path, data_dir: &Path) -> Result<(), CliError> {
    let started = unix_now();
    let out = require_out(cli, "evaluate")?;
    let (params, meta) = load_checkpoint(checkpoint)?;
    let tok = Tokenizer::from_vocab(meta.vocab);
    let corpus = load_corpus(data_dir)?;
    let data = assemble(&corpus, &tok, &params)?;
    let patients = eval_patients(&data);
    let report = evaluate(&params, &tok, &patients, &corpus.qa, cli.seed.unwrap_or(0))?;

    let mut outputs = Outputs::new(&out)?;
    write_eval_outputs(&outputs.dir, &report)?;
    for name in ["metrics.json", "km_high.csv", "km_low.csv"] {
        outputs.files.push(name.into());
    }
    let m = &report.metrics;
    println!(
        "evaluate: n={} ({} censored)  c-index {:.4}  token-F1 {:.4}  log-rank p {:.4}{}",
        m.n,
        m.n_censored,
        m.c_index,
        m.token_f1_mean,
        m.log_rank_p,
        if m.log_rank_degenerate {
            " (degenerate split)"
        } else {
            ""
        }
    );
    outputs.finish(
        "evaluate",
        None,
        &[checkpoint, data_dir],
        Some(cli.seed.unwrap_or(0)),
        started,
    )
}

fn cmd_gradcheck(cli: &Cli, trials: u64) -> Result<(), CliError> {
    if trials == 0 {
        return Err(usage("gradcheck needs --trials >= 1"));
    }
    let base = cli.seed.unwrap_or(0);
    let mut all_ok = true;
    for selector in LossSelector::ALL {
        let worst = (0..trials)
            .map(|t| survtune_core::train::gradcheck(selector, base + t))
            .fold(0.0, f64::max);
        let ok = worst < selector.tolerance();
        all_ok &= ok;
        println!(
            "{:<24} {:>3} trials  max rel err {:.3e}  tol {:.0e}  {}",
            selector.name(),
            trials,
            worst,
            selector.tolerance(),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if all_ok {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(CliError::Numeric(
            "gradient check failed; see the table above".into(),
        ))
    }
}

// ── entry point ────────────────────────────────────────────────────────────

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::PrepareData { reports, templates } => {
            cmd_prepare_data(cli, reports, templates.as_deref())
        }
        Command::Synth => cmd_synth(cli),
        Command::Pretrain {
            data,
            resume,
            total_steps,
        } => cmd_pretrain(cli, data, resume.as_deref(), *total_steps),
        Command::Finetune {
            data,
            from,
            from_scratch,
            resume,
            total_steps,
        } => cmd_finetune(
            cli,
            data,
            from.as_deref(),
            *from_scratch,
            resume.as_deref(),
            *total_steps,
        ),
        Command::Evaluate { checkpoint, data } => cmd_evaluate(cli, checkpoint, data),
        Command::Gradcheck { trials } => cmd_gradcheck(cli, *trials),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match exec::with_threads(cli.threads, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
