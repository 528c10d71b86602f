//! Two-stage training orchestration.
//!
//! Stage 1 pre-trains the projection and decoder on packed QA sequences
//! with the language-modeling loss alone; Stage 2 unfreezes the adaptor and
//! survival head (keeping encoder and projection fixed) and optimizes the
//! joint objective `L_LM + α·L_surv + L_disp + L_align`. Both stages share
//! one driver: a deterministic epoch-shuffled batcher, AdamW with decoupled
//! weight decay, a warmup-cosine schedule, and byte-level freeze
//! enforcement via the parameter-group layout.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{fd_gradient, max_rel_error, Tape, Tensor};
use crate::dataprep::{
    clinical_to_sentence, default_templates, extract_answers, preprocess_volume, DataError,
    QAPair, ReportRecord, SynthCohort, VolumeMeta, DESK_TARGET_SPACING,
};
use crate::exec;
use crate::losses::{
    alignment_loss, cox_loss, deephit_loss, default_sigma, dispersion_continuous,
    dispersion_discrete, lm_loss, total_loss, LossBreakdown, LossError, TimeGrid,
};
use crate::model::{
    bind, decode, encode_volume, init_params, pack_sequence, pool_hidden, project_visual,
    survival_branch, BoundModel, HeadKind, HeadOut, ModelConfig, ModelError, ModelParams,
    ParamGroup, Tokenizer, BOA_ID, EOA_ID,
};
use crate::rng::{mix, Rng};
use crate::survstats::SurvivalRecord;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("cohort has no labeled patients")]
    EmptyCohort,
    #[error("no volume for scan `{0}`")]
    MissingVolume(String),
    #[error("QA pair references unknown scan `{0}`")]
    UnknownScan(String),
    #[error("non-finite loss at step {step}; last good parameters preserved")]
    NonFinite {
        step: u64,
        last_good: Box<ModelParams>,
    },
    #[error("config: {0}")]
    BadConfig(String),
    #[error("optimizer state: {0}")]
    BadOptState(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ── configuration ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadChoice {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub alpha: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub head: HeadChoice,
    pub k_bins: usize,
    pub sigma: Option<f64>,
    pub tau: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults sized for the tiny stand-in model.
    pub fn desk(stage: Stage) -> Self {
        TrainConfig {
            stage,
            lr_peak: 3e-4,
            warmup_steps: 30,
            total_steps: match stage {
                Stage::Pretrain => 300,
                Stage::Finetune => 250,
            },
            batch_size: 6,
            grad_accum_steps: 2,
            alpha: 0.5,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            head: HeadChoice::Continuous,
            k_bins: 5,
            sigma: None,
            tau: 0.5,
            seed: 0,
        }
    }

    /// Documentation-parity preset pinning the published hyperparameters
    /// (peak lr 1e-6, 500 warmup steps, α = 0.5). Not runnable at desk
    /// scale in reasonable time; shipped for reference.
    pub fn paper_faithful(stage: Stage) -> Self {
        TrainConfig {
            lr_peak: 1e-6,
            warmup_steps: 500,
            total_steps: 10_000,
            batch_size: 12,
            grad_accum_steps: 8,
            ..TrainConfig::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr_peak <= 0.0 {
            return Err(TrainError::BadConfig("lr_peak must be > 0".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::BadConfig(
                "warmup_steps must not exceed total_steps".into(),
            ));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(TrainError::BadConfig(
                "batch_size and grad_accum_steps must be ≥ 1".into(),
            ));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::BadConfig("alpha must be ≥ 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(TrainError::BadConfig("tau must be > 0".into()));
        }
        if self.head == HeadChoice::Discrete && self.k_bins < 2 {
            return Err(TrainError::BadConfig("discrete head needs k_bins ≥ 2".into()));
        }
        Ok(())
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            HeadChoice::Continuous => HeadKind::Continuous,
            HeadChoice::Discrete => HeadKind::Discrete { bins: self.k_bins },
        }
    }
}

/// Reads a [`TrainConfig`] from JSON, rejecting unknown keys.
pub fn read_train_config(path: &Path) -> Result<TrainConfig, TrainError> {
    let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

// ── freeze policy ──────────────────────────────────────────────────────────

/// Which parameter groups each stage trains. Everything else is frozen and
/// must survive byte-identically.
pub fn trainable_groups(stage: Stage) -> &'static [ParamGroup] {
    match stage {
        Stage::Pretrain => &[ParamGroup::Projection, ParamGroup::Decoder],
        Stage::Finetune => &[ParamGroup::Decoder, ParamGroup::Adaptor, ParamGroup::Head],
    }
}

/// Sets the freeze flags on `params` to match the stage policy.
pub fn apply_freeze(params: &mut ModelParams, stage: Stage) {
    let trainable = trainable_groups(stage);
    params.freeze = crate::model::FreezeFlags {
        encoder: !trainable.contains(&ParamGroup::Encoder),
        projection: !trainable.contains(&ParamGroup::Projection),
        decoder: !trainable.contains(&ParamGroup::Decoder),
        adaptor: !trainable.contains(&ParamGroup::Adaptor),
        head: !trainable.contains(&ParamGroup::Head),
    };
}

// ── schedule and optimizer ─────────────────────────────────────────────────

/// Linear warmup to `lr_peak` over `warmup_steps`, then cosine decay to
/// zero at `total_steps`.
pub fn cosine_warmup_lr(step: u64, cfg: &TrainConfig) -> f64 {
    debug_assert!(step <= cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.lr_peak;
    }
    let phase = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

fn group_index(g: ParamGroup) -> usize {
    ParamGroup::ALL.iter().position(|&x| x == g).unwrap()
}

/// AdamW state: first/second moments per trainable group. Frozen groups
/// never acquire state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW {
            step: 0,
            moments: vec![None; ParamGroup::ALL.len()],
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// One decoupled-weight-decay Adam update over the supplied group
/// gradients, with bias correction. Groups without a gradient entry are
/// skipped entirely: no parameter change, no state advance.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[(ParamGroup, Vec<f64>)],
    opt: &mut AdamW,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (group, grad) in grads {
        let gi = group_index(*group);
        let n = params.group(*group).len();
        assert_eq!(grad.len(), n, "gradient length mismatch for {group:?}");
        let (m, v) = opt.moments[gi].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let buf = params.group_mut(*group);
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            buf[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * buf[i]);
        }
    }
}

/// Optimizer sidecar format: `SVOP | header length | JSON header | f64 LE
/// moment payload`. Needed to resume a run with a bit-identical
/// trajectory; final checkpoints can drop it.
pub fn save_opt_state(path: &Path, opt: &AdamW) -> Result<(), TrainError> {
    #[derive(Serialize)]
    struct Header {
        step: u64,
        lens: Vec<Option<usize>>,
    }
    let header = serde_json::to_vec(&Header {
        step: opt.step,
        lens: opt
            .moments
            .iter()
            .map(|m| m.as_ref().map(|(mm, _)| mm.len()))
            .collect(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(b"SVOP");
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for slot in opt.moments.iter().flatten() {
        for &x in slot.0.iter().chain(&slot.1) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_opt_state(path: &Path) -> Result<AdamW, TrainError> {
    #[derive(Deserialize)]
    struct Header {
        step: u64,
        lens: Vec<Option<usize>>,
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"SVOP" {
        return Err(TrainError::BadOptState("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(TrainError::BadOptState("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])?;
    let total: usize = header.lens.iter().flatten().sum::<usize>() * 2;
    let payload = &bytes[12 + hlen..];
    if payload.len() != total * 8 {
        return Err(TrainError::BadOptState(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut cursor = 0;
    let mut take = |n: usize| -> Vec<f64> {
        let out = payload[cursor..cursor + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += n * 8;
        out
    };
    let moments = header
        .lens
        .iter()
        .map(|len| len.map(|n| (take(n), take(n))))
        .collect();
    Ok(AdamW {
        step: header.step,
        moments,
    })
}

// ── dataset assembly ───────────────────────────────────────────────────────

/// One patient's precomputed inputs. The encoder is frozen in both stages,
/// so visual tokens are computed once here and reused every step.
#[derive(Debug, Clone)]
pub struct Patient {
    pub scan_id: String,
    pub clinical_ids: Vec<usize>,
    pub z_v: Vec<f64>,
    pub record: Option<SurvivalRecord>,
}

/// One QA training sample, pointing at its patient.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub patient: usize,
    pub question_id: usize,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub patients: Vec<Patient>,
    pub samples: Vec<TrainSample>,
    /// QA sample indices grouped by patient.
    pub samples_by_patient: Vec<Vec<usize>>,
}

/// Builds the tokenizer corpus: questions, answers, and clinical sentences
/// (the three text streams the decoder ever sees).
pub fn build_tokenizer(reports: &[ReportRecord], qa: &[QAPair], max_vocab: usize) -> Tokenizer {
    let mut texts: Vec<String> = Vec::new();
    for rec in reports {
        if let Some(cov) = &rec.clinical {
            texts.push(clinical_to_sentence(cov));
        }
    }
    for pair in qa {
        texts.push(pair.question.clone());
        texts.push(pair.answer.clone());
    }
    Tokenizer::from_corpus(&texts, max_vocab)
}

/// Question ids get `<boa>` appended; answer ids get `<eoa>` appended.
pub fn tokenize_question(tok: &Tokenizer, text: &str) -> Vec<usize> {
    let mut ids = tok.encode(text);
    ids.push(BOA_ID);
    ids
}

pub fn tokenize_answer(tok: &Tokenizer, text: &str) -> Vec<usize> {
    let mut ids = tok.encode(text);
    ids.push(EOA_ID);
    ids
}

/// Assembles training data from parsed artifacts. `volumes` maps scan_id
/// to an already-preprocessed desk-shape volume.
pub fn build_dataset(
    reports: &[ReportRecord],
    qa: &[QAPair],
    volumes: &HashMap<String, Vec<f64>>,
    dims: [usize; 3],
    tok: &Tokenizer,
    params: &ModelParams,
) -> Result<TrainData, TrainError> {
    if reports.is_empty() || qa.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let by_id: HashMap<&str, usize> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| (r.scan_id.as_str(), i))
        .collect();

    let patients: Vec<Result<Patient, TrainError>> = exec::par_map(reports, |rec| {
        let volume = volumes
            .get(&rec.scan_id)
            .ok_or_else(|| TrainError::MissingVolume(rec.scan_id.clone()))?;
        let z_v = encode_volume(params, volume, dims)?;
        let clinical_ids = match &rec.clinical {
            Some(cov) => tok.encode(&clinical_to_sentence(cov)),
            None => Vec::new(),
        };
        Ok(Patient {
            scan_id: rec.scan_id.clone(),
            clinical_ids,
            z_v,
            record: rec
                .survival
                .map(|(t, e)| SurvivalRecord::new(&rec.scan_id, t, e)),
        })
    });
    let patients: Vec<Patient> = patients.into_iter().collect::<Result<_, _>>()?;

    let mut samples = Vec::with_capacity(qa.len());
    let mut samples_by_patient = vec![Vec::new(); patients.len()];
    for pair in qa {
        let &pi = by_id
            .get(pair.scan_id.as_str())
            .ok_or_else(|| TrainError::UnknownScan(pair.scan_id.clone()))?;
        samples_by_patient[pi].push(samples.len());
        samples.push(TrainSample {
            patient: pi,
            question_id: pair.question_id,
            question_ids: tokenize_question(tok, &pair.question),
            answer_ids: tokenize_answer(tok, &pair.answer),
        });
    }
    Ok(TrainData {
        patients,
        samples,
        samples_by_patient,
    })
}

/// Convenience assembly for a synthetic cohort: extracts QA pairs with the
/// default templates, fits a tokenizer, initializes a desk model, and
/// preprocesses + encodes every volume.
pub fn prepare_synth_training(
    cohort: &SynthCohort,
    head: HeadKind,
    max_vocab: usize,
    seed: u64,
) -> Result<(Tokenizer, ModelParams, TrainData), TrainError> {
    let templates = default_templates();
    let qa: Vec<QAPair> = cohort
        .reports
        .iter()
        .flat_map(|r| extract_answers(r, &templates))
        .collect();
    let tok = build_tokenizer(&cohort.reports, &qa, max_vocab);
    let config = ModelConfig::desk(tok.len(), head);
    let params = init_params(&config, seed);

    let meta = VolumeMeta {
        dims: cohort.dims,
        spacing_mm: cohort.spacing_mm,
    };
    let prepped: Vec<Result<Vec<f64>, DataError>> = exec::par_map(&cohort.volumes, |raw| {
        preprocess_volume(raw, &meta, cohort.dims, DESK_TARGET_SPACING)
    });
    let mut volumes = HashMap::new();
    for (rec, vol) in cohort.reports.iter().zip(prepped) {
        volumes.insert(rec.scan_id.clone(), vol?);
    }
    let data = build_dataset(&cohort.reports, &qa, &volumes, cohort.dims, &tok, &params)?;
    Ok((tok, params, data))
}

// ── batching ───────────────────────────────────────────────────────────────

/// Deterministic epoch-shuffled batch indices. The stream position is a
/// pure function of the step, so a resumed run draws exactly the batches
/// the uninterrupted run would have drawn.
pub fn batch_indices(n: usize, per_step: usize, seed: u64, step: u64) -> Vec<usize> {
    assert!(n > 0);
    let start = step as u128 * per_step as u128;
    let mut epoch = (start / n as u128) as u64;
    let mut offset = (start % n as u128) as usize;
    let shuffled = |e: u64| {
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(seed, 500_000 + e).shuffle(&mut perm);
        perm
    };
    let mut perm = shuffled(epoch);
    let mut out = Vec::with_capacity(per_step);
    for _ in 0..per_step {
        if offset == n {
            epoch += 1;
            offset = 0;
            perm = shuffled(epoch);
        }
        out.push(perm[offset]);
        offset += 1;
    }
    out
}

// ── metrics and sinks ──────────────────────────────────────────────────────

/// One metrics-log line; the field names are the stable wire format.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub lm: f64,
    pub surv: f64,
    pub dispersion: f64,
    pub alignment: f64,
    pub total: f64,
}

/// Receives per-step metrics, periodic checkpoints, and warnings.
pub trait TrainSink {
    fn metrics(&mut self, _m: &StepMetrics) {}
    fn checkpoint(
        &mut self,
        _step: u64,
        _params: &ModelParams,
        _opt: &AdamW,
    ) -> Result<(), TrainError> {
        Ok(())
    }
    fn warn(&mut self, _msg: &str) {}
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

/// Collects metrics and warnings in memory.
#[derive(Default)]
pub struct MemorySink {
    pub metrics: Vec<StepMetrics>,
    pub warnings: Vec<String>,
    pub checkpoints: Vec<u64>,
}

impl TrainSink for MemorySink {
    fn metrics(&mut self, m: &StepMetrics) {
        self.metrics.push(*m);
    }
    fn checkpoint(
        &mut self,
        step: u64,
        _params: &ModelParams,
        _opt: &AdamW,
    ) -> Result<(), TrainError> {
        self.checkpoints.push(step);
        Ok(())
    }
    fn warn(&mut self, msg: &str) {
        self.warnings.push(msg.to_string());
    }
}

// ── shared driver ──────────────────────────────────────────────────────────

type GroupGrads = Vec<(ParamGroup, Vec<f64>)>;

fn zero_grads(params: &ModelParams, groups: &[ParamGroup]) -> GroupGrads {
    groups
        .iter()
        .map(|&g| (g, vec![0.0; params.group(g).len()]))
        .collect()
}

fn add_scaled(acc: &mut GroupGrads, delta: &GroupGrads, scale: f64) {
    for ((_, a), (_, d)) in acc.iter_mut().zip(delta) {
        for (x, y) in a.iter_mut().zip(d) {
            *x += scale * y;
        }
    }
}

/// Interior checkpoints land every `total/10` steps (at least every step).
pub fn checkpoint_cadence(total_steps: u64) -> u64 {
    (total_steps / 10).max(1)
}

/// Runs the optimizer loop. `micro_batch` maps a chunk of dataset indices
/// (plus the current step, for deterministic per-step choices) to the
/// chunk's mean loss breakdown and gradients over the trainable groups.
fn run_driver<F>(
    mut params: ModelParams,
    cfg: &TrainConfig,
    n_items: usize,
    start_step: u64,
    mut opt: AdamW,
    sink: &mut dyn TrainSink,
    mut micro_batch: F,
) -> Result<(ModelParams, AdamW), TrainError>
where
    F: FnMut(
        &ModelParams,
        u64,
        &[usize],
        &mut dyn TrainSink,
    ) -> Result<(LossBreakdown, GroupGrads), TrainError>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    apply_freeze(&mut params, cfg.stage);
    let groups = trainable_groups(cfg.stage);
    let per_step = cfg.batch_size * cfg.grad_accum_steps;
    let cadence = checkpoint_cadence(cfg.total_steps);
    let accum_w = 1.0 / cfg.grad_accum_steps as f64;

    for step in start_step..cfg.total_steps {
        let lr = cosine_warmup_lr(step, cfg);
        let idxs = batch_indices(n_items, per_step, cfg.seed, step);
        let mut acc = zero_grads(&params, groups);
        let mut metrics = StepMetrics {
            step,
            lr,
            lm: 0.0,
            surv: 0.0,
            dispersion: 0.0,
            alignment: 0.0,
            total: 0.0,
        };
        for chunk in idxs.chunks(cfg.batch_size) {
            let (breakdown, grads) = micro_batch(&params, step, chunk, sink)?;
            add_scaled(&mut acc, &grads, accum_w);
            metrics.lm += accum_w * breakdown.lm;
            metrics.surv += accum_w * breakdown.surv;
            metrics.dispersion += accum_w * breakdown.dispersion;
            metrics.alignment += accum_w * breakdown.alignment;
            metrics.total += accum_w * breakdown.total;
        }
        if !metrics.total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                last_good: Box::new(params),
            });
        }
        adamw_step(&mut params, &acc, &mut opt, lr, cfg.betas, cfg.weight_decay);
        sink.metrics(&metrics);
        let done = step + 1;
        if done % cadence == 0 && done != cfg.total_steps {
            sink.checkpoint(done, &params, &opt)?;
        }
    }
    sink.checkpoint(cfg.total_steps, &params, &opt)?;
    Ok((params, opt))
}

// ── stage 1 ────────────────────────────────────────────────────────────────

/// Builds one sample's graph and returns its LM loss tensor.
fn sample_lm_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    patient: &Patient,
    sample: &TrainSample,
) -> Result<Tensor, TrainError> {
    let d_vis = bound.config.d_vis;
    let p = patient.z_v.len() / d_vis;
    let z = tape.constant(vec![p, d_vis], patient.z_v.clone());
    let h_v = project_visual(tape, z, bound.projection)?;
    let seq = pack_sequence(
        tape,
        bound,
        &patient.clinical_ids,
        h_v,
        &sample.question_ids,
        &sample.answer_ids,
    )?;
    let (_, logits) = decode(tape, bound, &seq);
    let rows: Vec<usize> = (0..seq.len() - 1).collect();
    let shifted = tape.gather_rows(logits, &rows);
    Ok(lm_loss(tape, shifted, &seq.ids[1..], &seq.loss_mask[1..])?)
}

/// Stage 1: visual-instruction pre-training on the LM objective alone.
/// Per-sample tapes run data-parallel; gradients merge in sample order, so
/// the result is identical for any worker count.
pub fn run_stage1(
    data: &TrainData,
    params: ModelParams,
    cfg: &TrainConfig,
    opt: Option<AdamW>,
    start_step: u64,
    sink: &mut dyn TrainSink,
) -> Result<(ModelParams, AdamW), TrainError> {
    if cfg.stage != Stage::Pretrain {
        return Err(TrainError::BadConfig("run_stage1 expects stage Pretrain".into()));
    }
    let groups = trainable_groups(Stage::Pretrain);
    run_driver(
        params,
        cfg,
        data.samples.len(),
        start_step,
        opt.unwrap_or_default(),
        sink,
        |params, _step, chunk, _sink| {
            let per_sample: Vec<Result<(f64, GroupGrads), TrainError>> =
                exec::par_map(chunk, |&si| {
                    let sample = &data.samples[si];
                    let patient = &data.patients[sample.patient];
                    let mut tape = Tape::new();
                    let bound = bind(&mut tape, params);
                    let loss = sample_lm_loss(&mut tape, &bound, patient, sample)?;
                    let value = tape.value(loss)[0];
                    let grads = tape.backward(loss);
                    let flats = groups
                        .iter()
                        .map(|&g| (g, bound.group_grads(&grads, g, params.group(g).len())))
                        .collect();
                    Ok((value, flats))
                });
            let mut acc = zero_grads(params, groups);
            let mut lm = 0.0;
            let w = 1.0 / chunk.len() as f64;
            for item in per_sample {
                let (value, grads) = item?;
                lm += w * value;
                add_scaled(&mut acc, &grads, w);
            }
            let breakdown = LossBreakdown {
                lm,
                surv: 0.0,
                dispersion: 0.0,
                alignment: 0.0,
                total: lm,
                alpha: cfg.alpha,
            };
            Ok((breakdown, acc))
        },
    )
}

// ── stage 2 ────────────────────────────────────────────────────────────────

/// Everything the joint loss needs about one batch member.
pub struct Stage2Item<'a> {
    pub clinical: &'a [usize],
    pub z_v: &'a [f64],
    pub question: &'a [usize],
    pub answer: &'a [usize],
    pub record: &'a SurvivalRecord,
}

/// Loss-term hyperparameters resolved for stage 2.
pub struct Stage2LossCfg<'a> {
    pub alpha: f64,
    pub sigma: f64,
    pub tau: f64,
    pub grid: Option<&'a TimeGrid>,
}

/// Builds the full joint loss for one batch on a shared tape. Returns the
/// breakdown, the total tensor, and whether a zero-event batch dropped the
/// Cox term.
pub fn stage2_batch_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    items: &[Stage2Item],
    loss_cfg: &Stage2LossCfg,
) -> Result<(LossBreakdown, Tensor, bool), TrainError> {
    assert!(!items.is_empty());
    let b = items.len();
    let d_vis = bound.config.d_vis;
    let mut lm_terms = Vec::with_capacity(b);
    let mut align_terms = Vec::with_capacity(b);
    let mut z_survs = Vec::with_capacity(b);
    let mut head_outs = Vec::with_capacity(b);
    let mut records = Vec::with_capacity(b);

    for item in items {
        let p = item.z_v.len() / d_vis;
        let z = tape.constant(vec![p, d_vis], item.z_v.to_vec());
        let h_v = project_visual(tape, z, bound.projection)?;
        let seq = pack_sequence(tape, bound, item.clinical, h_v, item.question, item.answer)?;
        let (hidden, logits) = decode(tape, bound, &seq);
        let rows: Vec<usize> = (0..seq.len() - 1).collect();
        let shifted = tape.gather_rows(logits, &rows);
        lm_terms.push(lm_loss(tape, shifted, &seq.ids[1..], &seq.loss_mask[1..])?);
        let (z_surv, head) = survival_branch(tape, bound, hidden);
        let pooled = pool_hidden(tape, hidden);
        align_terms.push(alignment_loss(tape, z_surv, pooled)?);
        z_survs.push(z_surv);
        head_outs.push(head);
        records.push(item.record.clone());
    }

    let bw = vec![1.0 / b as f64; b];
    let lm_stack = tape.concat_rows(&lm_terms);
    let lm = tape.weighted_sum(lm_stack, &bw);
    let align_stack = tape.concat_rows(&align_terms);
    let alignment = tape.weighted_sum(align_stack, &bw);

    let events: Vec<usize> = (0..b).filter(|&i| records[i].event).collect();
    let mut cox_skipped = false;

    let surv = match bound.config.head {
        HeadKind::Continuous => {
            let risks: Vec<Tensor> = head_outs
                .iter()
                .map(|h| match h {
                    HeadOut::Risk(r) => *r,
                    _ => unreachable!("continuous config yields risk outputs"),
                })
                .collect();
            if events.is_empty() {
                cox_skipped = true;
                tape.scalar(0.0)
            } else {
                cox_loss(tape, &risks, &records)?
            }
        }
        HeadKind::Discrete { .. } => {
            let grid = loss_cfg
                .grid
                .ok_or_else(|| TrainError::BadConfig("discrete head needs a TimeGrid".into()))?;
            let rows: Vec<Tensor> = head_outs
                .iter()
                .map(|h| match h {
                    HeadOut::Probs(p) => *p,
                    _ => unreachable!("discrete config yields probability outputs"),
                })
                .collect();
            let probs = tape.concat_rows(&rows);
            deephit_loss(tape, probs, &records, grid)?
        }
    };

    let dispersion = match bound.config.head {
        HeadKind::Continuous => {
            if events.len() >= 2 {
                let rows: Vec<Tensor> = events.iter().map(|&i| z_survs[i]).collect();
                let emb = tape.concat_rows(&rows);
                let times: Vec<f64> = events.iter().map(|&i| records[i].time).collect();
                dispersion_continuous(tape, emb, &times, loss_cfg.sigma)?
            } else {
                tape.scalar(0.0)
            }
        }
        HeadKind::Discrete { .. } => {
            let grid = loss_cfg.grid.expect("checked above");
            // Group the batch's uncensored members by event-time bin and
            // average each nonempty group's embedding.
            let mut by_bin: HashMap<usize, Vec<Tensor>> = HashMap::new();
            for &i in &events {
                let bin = grid.bin_of(records[i].time)?;
                by_bin.entry(bin).or_default().push(z_survs[i]);
            }
            let mut bins: Vec<usize> = by_bin.keys().copied().collect();
            bins.sort_unstable();
            if bins.len() >= 2 {
                let means: Vec<Tensor> = bins
                    .iter()
                    .map(|bin| {
                        let stack = tape.concat_rows(&by_bin[bin]);
                        tape.mean_rows(stack)
                    })
                    .collect();
                let group_means = tape.concat_rows(&means);
                dispersion_discrete(tape, group_means, loss_cfg.tau)?
            } else {
                tape.scalar(0.0)
            }
        }
    };

    let (breakdown, total) = total_loss(tape, lm, surv, dispersion, alignment, loss_cfg.alpha);
    Ok((breakdown, total, cox_skipped))
}

/// Stage 2: joint fine-tuning with all four loss terms over patient
/// batches. Each step pairs every sampled patient with one of its QA
/// samples, rotated deterministically by `(seed, patient, step)`.
pub fn run_stage2(
    data: &TrainData,
    grid: Option<&TimeGrid>,
    params: ModelParams,
    cfg: &TrainConfig,
    opt: Option<AdamW>,
    start_step: u64,
    sink: &mut dyn TrainSink,
) -> Result<(ModelParams, AdamW), TrainError> {
    if cfg.stage != Stage::Finetune {
        return Err(TrainError::BadConfig("run_stage2 expects stage Finetune".into()));
    }
    let labeled: Vec<usize> = (0..data.patients.len())
        .filter(|&i| data.patients[i].record.is_some() && !data.samples_by_patient[i].is_empty())
        .collect();
    if labeled.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => {
            let records: Vec<SurvivalRecord> = labeled
                .iter()
                .filter_map(|&i| data.patients[i].record.clone())
                .collect();
            default_sigma(&records)
        }
    };
    if cfg.head == HeadChoice::Discrete && grid.is_none() {
        return Err(TrainError::BadConfig("discrete head needs a TimeGrid".into()));
    }
    let groups = trainable_groups(Stage::Finetune);

    run_driver(
        params,
        cfg,
        labeled.len(),
        start_step,
        opt.unwrap_or_default(),
        sink,
        |params, step, chunk, sink| {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, params);
            let items: Vec<Stage2Item> = chunk
                .iter()
                .map(|&li| {
                    let pi = labeled[li];
                    let patient = &data.patients[pi];
                    let choices = &data.samples_by_patient[pi];
                    let pick = mix(cfg.seed, 600_000 + pi as u64, step) as usize % choices.len();
                    let sample = &data.samples[choices[pick]];
                    Stage2Item {
                        clinical: &patient.clinical_ids,
                        z_v: &patient.z_v,
                        question: &sample.question_ids,
                        answer: &sample.answer_ids,
                        record: patient.record.as_ref().unwrap(),
                    }
                })
                .collect();
            let loss_cfg = Stage2LossCfg {
                alpha: cfg.alpha,
                sigma,
                tau: cfg.tau,
                grid,
            };
            let (breakdown, total, cox_skipped) =
                stage2_batch_loss(&mut tape, &bound, &items, &loss_cfg)?;
            if cox_skipped {
                sink.warn(&format!("step {step}: batch has zero events; Cox term skipped"));
            }
            let grads = tape.backward(total);
            let flats = groups
                .iter()
                .map(|&g| (g, bound.group_grads(&grads, g, params.group(g).len())))
                .collect();
            Ok((breakdown, flats))
        },
    )
}

// ── gradcheck harness ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSelector {
    Lm,
    Cox,
    DeepHit,
    DispersionContinuous,
    DispersionDiscrete,
    Alignment,
    Stage2Total,
}

impl LossSelector {
    pub const ALL: [LossSelector; 7] = [
        LossSelector::Lm,
        LossSelector::Cox,
        LossSelector::DeepHit,
        LossSelector::DispersionContinuous,
        LossSelector::DispersionDiscrete,
        LossSelector::Alignment,
        LossSelector::Stage2Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossSelector::Lm => "lm_loss",
            LossSelector::Cox => "cox_loss",
            LossSelector::DeepHit => "deephit_loss",
            LossSelector::DispersionContinuous => "dispersion_continuous",
            LossSelector::DispersionDiscrete => "dispersion_discrete",
            LossSelector::Alignment => "alignment_loss",
            LossSelector::Stage2Total => "stage2_total",
        }
    }

    /// Contract tolerance: 1e-4 per loss, 1e-3 for the full composition.
    pub fn tolerance(&self) -> f64 {
        match self {
            LossSelector::Stage2Total => 1e-3,
            _ => 1e-4,
        }
    }
}

fn random_records(rng: &mut Rng, n: usize, force_event: bool) -> Vec<SurvivalRecord> {
    let mut records: Vec<SurvivalRecord> = (0..n)
        .map(|i| {
            SurvivalRecord::new(
                format!("p{i}"),
                rng.uniform_in(0.2, 10.0),
                rng.uniform() < 0.7,
            )
        })
        .collect();
    if force_event && !records.iter().any(|r| r.event) {
        records[0].event = true;
    }
    records
}

/// Central finite differences vs. the tape gradient on a random small
/// configuration drawn from `seed`. Returns the max relative error across
/// all checked coordinates.
pub fn gradcheck(selector: LossSelector, seed: u64) -> f64 {
    let mut rng = Rng::new(seed, 40_000 + selector as u64);
    match selector {
        LossSelector::Stage2Total => gradcheck_stage2(&mut rng),
        _ => gradcheck_single_loss(selector, &mut rng),
    }
}

fn gradcheck_single_loss(selector: LossSelector, rng: &mut Rng) -> f64 {
    // Pack all differentiable inputs into one flat parameter and rebuild
    // the loss from views of it, so one closure serves both the tape
    // gradient and every finite-difference evaluation.
    type Builder = Box<dyn Fn(&mut Tape, Tensor) -> Tensor>;
    let (n_inputs, build): (usize, Builder) = match selector {
        LossSelector::Lm => {
            let l = 2 + rng.below(5);
            let v = 2 + rng.below(6);
            let ids: Vec<usize> = (0..l).map(|_| rng.below(v)).collect();
            let mut mask: Vec<bool> = (0..l).map(|_| rng.uniform() < 0.6).collect();
            if !mask.iter().any(|&m| m) {
                mask[0] = true;
            }
            (
                l * v,
                Box::new(move |tape, x| {
                    let logits = tape.reshape(x, vec![l, v]);
                    lm_loss(tape, logits, &ids, &mask).unwrap()
                }),
            )
        }
        LossSelector::Cox => {
            let n = 2 + rng.below(6);
            let records = random_records(rng, n, true);
            (
                n,
                Box::new(move |tape, x| {
                    let risks: Vec<Tensor> =
                        (0..n).map(|i| tape.gather(x, &[i], vec![1])).collect();
                    cox_loss(tape, &risks, &records).unwrap()
                }),
            )
        }
        LossSelector::DeepHit => {
            let n = 2 + rng.below(4);
            let k = 3 + rng.below(3);
            let records = random_records(rng, n, true);
            let max_t = records.iter().map(|r| r.time).fold(0.0, f64::max);
            let edges: Vec<f64> = (0..=k)
                .map(|i| i as f64 * (max_t + 1.0) / k as f64)
                .collect();
            let grid = TimeGrid::new(edges).unwrap();
            (
                n * k,
                Box::new(move |tape, x| {
                    let logits = tape.reshape(x, vec![n, k]);
                    let probs = tape.softmax_rows(logits);
                    deephit_loss(tape, probs, &records, &grid).unwrap()
                }),
            )
        }
        LossSelector::DispersionContinuous => {
            let m = 2 + rng.below(4);
            let d = 2 + rng.below(4);
            let times: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.5, 8.0)).collect();
            let sigma = rng.uniform_in(0.5, 3.0);
            (
                m * d,
                Box::new(move |tape, x| {
                    let emb = tape.reshape(x, vec![m, d]);
                    dispersion_continuous(tape, emb, &times, sigma).unwrap()
                }),
            )
        }
        LossSelector::DispersionDiscrete => {
            let k = 2 + rng.below(4);
            let d = 2 + rng.below(4);
            let tau = rng.uniform_in(0.3, 2.0);
            (
                k * d,
                Box::new(move |tape, x| {
                    let means = tape.reshape(x, vec![k, d]);
                    dispersion_discrete(tape, means, tau).unwrap()
                }),
            )
        }
        LossSelector::Alignment => {
            let d = 2 + rng.below(6);
            (
                2 * d,
                Box::new(move |tape, x| {
                    let a = tape.gather(x, &(0..d).collect::<Vec<_>>(), vec![d]);
                    let bidx: Vec<usize> = (d..2 * d).collect();
                    let b = tape.gather(x, &bidx, vec![d]);
                    alignment_loss(tape, a, b).unwrap()
                }),
            )
        }
        LossSelector::Stage2Total => unreachable!("handled by gradcheck_stage2"),
    };

    let x0: Vec<f64> = (0..n_inputs).map(|_| rng.normal()).collect();
    let mut tape = Tape::new();
    let x = tape.param(vec![n_inputs], x0.clone());
    let loss = build(&mut tape, x);
    let grads = tape.backward(loss);
    let analytic = grads.wrt(x).unwrap().to_vec();

    let numeric = fd_gradient(
        |vals| {
            let mut t = Tape::new();
            let xt = t.param(vec![vals.len()], vals.to_vec());
            let l = build(&mut t, xt);
            t.value(l)[0]
        },
        &x0,
        1e-3,
    );
    max_rel_error(&analytic, &numeric)
}

fn gradcheck_stage2(rng: &mut Rng) -> f64 {
    let discrete = rng.uniform() < 0.5;
    let head = if discrete {
        HeadKind::Discrete { bins: 3 }
    } else {
        HeadKind::Continuous
    };
    let config = ModelConfig {
        d_text: 8,
        d_vis: 4,
        n_layers: 1,
        n_heads: 2,
        vocab: 12,
        max_len: 24,
        conv1_channels: 2,
        conv1_kernel: [2, 2, 2],
        conv2_kernel: [2, 2, 1],
        adaptor_bottleneck: 2,
        head,
        tied_output: true,
        ensemble_size: 6,
    };
    struct RawItem {
        z_v: Vec<f64>,
        clinical: Vec<usize>,
        question: Vec<usize>,
        answer: Vec<usize>,
    }
    let base = init_params(&config, rng.next_u64());
    let b = 2 + rng.below(2);
    let p_tokens = 2;
    let items_raw: Vec<RawItem> = (0..b)
        .map(|_| {
            let z_v: Vec<f64> = (0..p_tokens * config.d_vis).map(|_| rng.normal()).collect();
            let clinical: Vec<usize> = (0..2).map(|_| 3 + rng.below(9)).collect();
            let mut question: Vec<usize> = (0..2).map(|_| 3 + rng.below(9)).collect();
            question.push(BOA_ID);
            let mut answer: Vec<usize> = (0..2).map(|_| 3 + rng.below(9)).collect();
            answer.push(EOA_ID);
            RawItem {
                z_v,
                clinical,
                question,
                answer,
            }
        })
        .collect();
    let mut records = random_records(rng, b, true);
    // Two events so both dispersion variants can activate.
    if records.iter().filter(|r| r.event).count() < 2 {
        records[1].event = true;
    }
    let grid = TimeGrid::new(vec![0.0, 3.5, 7.0, 11.0]).unwrap();
    let sigma = rng.uniform_in(0.8, 2.0);

    let forward = |params: &ModelParams, want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = if want_grads { Tape::new() } else { Tape::no_grad() };
        let bound = bind(&mut tape, params);
        let items: Vec<Stage2Item> = items_raw
            .iter()
            .zip(&records)
            .map(|(raw, record)| Stage2Item {
                clinical: &raw.clinical,
                z_v: &raw.z_v,
                question: &raw.question,
                answer: &raw.answer,
                record,
            })
            .collect();
        let loss_cfg = Stage2LossCfg {
            alpha: 0.5,
            sigma,
            tau: 0.7,
            grid: Some(&grid),
        };
        let (_, total, _) = stage2_batch_loss(&mut tape, &bound, &items, &loss_cfg).unwrap();
        let value = tape.value(total)[0];
        if !want_grads {
            return (value, Vec::new());
        }
        let grads = tape.backward(total);
        let flats = trainable_groups(Stage::Finetune)
            .iter()
            .map(|&g| bound.group_grads(&grads, g, params.group(g).len()))
            .collect();
        (value, flats)
    };

    let (_, analytic) = forward(&base, true);
    let groups = trainable_groups(Stage::Finetune);
    let step = 1e-3;
    let mut worst = 0.0f64;
    for (gi, &group) in groups.iter().enumerate() {
        let len = base.group(group).len();
        for _ in 0..6 {
            let idx = rng.below(len);
            let mut plus = base.clone();
            plus.group_mut(group)[idx] += step;
            let mut minus = base.clone();
            minus.group_mut(group)[idx] -= step;
            let numeric = (forward(&plus, false).0 - forward(&minus, false).0) / (2.0 * step);
            worst = worst.max(max_rel_error(&[analytic[gi][idx]], &[numeric]));
        }
    }
    worst
}
