//! Corpus ingestion and dataset construction.
//!
//! Everything the training stack consumes is prepared here: report records
//! and their QA decomposition (word-frequency ranking plus rule-based
//! template extraction), clinical-covariate sentences, CT-volume
//! preprocessing, event-time grids, and a synthetic cohort generator that
//! plants bright lesions with a known size→risk law so end-to-end recovery
//! can be scored against an oracle.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::losses::TimeGrid;
use crate::model::split_words;
use crate::rng::Rng;
use crate::survstats::{concordance_index, SurvivalRecord};

/// Desk-scale preprocessed volume shape.
pub const DESK_VOLUME_DIMS: [usize; 3] = [24, 24, 16];
/// Target spacing: 1.5 mm in-plane, 3 mm out-of-plane.
pub const DESK_TARGET_SPACING: [f64; 3] = [1.5, 1.5, 3.0];
/// Hounsfield clip range applied before any resampling.
pub const HU_RANGE: (f64, f64) = (-1000.0, 1000.0);
/// Emitted when no sentence matches a template's triggers.
pub const FALLBACK_ANSWER: &str = "No relevant findings reported.";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Jsonl { line: usize, reason: String },
    #[error("duplicate scan_id `{0}`")]
    DuplicateScanId(String),
    #[error("scan `{0}` has an empty report")]
    EmptyReport(String),
    #[error("scan `{0}` has time without event (or vice versa)")]
    PartialSurvival(String),
    #[error("nonpositive spacing {0} mm")]
    BadSpacing(f64),
    #[error("volume has {got} voxels but dims {dims:?} imply {want}")]
    VolumeSize {
        got: usize,
        want: usize,
        dims: [usize; 3],
    },
    #[error("empty volume")]
    EmptyVolume,
    #[error("{distinct} distinct event times cannot fill {k} bins; use a smaller k")]
    TooFewEventTimes { distinct: usize, k: usize },
    #[error("template config: {0}")]
    BadTemplates(String),
    #[error("synth config: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ── domain types ───────────────────────────────────────────────────────────

/// One scan's report plus optional clinical covariates and survival label.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub scan_id: String,
    pub report_text: String,
    pub clinical: Option<BTreeMap<String, String>>,
    pub survival: Option<(f64, bool)>,
}

/// Wire form of a report line: `{"scan_id", "report", "clinical", "time", "event"}`.
#[derive(Serialize, Deserialize)]
struct ReportWire {
    scan_id: String,
    report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clinical: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event: Option<u8>,
}

impl ReportRecord {
    fn from_wire(w: ReportWire) -> Result<Self, DataError> {
        if w.report.trim().is_empty() {
            return Err(DataError::EmptyReport(w.scan_id));
        }
        let survival = match (w.time, w.event) {
            (Some(t), Some(e)) => Some((t, e != 0)),
            (None, None) => None,
            _ => return Err(DataError::PartialSurvival(w.scan_id)),
        };
        Ok(ReportRecord {
            scan_id: w.scan_id,
            report_text: w.report,
            clinical: w.clinical,
            survival,
        })
    }

    fn to_wire(&self) -> ReportWire {
        ReportWire {
            scan_id: self.scan_id.clone(),
            report: self.report_text.clone(),
            clinical: self.clinical.clone(),
            time: self.survival.map(|(t, _)| t),
            event: self.survival.map(|(_, e)| e as u8),
        }
    }
}

/// One extracted question-answer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub scan_id: String,
    pub question_id: usize,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskLaw {
    LinearInLesionSize,
    TwoGroup,
}

/// Configuration for [`generate_synth_cohort`]; generation is a pure
/// function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCohortConfig {
    pub n_patients: usize,
    pub censor_rate: f64,
    pub feature_dim: usize,
    pub risk_law: RiskLaw,
    pub seed: u64,
    /// Slope of the size→log-risk law.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl Default for SynthCohortConfig {
    fn default() -> Self {
        SynthCohortConfig {
            n_patients: 400,
            censor_rate: 0.25,
            feature_dim: 1,
            risk_law: RiskLaw::LinearInLesionSize,
            seed: 0,
            beta: 1.0,
        }
    }
}

impl SynthCohortConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_patients == 0 {
            return Err(DataError::BadConfig("n_patients must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(DataError::BadConfig(format!(
                "censor_rate {} outside [0, 1)",
                self.censor_rate
            )));
        }
        Ok(())
    }
}

// ── word frequency ─────────────────────────────────────────────────────────

/// Ranks corpus words by count (descending, ties lexicographic), dropping
/// stoplist entries and pure numbers, truncated to `top_k`.
pub fn word_frequency(
    corpus: &[ReportRecord],
    stoplist: &HashSet<String>,
    top_k: usize,
) -> Vec<(String, usize)> {
    assert!(top_k >= 1, "top_k must be ≥ 1");
    let mut counts: HashMap<String, usize> = HashMap::new();
    for rec in corpus {
        for w in split_words(&rec.report_text) {
            if stoplist.contains(&w) || w.chars().all(|c| c.is_ascii_digit()) {
                continue;
            }
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    ranked
}

/// A small default stoplist of report boilerplate.
pub fn default_stoplist() -> HashSet<String> {
    ["the", "is", "are", "a", "an", "of", "in", "no", "there", "and", "with", "to"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

// ── template extraction ────────────────────────────────────────────────────

/// One question template with its sentence-selection triggers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: usize,
    pub question: String,
    pub triggers: Vec<String>,
}

/// The fixed six-question set covering tumor, nodes, pleura, metastases,
/// vessels, and skeleton.
pub fn default_templates() -> Vec<QuestionTemplate> {
    let spec: [(&str, &[&str]); 6] = [
        (
            "Where is the primary tumor located and what is its size?",
            &["tumor", "mass", "lesion", "nodule", "cm", "mm"],
        ),
        (
            "Are there any abnormal lymph nodes?",
            &["lymph", "node", "nodes", "adenopathy", "lymphadenopathy"],
        ),
        (
            "Is there pleural involvement or effusion?",
            &["pleural", "pleura", "effusion"],
        ),
        (
            "Are there any metastases?",
            &["metastasis", "metastases", "metastatic", "spread"],
        ),
        (
            "Is there involvement of vessels or airways?",
            &["vessel", "vessels", "vascular", "artery", "airway", "bronchus", "bronchial"],
        ),
        (
            "Are there any skeletal changes?",
            &["bone", "bones", "skeletal", "rib", "ribs", "vertebra", "vertebral", "osseous", "lytic"],
        ),
    ];
    spec.iter()
        .enumerate()
        .map(|(i, (q, triggers))| QuestionTemplate {
            id: i + 1,
            question: q.to_string(),
            triggers: triggers.iter().map(|t| t.to_string()).collect(),
        })
        .collect()
}

/// Splits text into sentences at `.`, `!`, `?`, keeping the terminator.
/// A period between two digits is a decimal point, not a boundary.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        let c = chars[i];
        let boundary = match c {
            '!' | '?' => true,
            '.' => {
                let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
                let next_digit = i + 1 < chars.len() && chars[i + 1].is_ascii_digit();
                !(prev_digit && next_digit)
            }
            _ => false,
        };
        if boundary {
            let s: String = chars[start..=i].iter().collect();
            let s = s.trim().to_string();
            if !s.is_empty() {
                sentences.push(s);
            }
            start = i + 1;
        }
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim().to_string();
    if !tail.is_empty() {
        sentences.push(tail);
    }
    sentences
}

/// Applies every template's trigger rule to the report: an answer is the
/// document-order concatenation of sentences containing any trigger word,
/// or the fallback string when nothing matches.
pub fn extract_answers(report: &ReportRecord, templates: &[QuestionTemplate]) -> Vec<QAPair> {
    let sentences = split_sentences(&report.report_text);
    let sentence_words: Vec<HashSet<String>> = sentences
        .iter()
        .map(|s| split_words(s).into_iter().collect())
        .collect();
    templates
        .iter()
        .map(|tpl| {
            let hits: Vec<&str> = sentences
                .iter()
                .zip(&sentence_words)
                .filter(|(_, words)| tpl.triggers.iter().any(|t| words.contains(t)))
                .map(|(s, _)| s.as_str())
                .collect();
            let answer = if hits.is_empty() {
                FALLBACK_ANSWER.to_string()
            } else {
                hits.join(" ")
            };
            QAPair {
                scan_id: report.scan_id.clone(),
                question_id: tpl.id,
                question: tpl.question.clone(),
                answer,
            }
        })
        .collect()
}

// ── clinical sentence ──────────────────────────────────────────────────────

/// Serializes covariates into the fixed sentence template, omitting the
/// phrase around any missing key. The full set renders as e.g.
/// `64 year-old male former smoker lung cancer patient, stage 1, T stage is
/// T4, N stage is N1, M stage is M0.`
pub fn clinical_to_sentence(covariates: &BTreeMap<String, String>) -> String {
    if covariates.is_empty() {
        return String::new();
    }
    let mut head: Vec<String> = Vec::new();
    if let Some(age) = covariates.get("age") {
        head.push(format!("{age} year-old"));
    }
    if let Some(g) = covariates.get("gender") {
        head.push(g.clone());
    }
    if let Some(s) = covariates.get("smoking") {
        head.push(format!("{s} smoker"));
    }
    head.push("lung cancer patient".to_string());
    let mut sentence = head.join(" ");
    if let Some(st) = covariates.get("stage") {
        sentence.push_str(&format!(", stage {st}"));
    }
    for key in ["T", "N", "M"] {
        if let Some(v) = covariates.get(key) {
            sentence.push_str(&format!(", {key} stage is {v}"));
        }
    }
    sentence.push('.');
    sentence
}

// ── volume preprocessing ───────────────────────────────────────────────────

/// Sidecar metadata for a raw volume: shape and voxel spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

fn trilinear_sample(vol: &[f64], dims: [usize; 3], pos: [f64; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let clamp = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64);
    let (x, y, z) = (clamp(pos[0], nx), clamp(pos[1], ny), clamp(pos[2], nz));
    let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
    let (x1, y1, z1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1), (z0 + 1).min(nz - 1));
    let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
    let at = |x: usize, y: usize, z: usize| vol[(z * ny + y) * nx + x];
    let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

/// Clips to the Hounsfield range, trilinearly resamples from the source
/// spacing to `target_spacing` (index 0 aligned to index 0), then
/// center-crops or pads (fill −1000) to `target_dims`. Clipping precedes
/// resampling so interpolation cannot ring outside the range.
pub fn preprocess_volume(
    raw: &[f64],
    meta: &VolumeMeta,
    target_dims: [usize; 3],
    target_spacing: [f64; 3],
) -> Result<Vec<f64>, DataError> {
    if raw.is_empty() {
        return Err(DataError::EmptyVolume);
    }
    for &s in meta.spacing_mm.iter().chain(&target_spacing) {
        if s <= 0.0 {
            return Err(DataError::BadSpacing(s));
        }
    }
    let want = meta.dims.iter().product::<usize>();
    if raw.len() != want {
        return Err(DataError::VolumeSize {
            got: raw.len(),
            want,
            dims: meta.dims,
        });
    }

    let clipped: Vec<f64> = raw.iter().map(|&v| v.clamp(HU_RANGE.0, HU_RANGE.1)).collect();

    // Resample onto the target spacing.
    let mut res_dims = [0usize; 3];
    for a in 0..3 {
        let extent = meta.dims[a] as f64 * meta.spacing_mm[a];
        res_dims[a] = ((extent / target_spacing[a]).round() as usize).max(1);
    }
    let scale = [
        target_spacing[0] / meta.spacing_mm[0],
        target_spacing[1] / meta.spacing_mm[1],
        target_spacing[2] / meta.spacing_mm[2],
    ];
    let [rx, ry, rz] = res_dims;
    let mut resampled = vec![0.0; rx * ry * rz];
    for z in 0..rz {
        for y in 0..ry {
            for x in 0..rx {
                let pos = [x as f64 * scale[0], y as f64 * scale[1], z as f64 * scale[2]];
                resampled[(z * ry + y) * rx + x] = trilinear_sample(&clipped, meta.dims, pos);
            }
        }
    }

    // Center-crop or pad to the target shape.
    let [tx, ty, tz] = target_dims;
    let mut out = vec![HU_RANGE.0; tx * ty * tz];
    let span = [rx.min(tx), ry.min(ty), rz.min(tz)];
    let src0 = [
        rx.saturating_sub(tx) / 2,
        ry.saturating_sub(ty) / 2,
        rz.saturating_sub(tz) / 2,
    ];
    let dst0 = [
        tx.saturating_sub(rx) / 2,
        ty.saturating_sub(ry) / 2,
        tz.saturating_sub(rz) / 2,
    ];
    for z in 0..span[2] {
        for y in 0..span[1] {
            for x in 0..span[0] {
                let src = ((z + src0[2]) * ry + (y + src0[1])) * rx + (x + src0[0]);
                let dst = ((z + dst0[2]) * ty + (y + dst0[1])) * tx + (x + dst0[0]);
                out[dst] = resampled[src];
            }
        }
    }
    Ok(out)
}

// ── time grid ──────────────────────────────────────────────────────────────

/// Equal-frequency bin edges over uncensored event times: `edges[0] = 0`,
/// interior edges at midpoints between the rank-quantile neighbors, last
/// edge at the maximum observed time (events or censoring).
pub fn build_time_grid(records: &[SurvivalRecord], k: usize) -> Result<TimeGrid, DataError> {
    assert!(k >= 2, "need at least two bins");
    let mut event_times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    if event_times.len() < k {
        return Err(DataError::TooFewEventTimes {
            distinct: event_times.len(),
            k,
        });
    }
    let max_observed = records
        .iter()
        .map(|r| r.time)
        .fold(f64::NEG_INFINITY, f64::max);
    let n = event_times.len();
    let mut edges = vec![0.0];
    for i in 1..k {
        // Cut between the two times straddling cumulative count i·n/k.
        let c = ((i * n) as f64 / k as f64).round() as usize;
        let c = c.clamp(1, n - 1);
        let edge = 0.5 * (event_times[c - 1] + event_times[c]);
        if edge > *edges.last().unwrap() {
            edges.push(edge);
        }
    }
    if max_observed > *edges.last().unwrap() {
        edges.push(max_observed);
    }
    TimeGrid::new(edges).map_err(|e| DataError::BadConfig(e.to_string()))
}

// ── synthetic cohort ───────────────────────────────────────────────────────

/// A generated cohort: aligned per-patient volumes, covariates, reports,
/// survival records, and the true log-risks used to draw the times.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub volumes: Vec<Vec<f64>>,
    pub clinical: Vec<BTreeMap<String, String>>,
    pub reports: Vec<ReportRecord>,
    pub records: Vec<SurvivalRecord>,
    pub oracle_risks: Vec<f64>,
}

impl SynthCohort {
    /// C-index of the oracle risks on the generated labels: the recovery
    /// ceiling any trained model is scored against.
    pub fn oracle_ceiling(&self) -> f64 {
        concordance_index(&self.records, &self.oracle_risks).unwrap_or(0.5)
    }
}

const LESION_HU: f64 = 50.0;
const BACKGROUND_HU: f64 = -800.0;
/// Lesion cube edge range in voxels.
const LESION_MIN: f64 = 2.0;
const LESION_MAX: f64 = 10.0;

fn lesion_log_risk(cfg: &SynthCohortConfig, size: f64) -> f64 {
    match cfg.risk_law {
        // Centered and scaled so β = 1 spans log-risks of roughly ±2;
        // affine in size, so ranks (and the c-index ceiling) are those of
        // the raw β·s law while event times stay in a readable range.
        RiskLaw::LinearInLesionSize => cfg.beta * (size - 6.0) / 2.0,
        RiskLaw::TwoGroup => {
            if size >= 6.0 {
                cfg.beta
            } else {
                -cfg.beta
            }
        }
    }
}

struct PatientDraw {
    volume: Vec<f64>,
    size: f64,
    location: &'static str,
    clinical: BTreeMap<String, String>,
    log_risk: f64,
    event_time: f64,
    censor_u: f64,
}

fn draw_patient(cfg: &SynthCohortConfig, base: &Rng, i: usize) -> PatientDraw {
    let mut rng = base.substream(i as u64);
    let [nx, ny, nz] = DESK_VOLUME_DIMS;

    let size = rng.uniform_in(LESION_MIN, LESION_MAX);
    let edge = (size.round() as usize).clamp(1, nx.min(nz) - 1);

    // Lung-window background with mild noise, lesion as a bright cube.
    let mut volume: Vec<f64> = (0..nx * ny * nz)
        .map(|_| BACKGROUND_HU + 30.0 * rng.normal())
        .collect();
    let x0 = rng.below(nx - edge + 1);
    let y0 = rng.below(ny - edge + 1);
    let z0 = rng.below(nz - edge.min(nz) + 1);
    for dz in 0..edge.min(nz) {
        for dy in 0..edge {
            for dx in 0..edge {
                volume[((z0 + dz) * ny + (y0 + dy)) * nx + (x0 + dx)] =
                    LESION_HU + 10.0 * rng.normal();
            }
        }
    }

    let locations = [
        "left upper",
        "left lower",
        "right upper",
        "right middle",
        "right lower",
    ];
    let location = locations[rng.below(locations.len())];

    let mut clinical = BTreeMap::new();
    clinical.insert("age".into(), format!("{}", 40 + rng.below(40)));
    clinical.insert(
        "gender".into(),
        ["male", "female"][rng.below(2)].to_string(),
    );
    clinical.insert(
        "smoking".into(),
        ["never", "former", "current"][rng.below(3)].to_string(),
    );
    clinical.insert("stage".into(), format!("{}", 1 + rng.below(4)));
    clinical.insert("T".into(), format!("T{}", 1 + rng.below(4)));
    clinical.insert("N".into(), format!("N{}", rng.below(3)));
    clinical.insert("M".into(), format!("M{}", rng.below(2)));

    let log_risk = lesion_log_risk(cfg, size);
    let u: f64 = rng.uniform().max(1e-15);
    // Exponential with rate exp(log_risk): larger lesions die sooner.
    let event_time = -u.ln() / log_risk.exp();
    let censor_u = rng.uniform().max(1e-12);

    PatientDraw {
        volume,
        size,
        location,
        clinical,
        log_risk,
        event_time,
        censor_u,
    }
}

fn synth_report(draw: &PatientDraw) -> String {
    let size_cm = draw.size * DESK_TARGET_SPACING[0] / 10.0;
    let s = draw.size;
    let mut lines = vec![format!(
        "A {size_cm:.2} cm mass is located in the {} lobe.",
        draw.location
    )];
    lines.push(if s > 7.0 {
        "Enlarged mediastinal lymph nodes are present.".to_string()
    } else {
        "No abnormal lymph nodes.".to_string()
    });
    lines.push(if s > 8.0 {
        "There is a small pleural effusion.".to_string()
    } else {
        "No pleural effusion.".to_string()
    });
    lines.push(if s > 9.0 {
        "Multiple hepatic metastases are suspected.".to_string()
    } else {
        "No evidence of metastases.".to_string()
    });
    lines.push(if s > 6.0 {
        "The mass abuts the pulmonary artery.".to_string()
    } else {
        "No vascular invasion.".to_string()
    });
    lines.push(if s > 9.5 {
        "Lytic changes in the ribs.".to_string()
    } else {
        "No skeletal changes.".to_string()
    });
    lines.join(" ")
}

/// Finds a censoring horizon whose induced censoring fraction is within
/// ±0.05 of the target, by bisection on the (monotone) step function
/// `C ↦ mean(uᵢ·C < tᵢ)`.
fn tune_censor_horizon(times: &[f64], us: &[f64], rate: f64) -> f64 {
    let frac = |c: f64| {
        times
            .iter()
            .zip(us)
            .filter(|(&t, &u)| u * c < t)
            .count() as f64
            / times.len() as f64
    };
    let mut lo = 1e-12;
    let mut hi = times
        .iter()
        .zip(us)
        .map(|(&t, &u)| t / u)
        .fold(0.0f64, f64::max)
        * 2.0
        + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates the synthetic cohort. Bit-identical for equal configs: every
/// patient draws from its own counter-RNG substream, so the (possibly
/// parallel) per-patient work is order-independent.
pub fn generate_synth_cohort(cfg: &SynthCohortConfig) -> Result<SynthCohort, DataError> {
    cfg.validate()?;
    let base = Rng::new(cfg.seed, 7001);
    let cfg_ref = cfg.clone();
    let draws: Vec<PatientDraw> =
        exec::par_map_indices(cfg.n_patients, |i| draw_patient(&cfg_ref, &base, i));

    let times: Vec<f64> = draws.iter().map(|d| d.event_time).collect();
    let us: Vec<f64> = draws.iter().map(|d| d.censor_u).collect();
    let horizon = if cfg.censor_rate > 0.0 {
        Some(tune_censor_horizon(&times, &us, cfg.censor_rate))
    } else {
        None
    };

    let mut cohort = SynthCohort {
        dims: DESK_VOLUME_DIMS,
        spacing_mm: DESK_TARGET_SPACING,
        volumes: Vec::with_capacity(cfg.n_patients),
        clinical: Vec::with_capacity(cfg.n_patients),
        reports: Vec::with_capacity(cfg.n_patients),
        records: Vec::with_capacity(cfg.n_patients),
        oracle_risks: Vec::with_capacity(cfg.n_patients),
    };
    for (i, draw) in draws.into_iter().enumerate() {
        let scan_id = format!("synth-{i:04}");
        let (time, event) = match horizon {
            Some(c) => {
                let censor_time = draw.censor_u * c;
                if draw.event_time <= censor_time {
                    (draw.event_time, true)
                } else {
                    (censor_time, false)
                }
            }
            None => (draw.event_time, true),
        };
        let report_text = synth_report(&draw);
        cohort.reports.push(ReportRecord {
            scan_id: scan_id.clone(),
            report_text,
            clinical: Some(draw.clinical.clone()),
            survival: Some((time, event)),
        });
        cohort
            .records
            .push(SurvivalRecord::new(&scan_id, time, event));
        cohort.volumes.push(draw.volume);
        cohort.clinical.push(draw.clinical);
        cohort.oracle_risks.push(draw.log_risk);
    }
    Ok(cohort)
}

// ── file formats ───────────────────────────────────────────────────────────

/// Reads report JSONL, one object per line, with line-numbered errors.
pub fn read_reports_jsonl(path: &Path) -> Result<Vec<ReportRecord>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: ReportWire =
            serde_json::from_str(&line).map_err(|e| DataError::Jsonl {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        let rec = ReportRecord::from_wire(wire)?;
        if !seen.insert(rec.scan_id.clone()) {
            return Err(DataError::DuplicateScanId(rec.scan_id));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_reports_jsonl(path: &Path, records: &[ReportRecord]) -> Result<(), DataError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(&rec.to_wire())?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_qa_jsonl(path: &Path) -> Result<Vec<QAPair>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|e| DataError::Jsonl {
            line: idx + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(pairs)
}

pub fn write_qa_jsonl(path: &Path, pairs: &[QAPair]) -> Result<(), DataError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `<base>.json` (metadata) and `<base>.raw` (little-endian f32,
/// x-fastest).
pub fn write_volume(base: &Path, volume: &[f64], meta: &VolumeMeta) -> Result<(), DataError> {
    let want = meta.dims.iter().product::<usize>();
    if volume.len() != want {
        return Err(DataError::VolumeSize {
            got: volume.len(),
            want,
            dims: meta.dims,
        });
    }
    std::fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(meta)?,
    )?;
    let mut raw = Vec::with_capacity(volume.len() * 4);
    for &v in volume {
        raw.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(base.with_extension("raw"))?;
    f.write_all(&raw)?;
    Ok(())
}

pub fn read_volume(base: &Path) -> Result<(Vec<f64>, VolumeMeta), DataError> {
    let meta: VolumeMeta =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    let mut raw = Vec::new();
    std::fs::File::open(base.with_extension("raw"))?.read_to_end(&mut raw)?;
    let want = meta.dims.iter().product::<usize>();
    if raw.len() != want * 4 {
        return Err(DataError::VolumeSize {
            got: raw.len() / 4,
            want,
            dims: meta.dims,
        });
    }
    let volume = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((volume, meta))
}

/// Template config: JSON object mapping question_id → {question, triggers}.
pub fn read_templates(path: &Path) -> Result<Vec<QuestionTemplate>, DataError> {
    #[derive(Deserialize)]
    struct Entry {
        question: String,
        triggers: Vec<String>,
    }
    let raw: BTreeMap<String, Entry> =
        serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut templates = Vec::new();
    for (key, entry) in raw {
        let id: usize = key
            .parse()
            .map_err(|_| DataError::BadTemplates(format!("non-numeric question_id `{key}`")))?;
        if !(1..=6).contains(&id) {
            return Err(DataError::BadTemplates(format!(
                "question_id {id} outside 1–6"
            )));
        }
        templates.push(QuestionTemplate {
            id,
            question: entry.question,
            triggers: entry.triggers.iter().map(|t| t.to_lowercase()).collect(),
        });
    }
    templates.sort_by_key(|t| t.id);
    for w in templates.windows(2) {
        if w[0].id == w[1].id {
            return Err(DataError::BadTemplates(format!(
                "duplicate question_id {}",
                w[0].id
            )));
        }
    }
    Ok(templates)
}

pub fn write_templates(path: &Path, templates: &[QuestionTemplate]) -> Result<(), DataError> {
    #[derive(Serialize)]
    struct Entry<'a> {
        question: &'a str,
        triggers: &'a [String],
    }
    let map: BTreeMap<String, Entry> = templates
        .iter()
        .map(|t| {
            (
                t.id.to_string(),
                Entry {
                    question: &t.question,
                    triggers: &t.triggers,
                },
            )
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

/// Writes `rank,word,count` rows.
pub fn write_word_freq_csv(path: &Path, ranked: &[(String, usize)]) -> Result<(), DataError> {
    let mut out = String::from("rank,word,count\n");
    for (i, (word, count)) in ranked.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i + 1, word, count));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: &str, text: &str) -> ReportRecord {
        ReportRecord {
            scan_id: id.to_string(),
            report_text: text.to_string(),
            clinical: None,
            survival: None,
        }
    }

    // ── word frequency ──────────────────────────────────────────────────

    #[test]
    fn word_frequency_counts_and_ties() {
        let corpus = vec![report("a", "tumor tumor nodule")];
        let ranked = word_frequency(&corpus, &HashSet::new(), 2);
        assert_eq!(ranked, vec![("tumor".into(), 2), ("nodule".into(), 1)]);

        // Tie between mass and node breaks lexicographically.
        let corpus = vec![report("a", "node mass node mass mass node")];
        let ranked = word_frequency(&corpus, &HashSet::new(), 10);
        assert_eq!(ranked[0].0, "mass");
        assert_eq!(ranked[1].0, "node");
    }

    #[test]
    fn word_frequency_drops_stoplist_and_numbers() {
        let corpus = vec![report("a", "the mass is 45 mm the mass")];
        let stop: HashSet<String> = ["the", "is"].iter().map(|s| s.to_string()).collect();
        let ranked = word_frequency(&corpus, &stop, 10);
        let words: Vec<&str> = ranked.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, ["mass", "mm"]);
        assert_eq!(ranked[0].1, 2);
    }

    #[test]
    fn word_frequency_is_permutation_invariant_and_additive() {
        let a = report("a", "mass nodule mass");
        let b = report("b", "nodule pleural");
        let fwd = word_frequency(&[a.clone(), b.clone()], &HashSet::new(), 10);
        let rev = word_frequency(&[b.clone(), a.clone()], &HashSet::new(), 10);
        assert_eq!(fwd, rev);
        let only_a = word_frequency(&[a], &HashSet::new(), 10);
        let only_b = word_frequency(&[b], &HashSet::new(), 10);
        for (w, c) in &fwd {
            let ca = only_a.iter().find(|(x, _)| x == w).map_or(0, |(_, c)| *c);
            let cb = only_b.iter().find(|(x, _)| x == w).map_or(0, |(_, c)| *c);
            assert_eq!(*c, ca + cb);
        }
    }

    // ── sentence splitting and extraction ───────────────────────────────

    #[test]
    fn sentences_protect_decimal_points() {
        let s = split_sentences("A 3.5 cm mass. No effusion!");
        assert_eq!(s, vec!["A 3.5 cm mass.", "No effusion!"]);
    }

    #[test]
    fn extract_single_trigger_sentence() {
        let rec = report("s1", "Heart size normal. No pleural effusion. Lungs clear.");
        let qa = extract_answers(&rec, &default_templates());
        assert_eq!(qa.len(), 6);
        assert_eq!(qa[2].question_id, 3);
        assert_eq!(qa[2].answer, "No pleural effusion.");
    }

    #[test]
    fn extract_falls_back_when_unanswerable() {
        let rec = report("s2", "A small mass in the left lobe.");
        let qa = extract_answers(&rec, &default_templates());
        // No skeletal mention → template 6 gets the fallback.
        assert_eq!(qa[5].question_id, 6);
        assert_eq!(qa[5].answer, FALLBACK_ANSWER);
        assert!(qa.iter().all(|p| !p.answer.is_empty()));
    }

    #[test]
    fn extract_concatenates_hits_in_document_order() {
        let rec = report(
            "s3",
            "Enlarged lymph nodes in the hilum. Heart normal. Further lymph node enlargement in the neck.",
        );
        let qa = extract_answers(&rec, &default_templates());
        assert_eq!(
            qa[1].answer,
            "Enlarged lymph nodes in the hilum. Further lymph node enlargement in the neck."
        );
    }

    #[test]
    fn extract_is_deterministic() {
        let rec = report("s4", "A 2.10 cm nodule. No pleural effusion. Rib erosion.");
        let tpl = default_templates();
        let a = extract_answers(&rec, &tpl);
        let b = extract_answers(&rec, &tpl);
        assert_eq!(a, b);
    }

    // ── clinical sentence ───────────────────────────────────────────────

    fn full_covariates() -> BTreeMap<String, String> {
        [
            ("age", "64"),
            ("gender", "male"),
            ("smoking", "former"),
            ("stage", "1"),
            ("T", "T4"),
            ("N", "N1"),
            ("M", "M0"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    #[test]
    fn clinical_sentence_full_template() {
        assert_eq!(
            clinical_to_sentence(&full_covariates()),
            "64 year-old male former smoker lung cancer patient, stage 1, \
             T stage is T4, N stage is N1, M stage is M0."
        );
    }

    #[test]
    fn clinical_sentence_empty_and_partial() {
        assert_eq!(clinical_to_sentence(&BTreeMap::new()), "");
        let mut cov = full_covariates();
        cov.remove("smoking");
        assert_eq!(
            clinical_to_sentence(&cov),
            "64 year-old male lung cancer patient, stage 1, \
             T stage is T4, N stage is N1, M stage is M0."
        );
    }

    // ── volume preprocessing ────────────────────────────────────────────

    #[test]
    fn preprocess_clips_to_hounsfield_range() {
        let meta = VolumeMeta {
            dims: [2, 2, 2],
            spacing_mm: [1.5, 1.5, 3.0],
        };
        let raw = vec![1500.0, -2000.0, 0.0, 999.0, -999.0, 1000.0, -1000.0, 123.0];
        let out = preprocess_volume(&raw, &meta, [2, 2, 2], [1.5, 1.5, 3.0]).unwrap();
        assert_eq!(out[0], 1000.0);
        assert_eq!(out[1], -1000.0);
        assert!(out.iter().all(|&v| (-1000.0..=1000.0).contains(&v)));
    }

    #[test]
    fn preprocess_bounds_hold_on_random_volumes() {
        let mut rng = Rng::new(70, 0);
        for trial in 0..20 {
            let dims = [
                2 + rng.below(6),
                2 + rng.below(6),
                2 + rng.below(4),
            ];
            let n = dims[0] * dims[1] * dims[2];
            let raw: Vec<f64> = (0..n).map(|_| rng.uniform_in(-5000.0, 5000.0)).collect();
            let meta = VolumeMeta {
                dims,
                spacing_mm: [rng.uniform_in(0.5, 3.0), rng.uniform_in(0.5, 3.0), rng.uniform_in(1.0, 5.0)],
            };
            let out = preprocess_volume(&raw, &meta, [4, 4, 4], [1.5, 1.5, 3.0]).unwrap();
            assert_eq!(out.len(), 64, "trial {trial}");
            assert!(out.iter().all(|&v| (-1000.0..=1000.0).contains(&v)));
        }
    }

    #[test]
    fn preprocess_constant_volume_stays_constant() {
        let meta = VolumeMeta {
            dims: [4, 4, 4],
            spacing_mm: [2.0, 2.0, 2.0],
        };
        let raw = vec![42.0; 64];
        // Resampled region keeps the constant; padding (if any) is −1000.
        let out = preprocess_volume(&raw, &meta, [5, 5, 5], [1.6, 1.6, 1.6]).unwrap();
        for &v in &out {
            assert!(v == 42.0 || v == -1000.0);
        }
        assert!(out.iter().filter(|&&v| v == 42.0).count() >= 64);
    }

    #[test]
    fn preprocess_upsampled_ramp_hits_midpoints() {
        // 1D ramp along x, spacing halved → sample positions land on
        // integers and exact midpoints.
        let meta = VolumeMeta {
            dims: [4, 1, 1],
            spacing_mm: [2.0, 1.0, 1.0],
        };
        let raw = vec![0.0, 10.0, 20.0, 30.0];
        let out = preprocess_volume(&raw, &meta, [8, 1, 1], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 5.0);
        assert_eq!(out[2], 10.0);
        assert_eq!(out[3], 15.0);
        assert_eq!(out[4], 20.0);
        assert_eq!(out[5], 25.0);
        assert_eq!(out[6], 30.0);
        // Past the last source sample the clamp holds the edge value.
        assert_eq!(out[7], 30.0);
    }

    #[test]
    fn preprocess_rejects_bad_inputs() {
        let meta = VolumeMeta {
            dims: [2, 2, 2],
            spacing_mm: [0.0, 1.0, 1.0],
        };
        assert!(matches!(
            preprocess_volume(&[0.0; 8], &meta, [2, 2, 2], [1.0, 1.0, 1.0]),
            Err(DataError::BadSpacing(_))
        ));
        let meta = VolumeMeta {
            dims: [2, 2, 2],
            spacing_mm: [1.0, 1.0, 1.0],
        };
        assert!(matches!(
            preprocess_volume(&[0.0; 7], &meta, [2, 2, 2], [1.0, 1.0, 1.0]),
            Err(DataError::VolumeSize { .. })
        ));
        assert!(matches!(
            preprocess_volume(&[], &meta, [2, 2, 2], [1.0, 1.0, 1.0]),
            Err(DataError::EmptyVolume)
        ));
    }

    #[test]
    fn preprocess_pads_centered_with_air() {
        let meta = VolumeMeta {
            dims: [2, 2, 2],
            spacing_mm: [1.0, 1.0, 1.0],
        };
        let raw = vec![7.0; 8];
        let out = preprocess_volume(&raw, &meta, [4, 4, 4], [1.0, 1.0, 1.0]).unwrap();
        // 2³ block of 7s centered at offset 1, air elsewhere.
        let at = |x: usize, y: usize, z: usize| out[(z * 4 + y) * 4 + x];
        assert_eq!(at(1, 1, 1), 7.0);
        assert_eq!(at(2, 2, 2), 7.0);
        assert_eq!(at(0, 0, 0), -1000.0);
        assert_eq!(at(3, 3, 3), -1000.0);
        assert_eq!(out.iter().filter(|&&v| v == 7.0).count(), 8);
    }

    // ── time grid ───────────────────────────────────────────────────────

    fn event_records(times: &[f64]) -> Vec<SurvivalRecord> {
        times
            .iter()
            .enumerate()
            .map(|(i, &t)| SurvivalRecord::new(format!("p{i}"), t, true))
            .collect()
    }

    #[test]
    fn time_grid_median_split() {
        let recs = event_records(&[1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]);
        let grid = build_time_grid(&recs, 2).unwrap();
        assert_eq!(grid.edges, vec![0.0, 5.5, 10.0]);
    }

    #[test]
    fn time_grid_one_event_per_bin_at_full_k() {
        let recs = event_records(&[2.0, 4.0, 6.0, 8.0]);
        let grid = build_time_grid(&recs, 4).unwrap();
        assert_eq!(grid.bins(), 4);
        for (i, &t) in [2.0, 4.0, 6.0, 8.0].iter().enumerate() {
            assert_eq!(grid.bin_of(t).unwrap(), i + 1);
        }
    }

    #[test]
    fn time_grid_scales_with_time() {
        let times = [1., 3., 4., 7., 9., 12., 15.];
        let doubled: Vec<f64> = times.iter().map(|t| t * 2.0).collect();
        let g1 = build_time_grid(&event_records(&times), 3).unwrap();
        let g2 = build_time_grid(&event_records(&doubled), 3).unwrap();
        for (a, b) in g1.edges.iter().zip(&g2.edges) {
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn time_grid_needs_enough_distinct_events() {
        let recs = event_records(&[5.0, 5.0, 5.0]);
        assert!(matches!(
            build_time_grid(&recs, 2),
            Err(DataError::TooFewEventTimes { distinct: 1, k: 2 })
        ));
    }

    #[test]
    fn time_grid_covers_every_record_with_balanced_bins() {
        let mut rng = Rng::new(71, 0);
        for trial in 0..20 {
            let n = 20 + rng.below(60);
            let k = 2 + rng.below(5);
            // Distinct times: a strictly increasing random walk.
            let mut t = 0.0;
            let times: Vec<f64> = (0..n)
                .map(|_| {
                    t += rng.uniform_in(0.1, 2.0);
                    t
                })
                .collect();
            let recs = event_records(&times);
            let grid = build_time_grid(&recs, k).unwrap();
            let mut pops = vec![0usize; grid.bins()];
            for r in &recs {
                let b = grid.bin_of(r.time).unwrap();
                pops[b - 1] += 1;
            }
            assert_eq!(pops.iter().sum::<usize>(), n, "trial {trial}");
            let lo = *pops.iter().min().unwrap();
            let hi = *pops.iter().max().unwrap();
            assert!(hi - lo <= 1, "trial {trial}: populations {pops:?}");
        }
    }

    // ── synthetic cohort ────────────────────────────────────────────────

    fn small_cfg() -> SynthCohortConfig {
        SynthCohortConfig {
            n_patients: 60,
            censor_rate: 0.25,
            ..SynthCohortConfig::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = generate_synth_cohort(&small_cfg()).unwrap();
        let b = generate_synth_cohort(&small_cfg()).unwrap();
        assert_eq!(a.volumes, b.volumes);
        assert_eq!(a.records, b.records);
        assert_eq!(a.oracle_risks, b.oracle_risks);
        assert_eq!(a.reports, b.reports);
        let c = generate_synth_cohort(&SynthCohortConfig {
            seed: 99,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a.oracle_risks, c.oracle_risks);
    }

    #[test]
    fn synth_zero_censoring_gives_all_events() {
        let cohort = generate_synth_cohort(&SynthCohortConfig {
            censor_rate: 0.0,
            ..small_cfg()
        })
        .unwrap();
        assert!(cohort.records.iter().all(|r| r.event));
    }

    #[test]
    fn synth_hits_requested_censor_rate() {
        for rate in [0.25, 0.5, 0.8] {
            let cohort = generate_synth_cohort(&SynthCohortConfig {
                n_patients: 400,
                censor_rate: rate,
                ..SynthCohortConfig::default()
            })
            .unwrap();
            let censored = cohort.records.iter().filter(|r| !r.event).count() as f64 / 400.0;
            assert!(
                (censored - rate).abs() <= 0.05,
                "rate {rate}: observed {censored}"
            );
        }
    }

    #[test]
    fn synth_zero_beta_has_no_signal() {
        let cohort = generate_synth_cohort(&SynthCohortConfig {
            beta: 0.0,
            censor_rate: 0.0,
            ..small_cfg()
        })
        .unwrap();
        // All oracle risks equal → every pair ties → exactly 1/2.
        assert_eq!(cohort.oracle_ceiling(), 0.5);
    }

    #[test]
    fn synth_default_ceiling_is_informative() {
        let cohort = generate_synth_cohort(&SynthCohortConfig {
            n_patients: 200,
            ..SynthCohortConfig::default()
        })
        .unwrap();
        let ceiling = cohort.oracle_ceiling();
        assert!(ceiling > 0.65 && ceiling < 1.0, "ceiling {ceiling}");
    }

    #[test]
    fn synth_reports_answer_all_templates() {
        let cohort = generate_synth_cohort(&small_cfg()).unwrap();
        let templates = default_templates();
        for rec in &cohort.reports {
            let qa = extract_answers(rec, &templates);
            assert_eq!(qa.len(), 6);
            // The tumor template always finds the size sentence.
            assert!(qa[0].answer.contains("mass"));
            assert_ne!(qa[0].answer, FALLBACK_ANSWER);
            // Every template yields a nonempty answer (possibly fallback).
            assert!(qa.iter().all(|p| !p.answer.is_empty()));
        }
    }

    #[test]
    fn synth_volumes_have_lesion_contrast() {
        let cohort = generate_synth_cohort(&small_cfg()).unwrap();
        for vol in &cohort.volumes {
            let max = vol.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mean = vol.iter().sum::<f64>() / vol.len() as f64;
            // The bright cube stands out from the lung background.
            assert!(max > -200.0);
            assert!(mean < -400.0);
        }
    }

    #[test]
    fn synth_two_group_law() {
        let cohort = generate_synth_cohort(&SynthCohortConfig {
            risk_law: RiskLaw::TwoGroup,
            censor_rate: 0.0,
            ..small_cfg()
        })
        .unwrap();
        let distinct: HashSet<u64> = cohort.oracle_risks.iter().map(|r| r.to_bits()).collect();
        assert_eq!(distinct.len(), 2);
    }

    // ── file round-trips ────────────────────────────────────────────────

    #[test]
    fn reports_jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports.jsonl");
        let records = vec![
            ReportRecord {
                scan_id: "a".into(),
                report_text: "A mass.".into(),
                clinical: Some(full_covariates()),
                survival: Some((12.5, true)),
            },
            ReportRecord {
                scan_id: "b".into(),
                report_text: "Clear lungs.".into(),
                clinical: None,
                survival: None,
            },
        ];
        write_reports_jsonl(&path, &records).unwrap();
        assert_eq!(read_reports_jsonl(&path).unwrap(), records);

        std::fs::write(&path, "{\"scan_id\":\"a\",\"report\":\"x.\"}\nnot json\n").unwrap();
        match read_reports_jsonl(&path) {
            Err(DataError::Jsonl { line: 2, .. }) => {}
            other => panic!("expected line-2 error, got {other:?}"),
        }

        std::fs::write(
            &path,
            "{\"scan_id\":\"a\",\"report\":\"x.\"}\n{\"scan_id\":\"a\",\"report\":\"y.\"}\n",
        )
        .unwrap();
        assert!(matches!(
            read_reports_jsonl(&path),
            Err(DataError::DuplicateScanId(_))
        ));

        std::fs::write(&path, "{\"scan_id\":\"a\",\"report\":\"x.\",\"time\":3.0}\n").unwrap();
        assert!(matches!(
            read_reports_jsonl(&path),
            Err(DataError::PartialSurvival(_))
        ));
    }

    #[test]
    fn qa_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let rec = report("s1", "A 1.20 cm mass. No pleural effusion.");
        let pairs = extract_answers(&rec, &default_templates());
        write_qa_jsonl(&path, &pairs).unwrap();
        assert_eq!(read_qa_jsonl(&path).unwrap(), pairs);
    }

    #[test]
    fn volume_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("vol-0001");
        let meta = VolumeMeta {
            dims: [3, 2, 2],
            spacing_mm: [1.5, 1.5, 3.0],
        };
        let mut rng = Rng::new(72, 0);
        let volume: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1000.0, 1000.0)).collect();
        write_volume(&base, &volume, &meta).unwrap();
        let (loaded, meta2) = read_volume(&base).unwrap();
        assert_eq!(meta2, meta);
        for (a, b) in volume.iter().zip(&loaded) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn templates_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.json");
        let templates = default_templates();
        assert_eq!(templates.len(), 6);
        assert_eq!(templates[0].id, 1);
        write_templates(&path, &templates).unwrap();
        assert_eq!(read_templates(&path).unwrap(), templates);

        std::fs::write(&path, "{\"9\": {\"question\": \"q\", \"triggers\": []}}").unwrap();
        assert!(matches!(
            read_templates(&path),
            Err(DataError::BadTemplates(_))
        ));
    }

    #[test]
    fn word_freq_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("freq.csv");
        write_word_freq_csv(&path, &[("mass".into(), 3), ("node".into(), 1)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "rank,word,count\n1,mass,3\n2,node,1\n");
    }
}
