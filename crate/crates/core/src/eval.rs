//! Held-out evaluation of a trained checkpoint: prompt-ensemble risk
//! scores, concordance, median-stratified Kaplan–Meier curves with the
//! log-rank test, and token-level answer quality.
//!
//! All forward passes run on frozen weights, so patients (and generated
//! answers) fan out across threads. Everything downstream of the risks is
//! plain statistics, exposed separately so oracle risk vectors can flow
//! through the identical summary path.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataprep::{default_templates, QAPair};
use crate::exec;
use crate::model::{ensemble_predict, generate, ModelError, ModelParams, Tokenizer};
use crate::rng::Rng;
use crate::survstats::{
    concordance_index, km_rows, log_rank_test, stratify_median, token_f1, write_km_csv, KmRow,
    RiskGroupLabel, SurvStatsError, SurvivalRecord,
};
use crate::train::{tokenize_question, TrainData};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs at least 2 labeled patients, got {0}")]
    CohortTooSmall(usize),
    #[error("no QA pairs reference a labeled patient")]
    NoAnswerPairs,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] SurvStatsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// QA pairs scored for answer quality per run; larger sets are sampled
/// down to this many.
pub const MAX_F1_PAIRS: usize = 500;

/// Decoding budget per generated answer (trimmed further when the packed
/// sequence would overflow the model's context).
pub const MAX_ANSWER_TOKENS: usize = 48;

// ── report shapes ──────────────────────────────────────────────────────────

/// The full, fixed key set of `metrics.json`. Adding or renaming a field
/// is a wire-format version bump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    pub c_index: f64,
    pub token_f1_mean: f64,
    pub log_rank_p: f64,
    pub log_rank_degenerate: bool,
    pub n: usize,
    pub n_censored: usize,
}

/// One labeled patient ready for frozen-checkpoint inference.
#[derive(Debug, Clone)]
pub struct EvalPatient {
    pub scan_id: String,
    pub clinical_ids: Vec<usize>,
    pub z_v: Vec<f64>,
    pub record: SurvivalRecord,
}

/// Everything `evaluate` produces: the metrics payload plus the
/// plot-ready stratified curves and the raw risks behind them.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub risks: Vec<f64>,
    pub km_high: Vec<KmRow>,
    pub km_low: Vec<KmRow>,
}

/// Survival metrics derived from a risk vector alone.
#[derive(Debug, Clone)]
pub struct RiskSummary {
    pub c_index: f64,
    pub log_rank_p: f64,
    pub log_rank_degenerate: bool,
    pub km_high: Vec<KmRow>,
    pub km_low: Vec<KmRow>,
}

// ── cohort assembly ────────────────────────────────────────────────────────

/// Narrows an assembled dataset to its labeled patients, in dataset
/// order. Unlabeled patients cannot enter survival metrics and are
/// dropped.
pub fn eval_patients(data: &TrainData) -> Vec<EvalPatient> {
    data.patients
        .iter()
        .filter_map(|p| {
            p.record.clone().map(|record| EvalPatient {
                scan_id: p.scan_id.clone(),
                clinical_ids: p.clinical_ids.clone(),
                z_v: p.z_v.clone(),
                record,
            })
        })
        .collect()
}

/// The six fixed prompts, tokenized in template order.
pub fn ensemble_questions(tok: &Tokenizer) -> Vec<Vec<usize>> {
    default_templates()
        .iter()
        .map(|t| tokenize_question(tok, &t.question))
        .collect()
}

// ── risk prediction ────────────────────────────────────────────────────────

/// Prompt-ensemble risk per patient, fanned out over the frozen weights.
/// Output order matches input order regardless of worker count.
pub fn predict_risks(
    params: &ModelParams,
    patients: &[EvalPatient],
    questions: &[Vec<usize>],
) -> Result<Vec<f64>, EvalError> {
    let out = exec::par_map(patients, |p| {
        ensemble_predict(params, &p.clinical_ids, &p.z_v, questions)
    });
    Ok(out.into_iter().collect::<Result<Vec<_>, _>>()?)
}

// ── survival summary ───────────────────────────────────────────────────────

/// C-index plus the median-stratified log-rank comparison and both KM
/// curves. A split with no usable separation — an empty stratum, no
/// events, or zero log-rank variance (all risks tied lands here) — is not
/// an error: it reports p = 1 with the degenerate flag set.
pub fn summarize_risks(
    records: &[SurvivalRecord],
    risks: &[f64],
) -> Result<RiskSummary, EvalError> {
    if records.len() < 2 {
        return Err(EvalError::CohortTooSmall(records.len()));
    }
    let c_index = concordance_index(records, risks)?;
    let labels = stratify_median(risks);
    let split = |want: RiskGroupLabel| -> Vec<SurvivalRecord> {
        records
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == want)
            .map(|(r, _)| r.clone())
            .collect()
    };
    let high = split(RiskGroupLabel::High);
    let low = split(RiskGroupLabel::Low);

    let (log_rank_p, log_rank_degenerate) = if high.is_empty() || low.is_empty() {
        (1.0, true)
    } else {
        match log_rank_test(&high, &low) {
            // A statistic of exactly zero carries no separation signal
            // (zero variance collapses to this pair too).
            Ok((statistic, p)) => (p, statistic == 0.0),
            Err(SurvStatsError::DegenerateTest) => (1.0, true),
            Err(e) => return Err(e.into()),
        }
    };

    let km_of = |group: &[SurvivalRecord]| -> Result<Vec<KmRow>, EvalError> {
        if group.is_empty() {
            Ok(Vec::new())
        } else {
            Ok(km_rows(group)?)
        }
    };
    Ok(RiskSummary {
        c_index,
        log_rank_p,
        log_rank_degenerate,
        km_high: km_of(&high)?,
        km_low: km_of(&low)?,
    })
}

// ── answer quality ─────────────────────────────────────────────────────────

/// Mean token-level F1 of greedily generated answers against their
/// reference texts. At most `max_pairs` QA pairs are scored; larger sets
/// are sampled deterministically from `seed`. Pairs whose scan has no
/// labeled patient are ignored.
pub fn answer_f1_mean(
    params: &ModelParams,
    tok: &Tokenizer,
    patients: &[EvalPatient],
    qa: &[QAPair],
    max_pairs: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let by_scan: HashMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, p)| (p.scan_id.as_str(), i))
        .collect();
    let usable: Vec<&QAPair> = qa
        .iter()
        .filter(|pair| by_scan.contains_key(pair.scan_id.as_str()))
        .collect();
    if usable.is_empty() {
        return Err(EvalError::NoAnswerPairs);
    }
    let picked: Vec<&QAPair> = if usable.len() > max_pairs {
        let mut idx: Vec<usize> = (0..usable.len()).collect();
        Rng::new(seed, 700_000).shuffle(&mut idx);
        idx.truncate(max_pairs);
        idx.sort_unstable();
        idx.into_iter().map(|i| usable[i]).collect()
    } else {
        usable
    };

    let max_len = params.config.max_len;
    let d_vis = params.config.d_vis;
    let scores = exec::par_map(&picked, |pair| -> Result<f64, ModelError> {
        let patient = &patients[by_scan[pair.scan_id.as_str()]];
        let question = tokenize_question(tok, &pair.question);
        let prefix = patient.clinical_ids.len() + patient.z_v.len() / d_vis + question.len();
        let budget = MAX_ANSWER_TOKENS.min(max_len.saturating_sub(prefix));
        let ids = generate(params, &patient.clinical_ids, &patient.z_v, &question, budget)?;
        Ok(token_f1(&tok.decode(&ids), &pair.answer))
    });
    let vals: Vec<f64> = scores.into_iter().collect::<Result<_, _>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

// ── top level ──────────────────────────────────────────────────────────────

/// Full evaluation pass: ensemble risks, survival summary, and answer
/// quality. `qa` supplies the reference answer texts for token F1.
pub fn evaluate(
    params: &ModelParams,
    tok: &Tokenizer,
    patients: &[EvalPatient],
    qa: &[QAPair],
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if patients.len() < 2 {
        return Err(EvalError::CohortTooSmall(patients.len()));
    }
    let questions = ensemble_questions(tok);
    let risks = predict_risks(params, patients, &questions)?;
    let records: Vec<SurvivalRecord> = patients.iter().map(|p| p.record.clone()).collect();
    let summary = summarize_risks(&records, &risks)?;
    let token_f1_mean = answer_f1_mean(params, tok, patients, qa, MAX_F1_PAIRS, seed)?;
    Ok(EvalReport {
        metrics: EvalMetrics {
            c_index: summary.c_index,
            token_f1_mean,
            log_rank_p: summary.log_rank_p,
            log_rank_degenerate: summary.log_rank_degenerate,
            n: records.len(),
            n_censored: records.iter().filter(|r| !r.event).count(),
        },
        risks,
        km_high: summary.km_high,
        km_low: summary.km_low,
    })
}

/// Writes `metrics.json` and the two stratified KM curves into `dir`.
pub fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&report.metrics)?;
    std::fs::write(dir.join("metrics.json"), json + "\n")?;
    write_km_csv(&dir.join("km_high.csv"), &report.km_high)?;
    write_km_csv(&dir.join("km_low.csv"), &report.km_low)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, HeadKind, ModelConfig, BOA_ID};

    fn tiny_model(head: HeadKind, seed: u64) -> ModelParams {
        let config = ModelConfig {
            d_text: 16,
            d_vis: 4,
            n_layers: 2,
            n_heads: 2,
            vocab: 40,
            max_len: 48,
            conv1_channels: 2,
            conv1_kernel: [2, 2, 2],
            conv2_kernel: [2, 2, 1],
            adaptor_bottleneck: 3,
            head,
            tied_output: true,
            ensemble_size: 6,
        };
        init_params(&config, seed)
    }

    fn tiny_tok() -> Tokenizer {
        let questions: Vec<String> = default_templates()
            .iter()
            .map(|t| t.question.clone())
            .collect();
        Tokenizer::from_corpus(&questions, 40)
    }

    fn tiny_patients(n: usize, seed: u64) -> Vec<EvalPatient> {
        let mut rng = Rng::new(seed, 88);
        (0..n)
            .map(|i| EvalPatient {
                scan_id: format!("e{i}"),
                clinical_ids: vec![3, 4 + (i % 3)],
                z_v: (0..3 * 4).map(|_| rng.normal()).collect(),
                record: SurvivalRecord::new(format!("e{i}"), 1.0 + 0.9 * i as f64, i % 4 != 2),
            })
            .collect()
    }

    fn tiny_qa(patients: &[EvalPatient]) -> Vec<QAPair> {
        let templates = default_templates();
        patients
            .iter()
            .flat_map(|p| {
                templates.iter().map(|t| QAPair {
                    scan_id: p.scan_id.clone(),
                    question_id: t.id,
                    question: t.question.clone(),
                    answer: "there are no metastases".to_string(),
                })
            })
            .collect()
    }

    #[test]
    fn metrics_json_has_exactly_the_documented_keys() {
        let metrics = EvalMetrics {
            c_index: 0.7,
            token_f1_mean: 0.4,
            log_rank_p: 0.01,
            log_rank_degenerate: false,
            n: 10,
            n_censored: 3,
        };
        let value = serde_json::to_value(&metrics).unwrap();
        let obj = value.as_object().unwrap();
        // Value maps sort alphabetically; the contract is the key set.
        let keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
        assert_eq!(
            keys,
            vec![
                "c_index",
                "log_rank_degenerate",
                "log_rank_p",
                "n",
                "n_censored",
                "token_f1_mean"
            ]
        );
        // Round trip is exact and unknown keys are rejected.
        let back: EvalMetrics = serde_json::from_value(value.clone()).unwrap();
        assert_eq!(back, metrics);
        let mut extra = value;
        extra.as_object_mut().unwrap().insert("bonus".into(), 1.into());
        assert!(serde_json::from_value::<EvalMetrics>(extra).is_err());
    }

    #[test]
    fn oracle_risks_pass_through_unchanged() {
        let mut rng = Rng::new(4, 0);
        let records: Vec<SurvivalRecord> = (0..20)
            .map(|i| {
                SurvivalRecord::new(format!("p{i}"), rng.uniform_in(0.5, 9.0), rng.uniform() < 0.75)
            })
            .collect();
        let risks: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let summary = summarize_risks(&records, &risks).unwrap();
        assert_eq!(summary.c_index, concordance_index(&records, &risks).unwrap());
    }

    #[test]
    fn tied_risks_report_degenerate_split() {
        let records: Vec<SurvivalRecord> = (0..6)
            .map(|i| SurvivalRecord::new(format!("p{i}"), 1.0 + i as f64, true))
            .collect();
        let risks = vec![0.3; 6];
        let summary = summarize_risks(&records, &risks).unwrap();
        assert_eq!(summary.c_index, 0.5);
        assert_eq!(summary.log_rank_p, 1.0);
        assert!(summary.log_rank_degenerate);
        // Everything lands in the Low stratum.
        assert!(summary.km_high.is_empty());
        assert_eq!(summary.km_low.len(), 6);
    }

    #[test]
    fn median_split_feeds_the_expected_records_to_km() {
        let records: Vec<SurvivalRecord> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| SurvivalRecord::new(format!("p{i}"), t, true))
            .collect();
        // Lower median of risks is 2.0: patients 2 and 3 are High.
        let risks = vec![1.0, 2.0, 3.0, 4.0];
        let summary = summarize_risks(&records, &risks).unwrap();
        assert_eq!(summary.km_high, km_rows(&records[2..]).unwrap());
        assert_eq!(summary.km_low, km_rows(&records[..2]).unwrap());
        assert!(!summary.log_rank_degenerate);
    }

    #[test]
    fn summaries_reject_single_patient_cohorts() {
        let records = vec![SurvivalRecord::new("p0", 1.0, true)];
        assert!(matches!(
            summarize_risks(&records, &[0.5]),
            Err(EvalError::CohortTooSmall(1))
        ));
    }

    #[test]
    fn ensemble_questions_match_the_template_set() {
        let tok = tiny_tok();
        let questions = ensemble_questions(&tok);
        assert_eq!(questions.len(), 6);
        for q in &questions {
            assert_eq!(*q.last().unwrap(), BOA_ID);
        }
        // Distinct prompts tokenize distinctly.
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(questions[i], questions[j]);
            }
        }
    }

    #[test]
    fn predicted_risks_match_per_patient_calls() {
        let params = tiny_model(HeadKind::Continuous, 9);
        let tok = tiny_tok();
        let patients = tiny_patients(3, 9);
        let questions = ensemble_questions(&tok);
        let risks = predict_risks(&params, &patients, &questions).unwrap();
        for (p, &risk) in patients.iter().zip(&risks) {
            let want = ensemble_predict(&params, &p.clinical_ids, &p.z_v, &questions).unwrap();
            assert_eq!(risk, want);
        }
    }

    #[test]
    fn answer_f1_sampling_is_deterministic_and_capped() {
        let params = tiny_model(HeadKind::Continuous, 10);
        let tok = tiny_tok();
        let patients = tiny_patients(3, 10);
        let qa = tiny_qa(&patients); // 18 pairs
        let a = answer_f1_mean(&params, &tok, &patients, &qa, 5, 77).unwrap();
        let b = answer_f1_mean(&params, &tok, &patients, &qa, 5, 77).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
        // A different sampling seed may pick a different subset but must
        // stay in range.
        let c = answer_f1_mean(&params, &tok, &patients, &qa, 5, 78).unwrap();
        assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn answer_f1_requires_matching_pairs() {
        let params = tiny_model(HeadKind::Continuous, 11);
        let tok = tiny_tok();
        let patients = tiny_patients(2, 11);
        let mut qa = tiny_qa(&patients);
        for pair in &mut qa {
            pair.scan_id = "elsewhere".to_string();
        }
        assert!(matches!(
            answer_f1_mean(&params, &tok, &patients, &qa, 10, 0),
            Err(EvalError::NoAnswerPairs)
        ));
    }

    #[test]
    fn evaluate_writes_the_declared_artifacts() {
        for head in [HeadKind::Continuous, HeadKind::Discrete { bins: 3 }] {
            let params = tiny_model(head, 12);
            let tok = tiny_tok();
            let patients = tiny_patients(5, 12);
            let qa = tiny_qa(&patients);
            let report = evaluate(&params, &tok, &patients, &qa, 0).unwrap();
            assert_eq!(report.risks.len(), 5);
            assert_eq!(report.metrics.n, 5);
            assert_eq!(report.metrics.n_censored, 1);
            assert!(report.metrics.c_index.is_finite());
            assert!((0.0..=1.0).contains(&report.metrics.token_f1_mean));

            let dir = tempfile::tempdir().unwrap();
            write_eval_outputs(dir.path(), &report).unwrap();
            let metrics: EvalMetrics = serde_json::from_str(
                &std::fs::read_to_string(dir.path().join("metrics.json")).unwrap(),
            )
            .unwrap();
            assert_eq!(metrics, report.metrics);
            for name in ["km_high.csv", "km_low.csv"] {
                let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
                assert!(text.starts_with("time,survival,at_risk,events"), "{name}: {text}");
            }
        }
    }

    #[test]
    fn evaluate_rejects_tiny_cohorts() {
        let params = tiny_model(HeadKind::Continuous, 13);
        let tok = tiny_tok();
        let patients = tiny_patients(1, 13);
        let qa = tiny_qa(&patients);
        assert!(matches!(
            evaluate(&params, &tok, &patients, &qa, 0),
            Err(EvalError::CohortTooSmall(1))
        ));
    }
}
