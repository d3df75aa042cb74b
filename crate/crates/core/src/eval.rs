//! Decoding, prediction collection and classification metrics.
//!
//! Spoof is the positive class. Predictions that parse to `Unknown` (or whose
//! backend call failed) are excluded from every metric and counted in `n_excluded`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, DetectorBackend};
use crate::corpus::Manifest;
use crate::model::{log_softmax_rows, AudioTokens, ModelError, MultimodalModel};
use crate::promptkit::{
    assemble_sequence, detokenize, parse_answer, AnswerValue, ParsedAnswer, PromptTemplate, TemplateId,
    BYTE_OFFSET, EOS,
};
use crate::Label;

pub const MAX_NEW_TOKENS: usize = 16;
/// Fraction of failed backend calls above which a run is marked degraded.
pub const DEGRADED_ERROR_RATE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: no predictions left after excluding {excluded} of {total}")]
    UndefinedMetric { total: usize, excluded: usize },
    #[error("generation failed for {utt_id}: {source}")]
    Generation { utt_id: String, source: BackendError },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error on {path}: {msg}")]
    Csv { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub utt_id: String,
    pub template: TemplateId,
    pub raw_text: String,
    pub parsed: AnswerValue,
    pub truth: Label,
    /// Backend failure message; such predictions are excluded like unknowns.
    pub error: Option<String>,
}

impl Prediction {
    pub fn from_text(utt_id: &str, template: TemplateId, raw: &str, truth: Label) -> Self {
        let parsed: ParsedAnswer = parse_answer(raw, &PromptTemplate::get(template));
        Self {
            utt_id: utt_id.to_string(),
            template,
            raw_text: raw.to_string(),
            parsed: parsed.value,
            truth,
            error: None,
        }
    }

    pub fn failed(utt_id: &str, template: TemplateId, truth: Label, error: String) -> Self {
        Self {
            utt_id: utt_id.to_string(),
            template,
            raw_text: String::new(),
            parsed: AnswerValue::Unknown,
            truth,
            error: Some(error),
        }
    }

    pub fn predicted(&self) -> Option<Label> {
        if self.error.is_some() {
            return None;
        }
        self.parsed.label()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(hit: usize, false_pos: usize, false_neg: usize) -> ClassMetrics {
    let precision = ratio(hit, hit + false_pos);
    let recall = ratio(hit, hit + false_neg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

impl Confusion {
    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Spoof, Label::Spoof) => self.tp += 1,
            (Label::Bonafide, Label::Spoof) => self.fp += 1,
            (Label::Bonafide, Label::Bonafide) => self.tn += 1,
            (Label::Spoof, Label::Bonafide) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.tp + self.tn) as f64 / self.total() as f64)
    }

    pub fn spoof(&self) -> ClassMetrics {
        class_metrics(self.tp, self.fp, self.fn_)
    }

    pub fn bonafide(&self) -> ClassMetrics {
        class_metrics(self.tn, self.fn_, self.fp)
    }

    /// Mean of the two per-class F1 scores.
    pub fn macro_f1(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.spoof().f1 + self.bonafide().f1) / 2.0)
    }
}

/// Confusion counts over non-excluded predictions, plus `(total, excluded)`.
pub fn confusion(preds: &[Prediction]) -> (Confusion, usize, usize) {
    let mut c = Confusion::default();
    let mut excluded = 0;
    for p in preds {
        match p.predicted() {
            Some(label) => c.add(p.truth, label),
            None => excluded += 1,
        }
    }
    (c, preds.len(), excluded)
}

pub fn accuracy(preds: &[Prediction]) -> Result<f64, EvalError> {
    let (c, total, excluded) = confusion(preds);
    c.accuracy().ok_or(EvalError::UndefinedMetric { total, excluded })
}

pub fn macro_f1(preds: &[Prediction]) -> Result<f64, EvalError> {
    let (c, total, excluded) = confusion(preds);
    c.macro_f1().ok_or(EvalError::UndefinedMetric { total, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub prompt: String,
    pub n_total: usize,
    pub n_excluded: usize,
    pub n_errors: usize,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub spoof: ClassMetrics,
    pub bonafide: ClassMetrics,
    pub degraded: bool,
}

pub fn summarize(model: &str, prompt: &str, preds: &[Prediction]) -> Result<EvalReport, EvalError> {
    let (c, total, excluded) = confusion(preds);
    let n_errors = preds.iter().filter(|p| p.error.is_some()).count();
    let (Some(accuracy), Some(macro_f1)) = (c.accuracy(), c.macro_f1()) else {
        return Err(EvalError::UndefinedMetric { total, excluded });
    };
    Ok(EvalReport {
        model: model.to_string(),
        prompt: prompt.to_string(),
        n_total: total,
        n_excluded: excluded,
        n_errors,
        confusion: c,
        accuracy,
        macro_f1,
        spoof: c.spoof(),
        bonafide: c.bonafide(),
        degraded: n_errors as f64 > DEGRADED_ERROR_RATE * total as f64,
    })
}

/// Index of the largest logit among EOS and byte tokens.
fn greedy_token(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = EOS;
    let mut best_v = row[EOS as usize];
    for t in BYTE_OFFSET as usize..row.len() {
        if row[t] > best_v {
            best_v = row[t];
            best = t as u32;
        }
    }
    best
}

/// Greedy decoding after `prompt`: at most [`MAX_NEW_TOKENS`] tokens, stopping at EOS.
pub fn generate_free(model: &MultimodalModel, audio: &AudioTokens, prompt: &str) -> Result<String, ModelError> {
    let seq = assemble_sequence(audio.len(), prompt, None).map_err(|e| ModelError::Input(e.to_string()))?;
    let (logits, mut state) = model.prefill(audio, &seq)?;
    let mut next = greedy_token(logits.row(logits.nrows() - 1));
    let mut out = Vec::new();
    while next != EOS && out.len() < MAX_NEW_TOKENS {
        out.push(next);
        if out.len() == MAX_NEW_TOKENS || seq.len() + out.len() >= model.config.max_seq {
            break;
        }
        let row = model.extend(&mut state, &[next])?;
        next = greedy_token(row.row(0));
    }
    Ok(detokenize(&out))
}

/// Mean log-probability of each candidate's bytes plus the terminating EOS.
pub fn candidate_scores(
    model: &MultimodalModel,
    audio: &AudioTokens,
    prompt: &str,
    candidates: &[String],
) -> Result<Vec<f64>, ModelError> {
    let seq = assemble_sequence(audio.len(), prompt, None).map_err(|e| ModelError::Input(e.to_string()))?;
    let (logits, state) = model.prefill(audio, &seq)?;
    let last = log_softmax_rows(&logits.slice(ndarray::s![logits.nrows() - 1.., ..]).to_owned());
    candidates
        .iter()
        .map(|cand| {
            let mut targets: Vec<u32> = cand.bytes().map(|b| b as u32 + BYTE_OFFSET).collect();
            targets.push(EOS);
            let mut st = state.clone();
            let rows = log_softmax_rows(&model.extend(&mut st, &targets[..targets.len() - 1])?);
            let mut total = last[[0, targets[0] as usize]];
            for (i, &t) in targets.iter().enumerate().skip(1) {
                total += rows[[i - 1, t as usize]];
            }
            Ok(total / targets.len() as f64)
        })
        .collect()
}

/// Highest-scoring answer string; ties go to the earlier candidate.
pub fn generate_constrained(
    model: &MultimodalModel,
    audio: &AudioTokens,
    prompt: &str,
    candidates: &[String],
) -> Result<String, ModelError> {
    let scores = candidate_scores(model, audio, prompt, candidates)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(candidates[best].clone())
}

/// Local generation; the answer set comes from the template whose text matches `prompt`.
pub fn generate_local(
    model: &MultimodalModel,
    audio: &AudioTokens,
    prompt: &str,
    constrained: bool,
) -> Result<String, ModelError> {
    if constrained {
        let answers = PromptTemplate::for_text(prompt)
            .map(|t| t.answer_set)
            .unwrap_or_else(|| vec!["bonafide".to_string(), "spoof".to_string()]);
        generate_constrained(model, audio, prompt, &answers)
    } else {
        generate_free(model, audio, prompt)
    }
}

/// Backend-agnostic generation for one utterance.
pub fn generate(
    backend: &dyn DetectorBackend,
    wav_path: &Path,
    prompt: &str,
    constrained: bool,
) -> Result<String, BackendError> {
    backend.classify(wav_path, prompt, constrained)
}

/// One prediction per (utterance, prompt) pair, sorted by utterance id then prompt.
pub fn run_predictions(
    backend: &dyn DetectorBackend,
    manifest: &Manifest,
    mode: TemplateId,
    constrained: bool,
) -> Vec<Prediction> {
    let templates = mode.expand();
    let mut order: Vec<_> = manifest.entries.iter().collect();
    order.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut items = Vec::with_capacity(order.len() * templates.len());
    for rec in &order {
        for &t in &templates {
            items.push((manifest.resolve(rec), render_prompt_text(t)));
        }
    }
    let results = backend.classify_batch(&items, constrained);
    let mut preds = Vec::with_capacity(items.len());
    let mut it = results.into_iter();
    for rec in &order {
        for &t in &templates {
            let pred = match it.next().expect("one result per item") {
                Ok(text) => Prediction::from_text(&rec.utt_id, t, &text, rec.label),
                Err(e) => {
                    log::warn!("{}: {e}", rec.utt_id);
                    Prediction::failed(&rec.utt_id, t, rec.label, e.to_string())
                }
            };
            preds.push(pred);
        }
    }
    preds
}

fn render_prompt_text(t: TemplateId) -> String {
    crate::promptkit::render_prompt(t)[0].to_string()
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub predictions: Vec<Prediction>,
    pub reports: Vec<EvalReport>,
}

/// Runs every (utterance, prompt) pair and summarizes per prompt.
pub fn evaluate(
    backend: &dyn DetectorBackend,
    manifest: &Manifest,
    mode: TemplateId,
    constrained: bool,
) -> Result<EvalRun, EvalError> {
    if manifest.is_empty() {
        return Err(EvalError::UndefinedMetric { total: 0, excluded: 0 });
    }
    let predictions = run_predictions(backend, manifest, mode, constrained);
    let model = backend.name();
    let reports = mode
        .expand()
        .into_iter()
        .map(|t| {
            let subset: Vec<Prediction> = predictions.iter().filter(|p| p.template == t).cloned().collect();
            summarize(&model, t.as_str(), &subset)
        })
        .collect::<Result<_, _>>()?;
    Ok(EvalRun { predictions, reports })
}

pub fn write_predictions_csv(preds: &[Prediction], path: &Path) -> Result<(), EvalError> {
    let csv_err = |e: csv::Error| EvalError::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["utt_id", "prompt_id", "raw_text", "parsed", "truth"])
        .map_err(csv_err)?;
    for p in preds {
        let parsed = if p.error.is_some() { "error" } else { p.parsed.as_str() };
        w.write_record([p.utt_id.as_str(), p.template.as_str(), &p.raw_text, parsed, p.truth.as_str()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let csv_err = |msg: String| EvalError::Csv {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_err(e.to_string()))?;
        if row.len() != 5 {
            return Err(csv_err(format!("row {}: expected 5 fields", i + 2)));
        }
        let template: TemplateId = row[1].parse().map_err(|e| csv_err(format!("row {}: {e}", i + 2)))?;
        let truth: Label = row[4].parse().map_err(|e| csv_err(format!("row {}: {e}", i + 2)))?;
        let (parsed, error) = match &row[3] {
            "bonafide" => (AnswerValue::Bonafide, None),
            "spoof" => (AnswerValue::Spoof, None),
            "unknown" => (AnswerValue::Unknown, None),
            "error" => (AnswerValue::Unknown, Some("backend error".to_string())),
            other => return Err(csv_err(format!("row {}: bad parsed value {other:?}", i + 2))),
        };
        out.push(Prediction {
            utt_id: row[0].to_string(),
            template,
            raw_text: row[2].to_string(),
            parsed,
            truth,
            error,
        });
    }
    Ok(out)
}

pub fn write_report_json(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer_pretty(&mut w, reports).map_err(|e| io_err(io::Error::other(e)))?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_report_json(path: &Path) -> Result<Vec<EvalReport>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Plain-text table: one row per model × prompt, columns ACC and mF1.
pub fn render_table(reports: &[EvalReport]) -> String {
    let w_model = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let w_prompt = reports.iter().map(|r| r.prompt.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w_model$}  {:<w_prompt$}  {:>6}  {:>6}  {:>5}", "model", "prompt", "ACC", "mF1", "excl");
    for r in reports {
        let flag = if r.degraded { "  (degraded)" } else { "" };
        let _ = writeln!(
            out,
            "{:<w_model$}  {:<w_prompt$}  {:>6.4}  {:>6.4}  {:>5}{flag}",
            r.model, r.prompt, r.accuracy, r.macro_f1, r.n_excluded
        );
    }
    out
}

pub fn render_table_csv(reports: &[EvalReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "prompt", "acc", "mf1", "n_total", "n_excluded"]).expect("in-memory");
    for r in reports {
        w.write_record([
            r.model.clone(),
            r.prompt.clone(),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.macro_f1),
            r.n_total.to_string(),
            r.n_excluded.to_string(),
        ])
        .expect("in-memory");
    }
    String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
}
