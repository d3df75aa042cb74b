//! Supervised fine-tuning: answer-masked cross-entropy, batched gradients,
//! Adam, the epoch loop and a finite-difference gradient checker.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_features, AudioError, MelSpectrogram};
use crate::corpus::{stream_seed, Manifest};
use crate::eval::{confusion, generate_local, Prediction};
use crate::model::checkpoint::{save_adapters, save_model, CheckpointError, NamedTensor, TensorFile};
use crate::model::{
    log_softmax_rows, AudioInput, AudioTokens, GradientSet, ModelError, MultimodalModel, ParamClass, TrainableMask,
};
use crate::promptkit::{assemble_sequence, render_prompt, PromptTemplate, SegmentTag, TemplateId, TokenSequence};
use crate::Label;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss error: {0}")]
    Loss(String),
    #[error("non-finite {what}")]
    Numeric { what: String },
    #[error("training config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub prompt_mode: TemplateId,
    pub seed: u64,
    /// Max global L2 gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Train every base parameter instead of adapters only.
    pub full_finetune: bool,
    /// Dev metrics use constrained decoding instead of free-form + parse.
    pub dev_constrained: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            batch_size: 8,
            prompt_mode: TemplateId::Multi,
            seed: 0,
            grad_clip: None,
            full_finetune: false,
            dev_constrained: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_acc: Option<f64>,
    pub dev_mf1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Everything except wall-clock time, for replay comparisons.
    pub fn trajectory(&self) -> Vec<(usize, f64, Option<f64>, Option<f64>)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.loss, r.dev_acc, r.dev_mf1))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("epoch,loss,dev_acc,dev_mf1,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.8},{},{},{:.3}",
                r.epoch,
                r.loss,
                fmt(r.dev_acc),
                fmt(r.dev_mf1),
                r.seconds
            );
        }
        out
    }
}

/// Positions `t` whose next token is answer-tagged, with that target token.
fn answer_targets(seq: &TokenSequence) -> Vec<(usize, usize)> {
    (0..seq.len().saturating_sub(1))
        .filter(|&t| seq.segment_tags[t + 1] == SegmentTag::Answer)
        .map(|t| (t, seq.tokens[t + 1] as usize))
        .collect()
}

fn check_alignment(logits: &Array2<f64>, seq: &TokenSequence) -> Result<Vec<(usize, usize)>, TrainError> {
    if logits.nrows() != seq.len() {
        return Err(TrainError::Loss(format!(
            "logits have {} rows for a {}-token sequence",
            logits.nrows(),
            seq.len()
        )));
    }
    let targets = answer_targets(seq);
    if targets.is_empty() {
        return Err(TrainError::Loss("sequence has no answer region".into()));
    }
    Ok(targets)
}

/// Mean cross-entropy over positions that predict answer tokens (including the final EOS).
pub fn answer_loss(logits: &Array2<f64>, seq: &TokenSequence) -> Result<f64, TrainError> {
    Ok(answer_loss_grad(logits, seq)?.0)
}

/// Loss and `d loss / d logits`; rows outside the answer region are exactly zero.
pub fn answer_loss_grad(logits: &Array2<f64>, seq: &TokenSequence) -> Result<(f64, Array2<f64>), TrainError> {
    let targets = check_alignment(logits, seq)?;
    let n = targets.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for &(t, target) in &targets {
        let row = logits.slice(ndarray::s![t..t + 1, ..]).to_owned();
        let logp = log_softmax_rows(&row);
        loss -= logp[[0, target]];
        let mut d = dlogits.row_mut(t);
        for (j, lp) in logp.row(0).iter().enumerate() {
            d[j] = lp.exp() / n;
        }
        d[target] -= 1.0 / n;
    }
    Ok((loss / n, dlogits))
}

/// One supervised example. `dropout_seed` enables adapter dropout (training mode).
#[derive(Clone, Copy)]
pub struct TrainExample<'a> {
    pub audio: AudioInput<'a>,
    pub seq: &'a TokenSequence,
    pub dropout_seed: Option<u64>,
}

fn example_gradient(
    model: &MultimodalModel,
    ex: &TrainExample,
    mask: TrainableMask,
) -> Result<(f64, GradientSet), TrainError> {
    let mut rng = ex.dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let (logits, cache) = model.forward_train(ex.audio, ex.seq, rng.as_mut())?;
    let (loss, dlogits) = answer_loss_grad(&logits, ex.seq)?;
    if !loss.is_finite() {
        return Err(TrainError::Numeric { what: "loss".into() });
    }
    let grads = model.backward(&dlogits, &cache, mask);
    Ok((loss, MultimodalModel::gradient_set(&grads, mask)))
}

/// Mean loss over the batch and its exact gradient for every parameter allowed by `mask`.
/// Examples run in parallel and are reduced in input order, so results do not
/// depend on the worker count.
pub fn backward(
    model: &MultimodalModel,
    batch: &[TrainExample],
    mask: TrainableMask,
) -> Result<(f64, GradientSet), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Data("empty batch".into()));
    }
    let parts: Vec<_> = batch
        .par_iter()
        .map(|ex| example_gradient(model, ex, mask))
        .collect::<Result<_, _>>()?;
    let mut total = GradientSet::default();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.accumulate(g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    kind: String,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = AdamMeta {
            kind: "adam".into(),
            step: self.step,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        };
        let mut tensors = Vec::new();
        for (prefix, map) in [("m.", &self.m), ("v.", &self.v)] {
            for (name, data) in map {
                tensors.push(NamedTensor {
                    name: format!("{prefix}{name}"),
                    shape: vec![data.len()],
                    data: data.clone(),
                });
            }
        }
        TensorFile {
            meta: serde_json::to_value(meta).expect("serializable"),
            tensors,
        }
        .write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = TensorFile::read(path)?;
        let meta: AdamMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| TrainError::Data(format!("{}: optimizer metadata: {e}", path.display())))?;
        if meta.kind != "adam" {
            return Err(TrainError::Data(format!("{}: not an optimizer state", path.display())));
        }
        let mut state = AdamState {
            step: meta.step,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            ..AdamState::default()
        };
        for t in file.tensors {
            if let Some(name) = t.name.strip_prefix("m.") {
                state.m.insert(name.to_string(), t.data);
            } else if let Some(name) = t.name.strip_prefix("v.") {
                state.v.insert(name.to_string(), t.data);
            } else {
                return Err(TrainError::Data(format!("{}: unexpected tensor {}", path.display(), t.name)));
            }
        }
        Ok(state)
    }
}

/// Bias-corrected Adam update of every parameter that has a gradient in `grads`.
pub fn adam_step(
    model: &mut MultimodalModel,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for p in model.params_mut() {
        let Some(g) = grads.get(&p.name) else { continue };
        if g.len() != p.data.len() {
            return Err(TrainError::Data(format!(
                "gradient for {} has {} values, parameter has {}",
                p.name,
                g.len(),
                p.data.len()
            )));
        }
        let m = state.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Features (and, with a frozen encoder, audio tokens) for one utterance.
pub struct PreparedUtterance {
    pub utt_id: String,
    pub label: Label,
    pub mel: MelSpectrogram,
    pub tokens: Option<AudioTokens>,
}

/// Loads and featurizes every manifest entry in parallel, keeping manifest order.
pub fn prepare_utterances(
    model: &MultimodalModel,
    manifest: &Manifest,
    cache_tokens: bool,
) -> Result<Vec<PreparedUtterance>, TrainError> {
    manifest
        .entries
        .par_iter()
        .map(|rec| {
            let path = manifest.resolve(rec);
            let mel = load_features(&path).map_err(|e| TrainError::Data(format!("{}: {e}", rec.utt_id)))?;
            let tokens = if cache_tokens {
                Some(model.encode_audio(&mel)?)
            } else {
                None
            };
            Ok(PreparedUtterance {
                utt_id: rec.utt_id.clone(),
                label: rec.label,
                mel,
                tokens,
            })
        })
        .collect()
}

/// (utterance index, template, supervised sequence). MULTI pairs each utterance with both prompts.
pub fn build_examples(
    model: &MultimodalModel,
    utts: &[PreparedUtterance],
    mode: TemplateId,
) -> Result<Vec<(usize, TemplateId, TokenSequence)>, TrainError> {
    let mut out = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        let n_audio = model.config.n_audio_tokens(u.mel.n_frames());
        for t in mode.expand() {
            let tpl = PromptTemplate::get(t);
            let seq = assemble_sequence(n_audio, &tpl.texts[0], Some(tpl.answer_for(u.label)))
                .map_err(|e| TrainError::Data(e.to_string()))?;
            out.push((i, t, seq));
        }
    }
    Ok(out)
}

fn audio_input(u: &PreparedUtterance) -> AudioInput<'_> {
    match &u.tokens {
        Some(t) => AudioInput::Tokens(t),
        None => AudioInput::Mel(&u.mel),
    }
}

/// Dev predictions for every (utterance, prompt) pair of `mode`.
pub fn predict_prepared(
    model: &MultimodalModel,
    utts: &[PreparedUtterance],
    mode: TemplateId,
    constrained: bool,
) -> Result<Vec<Prediction>, TrainError> {
    let pairs: Vec<(usize, TemplateId)> = (0..utts.len())
        .flat_map(|i| mode.expand().into_iter().map(move |t| (i, t)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, t)| {
            let u = &utts[i];
            let encoded;
            let audio = match &u.tokens {
                Some(tok) => tok,
                None => {
                    encoded = model.encode_audio(&u.mel)?;
                    &encoded
                }
            };
            let text = generate_local(model, audio, render_prompt(t)[0], constrained)?;
            Ok(Prediction::from_text(&u.utt_id, t, &text, u.label))
        })
        .collect()
}

fn mask_for(model: &MultimodalModel, cfg: &TrainConfig) -> Result<TrainableMask, TrainError> {
    if cfg.full_finetune {
        return Ok(TrainableMask {
            lora: model.lora.is_some(),
            ..TrainableMask::ALL
        });
    }
    if model.lora.is_none() {
        return Err(TrainError::Config(
            "no adapters attached; attach LoRA or enable full fine-tuning".into(),
        ));
    }
    Ok(model.trainable_mask())
}

fn needs_encoder_grad(model: &MultimodalModel, mask: TrainableMask) -> bool {
    mask.encoder
        || mask.adapter
        || (mask.lora && model.lora.as_ref().is_some_and(|s| s.config.include_encoder))
}

pub struct FinetuneOutcome {
    pub model: MultimodalModel,
    pub history: TrainHistory,
    /// Checkpoint written after the final epoch, if an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

fn write_checkpoint(model: &MultimodalModel, cfg: &TrainConfig, path: &Path) -> Result<(), TrainError> {
    if cfg.full_finetune || model.lora.is_none() {
        save_model(model, path)?;
    } else {
        save_adapters(model, path)?;
    }
    Ok(())
}

/// Epoch loop: seeded shuffle, batched Adam updates, dev metrics and a
/// checkpoint per epoch. The final-epoch weights are returned.
pub fn finetune(
    mut model: MultimodalModel,
    train: &Manifest,
    dev: Option<&Manifest>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data("training manifest is empty".into()));
    }
    if dev.is_some_and(|d| d.is_empty()) {
        return Err(TrainError::Data("dev manifest is empty".into()));
    }
    let mask = mask_for(&model, cfg)?;
    let cache = !needs_encoder_grad(&model, mask);
    let train_utts = prepare_utterances(&model, train, cache)?;
    let dev_utts = dev.map(|d| prepare_utterances(&model, d, cache)).transpose()?;
    let examples = build_examples(&model, &train_utts, cfg.prompt_mode)?;
    log::info!(
        "finetune: {} utterances, {} examples/epoch, {} trainable values",
        train_utts.len(),
        examples.len(),
        model
            .params()
            .iter()
            .filter(|p| mask.allows(&p.name))
            .map(|p| p.data.len())
            .sum::<usize>()
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "shuffle"));
    let mut adam = AdamState::default();
    let mut history = TrainHistory::default();
    let mut last_good: Option<PathBuf> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .map(|&i| {
                    let (u, _, seq) = &examples[i];
                    TrainExample {
                        audio: audio_input(&train_utts[*u]),
                        seq,
                        dropout_seed: Some(stream_seed(cfg.seed, &format!("dropout/{epoch}/{i}"))),
                    }
                })
                .collect();
            let diverged = || TrainError::Diverged {
                epoch,
                step,
                last_good: last_good.clone(),
            };
            let (loss, mut grads) = match backward(&model, &batch, mask) {
                Ok(r) => r,
                Err(TrainError::Numeric { .. }) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !grads.all_finite() {
                return Err(diverged());
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut model, &grads, &mut adam, cfg.lr)?;
            if !model.all_finite() {
                return Err(diverged());
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let mean_loss = loss_sum / examples.len() as f64;
        let (dev_acc, dev_mf1) = match &dev_utts {
            Some(utts) => {
                let preds = predict_prepared(&model, utts, cfg.prompt_mode, cfg.dev_constrained)?;
                let (c, _, _) = confusion(&preds);
                (c.accuracy(), c.macro_f1())
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            loss: mean_loss,
            dev_acc,
            dev_mf1,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.5} dev_acc {:?} dev_mf1 {:?} ({:.1}s)",
            dev_acc,
            dev_mf1,
            record.seconds
        );
        history.records.push(record);
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{epoch:02}.ckpt"));
            write_checkpoint(&model, cfg, &path)?;
            adam.save(&dir.join("optimizer.state"))?;
            let hist = dir.join("history.csv");
            std::fs::write(&hist, history.to_csv()).map_err(|source| TrainError::Io { path: hist, source })?;
            last_good = Some(path);
        }
    }
    Ok(FinetuneOutcome {
        model,
        history,
        checkpoint: last_good,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of each template's seed-chosen preferred answer.
    pub answer_bias: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            answer_bias: 0.7,
        }
    }
}

/// Teaches a freshly initialized model the answer format without any label
/// information. Each example's answer is drawn independently of the true class:
/// a per-template preferred answer (chosen from the seed) with probability
/// `answer_bias`, otherwise uniformly among the rest. Only decoder weights are
/// trained; encoder and adapter keep their initialization.
pub fn pretrain_format(
    mut model: MultimodalModel,
    corpus: &Manifest,
    cfg: &PretrainConfig,
) -> Result<(MultimodalModel, Vec<f64>), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::Data("pretraining corpus is empty".into()));
    }
    if model.lora.is_some() {
        return Err(TrainError::Config("pretrain a base model without adapters".into()));
    }
    if !(0.0..=1.0).contains(&cfg.answer_bias) {
        return Err(TrainError::Config(format!("answer_bias {} outside [0, 1]", cfg.answer_bias)));
    }
    let mask = TrainableMask {
        encoder: false,
        adapter: false,
        decoder: true,
        lora: false,
    };
    let utts = prepare_utterances(&model, corpus, true)?;
    let templates = [TemplateId::P1, TemplateId::P2, TemplateId::P3];
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "format"));
    let preferred: Vec<usize> = templates
        .iter()
        .map(|&t| rng.random_range(0..PromptTemplate::get(t).answer_set.len()))
        .collect();
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seqs: Vec<(usize, TokenSequence)> = (0..cfg.batch_size)
            .map(|_| {
                let u = rng.random_range(0..utts.len());
                let ti = rng.random_range(0..templates.len());
                let tpl = PromptTemplate::get(templates[ti]);
                let n_answers = tpl.answer_set.len();
                let pick = if n_answers == 1 || rng.random_bool(cfg.answer_bias) {
                    preferred[ti]
                } else {
                    (preferred[ti] + rng.random_range(1..n_answers)) % n_answers
                };
                let answer = &tpl.answer_set[pick];
                let n_audio = model.config.n_audio_tokens(utts[u].mel.n_frames());
                let seq = assemble_sequence(n_audio, &tpl.texts[0], Some(answer))
                    .map_err(|e| TrainError::Data(e.to_string()))?;
                Ok((u, seq))
            })
            .collect::<Result<_, TrainError>>()?;
        let batch: Vec<TrainExample> = seqs
            .iter()
            .map(|(u, seq)| TrainExample {
                audio: audio_input(&utts[*u]),
                seq,
                dropout_seed: None,
            })
            .collect();
        let (loss, grads) = backward(&model, &batch, mask)?;
        if !grads.all_finite() {
            return Err(TrainError::Diverged {
                epoch: 0,
                step,
                last_good: None,
            });
        }
        adam_step(&mut model, &grads, &mut adam, cfg.lr)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub class: ParamClass,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn classes(&self) -> std::collections::BTreeSet<ParamClass> {
        self.entries.iter().map(|e| e.class).collect()
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is below finite-difference resolution from dominating the maximum.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients with central differences at `per_tensor`
/// random coordinates of every tensor allowed by `mask`.
pub fn gradient_check(
    model: &MultimodalModel,
    batch: &[TrainExample],
    mask: TrainableMask,
    per_tensor: usize,
    eps: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let batch: Vec<TrainExample> = batch
        .iter()
        .map(|ex| TrainExample {
            dropout_seed: None,
            ..*ex
        })
        .collect();
    let (_, grads) = backward(model, &batch, mask)?;
    let loss_of = |m: &MultimodalModel| -> Result<f64, TrainError> {
        let mut total = 0.0;
        for ex in &batch {
            let (logits, _) = m.forward_train(ex.audio, ex.seq, None)?;
            total += answer_loss(&logits, ex.seq)?;
        }
        Ok(total / batch.len() as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<(String, ParamClass, usize)> = model
        .params()
        .iter()
        .filter(|p| mask.allows(&p.name))
        .flat_map(|p| {
            let n = p.data.len();
            let picks: Vec<usize> = (0..per_tensor.min(n)).map(|_| rng.random_range(0..n)).collect();
            picks.into_iter().map(move |i| (p.name.clone(), p.class, i)).collect::<Vec<_>>()
        })
        .collect();
    let entries = targets
        .par_iter()
        .map(|(name, class, idx)| {
            let shifted = |delta: f64| -> Result<f64, TrainError> {
                let mut m = model.clone();
                for p in m.params_mut() {
                    if &p.name == name {
                        p.data[*idx] += delta;
                    }
                }
                loss_of(&m)
            };
            let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
            let analytic = grads.get(name).map_or(0.0, |g| g[*idx]);
            Ok(GradCheckEntry {
                name: name.clone(),
                class: *class,
                index: *idx,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, floor),
            })
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(GradCheckReport { entries })
}
