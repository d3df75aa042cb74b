//! Toy multimodal language model: audio encoder → modality adapter → causal decoder.
//!
//! Audio tokens replace the `AUDIO_PLACEHOLDER` positions of the decoder input,
//! so the decoder sees `[BOS, audio…, prompt…, answer…]` as one causal sequence.

pub mod checkpoint;
pub mod nn;

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{MelSpectrogram, N_MELS};
use crate::lora::{LoraAdapterSet, Stack};
use crate::promptkit::{TokenSequence, AUDIO_PLACEHOLDER, VOCAB_SIZE};
use nn::{Block, BlockCache, BlockLora, Dropout, GradNeeds, LayerNorm, Linear, LnCache};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("sequence has {placeholders} audio placeholders but {audio} audio tokens were given")]
    Alignment { placeholders: usize, audio: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    TooLong { len: usize, max: usize },
    #[error("input error: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub adapter_stride: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub n_mels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 256,
            adapter_stride: 4,
            max_seq: 1024,
            vocab: VOCAB_SIZE,
            n_mels: N_MELS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return err("d_model must be divisible by n_heads");
        }
        if self.adapter_stride == 0 {
            return err("adapter_stride must be >= 1");
        }
        if self.vocab != VOCAB_SIZE {
            return err("vocab must match the byte tokenizer (260)");
        }
        if self.n_mels == 0 || self.max_seq < 2 {
            return err("n_mels must be positive and max_seq >= 2");
        }
        Ok(())
    }

    fn block_params(&self) -> usize {
        let d = self.d_model;
        4 * d + 4 * (d * d + d) + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d)
    }

    /// Closed-form count of base parameters (adapters excluded).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let encoder = self.n_mels * d + d + self.n_enc_layers * self.block_params() + 2 * d;
        let adapter = d * d + d;
        let decoder =
            self.vocab * d + self.n_dec_layers * self.block_params() + 2 * d + d * self.vocab + self.vocab;
        encoder + adapter + decoder
    }

    /// `ceil(n_frames / adapter_stride)`.
    pub fn n_audio_tokens(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.adapter_stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub frame_proj: Linear,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityAdapter {
    pub proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub tok_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub adapter: ModalityAdapter,
    pub decoder: Decoder,
    pub lora: Option<LoraAdapterSet>,
}

/// Encoder output projected into the decoder's embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTokens {
    pub vectors: Array2<f64>,
}

impl AudioTokens {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    FrameProj,
    Attention,
    Ffn,
    Norm,
    Adapter,
    Embedding,
    Head,
    LoraA,
    LoraB,
}

pub struct ParamView<'a> {
    pub name: String,
    pub class: ParamClass,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub class: ParamClass,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableMask {
    pub encoder: bool,
    pub adapter: bool,
    pub decoder: bool,
    pub lora: bool,
}

impl TrainableMask {
    pub const ALL: TrainableMask = TrainableMask {
        encoder: true,
        adapter: true,
        decoder: true,
        lora: true,
    };

    pub fn allows(&self, name: &str) -> bool {
        match name.split('.').next() {
            Some("enc") => self.encoder,
            Some("adapter") => self.adapter,
            Some("dec") => self.decoder,
            Some("lora") => self.lora,
            _ => false,
        }
    }
}

/// Named gradient tensors, flattened row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    tensors: BTreeMap<String, Vec<f64>>,
}

impl GradientSet {
    pub fn insert(&mut self, name: String, data: Vec<f64>) {
        self.tensors.insert(name, data);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn retain(mut self, keep: impl Fn(&str) -> bool) -> Self {
        self.tensors.retain(|k, _| keep(k));
        self
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.tensors.values_mut() {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Elementwise sum; tensors missing on one side are copied.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(v).for_each(|(a, b)| *a += b),
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().flat_map(|v| v.iter()).all(|x| x.is_finite())
    }
}

fn linear_views<'a>(out: &mut Vec<ParamView<'a>>, name: &str, class: ParamClass, l: &'a Linear) {
    out.push(ParamView {
        name: format!("{name}.w"),
        class,
        shape: l.w.shape().to_vec(),
        data: l.w.as_slice().expect("standard layout"),
    });
    out.push(ParamView {
        name: format!("{name}.b"),
        class,
        shape: vec![l.b.len()],
        data: l.b.as_slice().expect("standard layout"),
    });
}

fn norm_views<'a>(out: &mut Vec<ParamView<'a>>, name: &str, l: &'a LayerNorm) {
    out.push(ParamView {
        name: format!("{name}.gamma"),
        class: ParamClass::Norm,
        shape: vec![l.gamma.len()],
        data: l.gamma.as_slice().expect("standard layout"),
    });
    out.push(ParamView {
        name: format!("{name}.beta"),
        class: ParamClass::Norm,
        shape: vec![l.beta.len()],
        data: l.beta.as_slice().expect("standard layout"),
    });
}

fn block_views<'a>(out: &mut Vec<ParamView<'a>>, prefix: &str, b: &'a Block) {
    norm_views(out, &format!("{prefix}.ln1"), &b.ln1);
    for (n, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("o", &b.o)] {
        linear_views(out, &format!("{prefix}.attn.{n}"), ParamClass::Attention, l);
    }
    norm_views(out, &format!("{prefix}.ln2"), &b.ln2);
    linear_views(out, &format!("{prefix}.ffn.fc1"), ParamClass::Ffn, &b.fc1);
    linear_views(out, &format!("{prefix}.ffn.fc2"), ParamClass::Ffn, &b.fc2);
}

fn linear_views_mut<'a>(
    out: &mut Vec<ParamViewMut<'a>>,
    name: &str,
    class: ParamClass,
    l: &'a mut Linear,
) {
    let Linear { w, b } = l;
    out.push(ParamViewMut {
        name: format!("{name}.w"),
        class,
        shape: w.shape().to_vec(),
        data: w.as_slice_mut().expect("standard layout"),
    });
    out.push(ParamViewMut {
        name: format!("{name}.b"),
        class,
        shape: vec![b.len()],
        data: b.as_slice_mut().expect("standard layout"),
    });
}

fn norm_views_mut<'a>(out: &mut Vec<ParamViewMut<'a>>, name: &str, l: &'a mut LayerNorm) {
    let LayerNorm { gamma, beta } = l;
    out.push(ParamViewMut {
        name: format!("{name}.gamma"),
        class: ParamClass::Norm,
        shape: vec![gamma.len()],
        data: gamma.as_slice_mut().expect("standard layout"),
    });
    out.push(ParamViewMut {
        name: format!("{name}.beta"),
        class: ParamClass::Norm,
        shape: vec![beta.len()],
        data: beta.as_slice_mut().expect("standard layout"),
    });
}

fn block_views_mut<'a>(out: &mut Vec<ParamViewMut<'a>>, prefix: &str, b: &'a mut Block) {
    let Block { ln1, q, k, v, o, ln2, fc1, fc2 } = b;
    norm_views_mut(out, &format!("{prefix}.ln1"), ln1);
    for (n, l) in [("q", q), ("k", k), ("v", v), ("o", o)] {
        linear_views_mut(out, &format!("{prefix}.attn.{n}"), ParamClass::Attention, l);
    }
    norm_views_mut(out, &format!("{prefix}.ln2"), ln2);
    linear_views_mut(out, &format!("{prefix}.ffn.fc1"), ParamClass::Ffn, fc1);
    linear_views_mut(out, &format!("{prefix}.ffn.fc2"), ParamClass::Ffn, fc2);
}

/// Forward-pass intermediates needed by [`MultimodalModel::backward`].
pub struct ForwardCache {
    encoder: Option<EncoderCache>,
    decoder: DecoderCache,
}

struct EncoderCache {
    mel: Array2<f64>,
    blocks: Vec<BlockCache>,
    ln_post: LnCache,
    /// `ln_post` output, pre-pooling.
    post: Array2<f64>,
    pooled: Array2<f64>,
}

struct DecoderCache {
    tokens: Vec<u32>,
    n_audio: usize,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    hidden: Array2<f64>,
}

/// Per-layer key/value caches for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    layers: Vec<nn::KvCache>,
}

impl DecodeState {
    /// Number of positions processed so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, nn::KvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Audio input to a training/eval forward pass.
#[derive(Clone, Copy)]
pub enum AudioInput<'a> {
    Mel(&'a MelSpectrogram),
    /// Precomputed encoder output; the encoder is skipped (and receives no gradient).
    Tokens(&'a AudioTokens),
}

impl MultimodalModel {
    /// Uniform(±sqrt(6/(fan_in+fan_out))) linear weights, zero biases, normal(0, 0.02) embeddings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let frame_proj = Linear::init(config.n_mels, d, &mut rng);
        let enc_blocks = (0..config.n_enc_layers)
            .map(|_| Block::init(d, config.d_ff, &mut rng))
            .collect();
        let adapter = ModalityAdapter {
            proj: Linear::init(d, d, &mut rng),
        };
        let emb = Normal::new(0.0, 0.02).unwrap();
        let tok_emb = Array2::from_shape_fn((config.vocab, d), |_| emb.sample(&mut rng));
        let dec_blocks = (0..config.n_dec_layers)
            .map(|_| Block::init(d, config.d_ff, &mut rng))
            .collect();
        let head = Linear::init(d, config.vocab, &mut rng);
        Ok(Self {
            encoder: Encoder {
                frame_proj,
                blocks: enc_blocks,
                ln_post: LayerNorm::new(d),
            },
            adapter,
            decoder: Decoder {
                tok_emb,
                blocks: dec_blocks,
                ln_f: LayerNorm::new(d),
                head,
            },
            lora: None,
            config,
        })
    }

    /// Same shapes, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: Encoder {
                frame_proj: self.encoder.frame_proj.zeros_like(),
                blocks: self.encoder.blocks.iter().map(Block::zeros_like).collect(),
                ln_post: self.encoder.ln_post.zeros_like(),
            },
            adapter: ModalityAdapter {
                proj: self.adapter.proj.zeros_like(),
            },
            decoder: Decoder {
                tok_emb: Array2::zeros(self.decoder.tok_emb.raw_dim()),
                blocks: self.decoder.blocks.iter().map(Block::zeros_like).collect(),
                ln_f: self.decoder.ln_f.zeros_like(),
                head: self.decoder.head.zeros_like(),
            },
            lora: self.lora.as_ref().map(LoraAdapterSet::zeros_like),
        }
    }

    /// Adapters only when attached, otherwise every base parameter.
    pub fn trainable_mask(&self) -> TrainableMask {
        match &self.lora {
            Some(_) => TrainableMask {
                encoder: false,
                adapter: false,
                decoder: false,
                lora: true,
            },
            None => TrainableMask {
                encoder: true,
                adapter: true,
                decoder: true,
                lora: false,
            },
        }
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        linear_views(&mut out, "enc.frame_proj", ParamClass::FrameProj, &self.encoder.frame_proj);
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            block_views(&mut out, &format!("enc.blocks.{i}"), b);
        }
        norm_views(&mut out, "enc.ln_post", &self.encoder.ln_post);
        linear_views(&mut out, "adapter.proj", ParamClass::Adapter, &self.adapter.proj);
        out.push(ParamView {
            name: "dec.tok_emb".into(),
            class: ParamClass::Embedding,
            shape: self.decoder.tok_emb.shape().to_vec(),
            data: self.decoder.tok_emb.as_slice().expect("standard layout"),
        });
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            block_views(&mut out, &format!("dec.blocks.{i}"), b);
        }
        norm_views(&mut out, "dec.ln_f", &self.decoder.ln_f);
        linear_views(&mut out, "dec.head", ParamClass::Head, &self.decoder.head);
        if let Some(set) = &self.lora {
            for (site, pair) in &set.pairs {
                out.push(ParamView {
                    name: site.tensor_name('a'),
                    class: ParamClass::LoraA,
                    shape: pair.a.shape().to_vec(),
                    data: pair.a.as_slice().expect("standard layout"),
                });
                out.push(ParamView {
                    name: site.tensor_name('b'),
                    class: ParamClass::LoraB,
                    shape: pair.b.shape().to_vec(),
                    data: pair.b.as_slice().expect("standard layout"),
                });
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        let Encoder {
            frame_proj,
            blocks: enc_blocks,
            ln_post,
        } = &mut self.encoder;
        linear_views_mut(&mut out, "enc.frame_proj", ParamClass::FrameProj, frame_proj);
        for (i, b) in enc_blocks.iter_mut().enumerate() {
            block_views_mut(&mut out, &format!("enc.blocks.{i}"), b);
        }
        norm_views_mut(&mut out, "enc.ln_post", ln_post);
        linear_views_mut(&mut out, "adapter.proj", ParamClass::Adapter, &mut self.adapter.proj);
        let Decoder {
            tok_emb,
            blocks: dec_blocks,
            ln_f,
            head,
        } = &mut self.decoder;
        out.push(ParamViewMut {
            name: "dec.tok_emb".into(),
            class: ParamClass::Embedding,
            shape: tok_emb.shape().to_vec(),
            data: tok_emb.as_slice_mut().expect("standard layout"),
        });
        for (i, b) in dec_blocks.iter_mut().enumerate() {
            block_views_mut(&mut out, &format!("dec.blocks.{i}"), b);
        }
        norm_views_mut(&mut out, "dec.ln_f", ln_f);
        linear_views_mut(&mut out, "dec.head", ParamClass::Head, head);
        if let Some(set) = &mut self.lora {
            for (site, pair) in set.pairs.iter_mut() {
                let nn::LoraPair { a, b } = pair;
                out.push(ParamViewMut {
                    name: site.tensor_name('a'),
                    class: ParamClass::LoraA,
                    shape: a.shape().to_vec(),
                    data: a.as_slice_mut().expect("standard layout"),
                });
                out.push(ParamViewMut {
                    name: site.tensor_name('b'),
                    class: ParamClass::LoraB,
                    shape: b.shape().to_vec(),
                    data: b.as_slice_mut().expect("standard layout"),
                });
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    fn block_lora(&self, stack: Stack, layer: usize) -> BlockLora<'_> {
        self.lora
            .as_ref()
            .map(|set| set.block_lora(stack, layer))
            .unwrap_or_default()
    }

    fn dropout_p(&self) -> f64 {
        self.lora.as_ref().map_or(0.0, |s| s.config.dropout_p)
    }

    fn encode_internal(
        &self,
        mel: &MelSpectrogram,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(AudioTokens, EncoderCache), ModelError> {
        let frames = &mel.frames;
        if frames.nrows() == 0 {
            return Err(ModelError::Input("empty mel spectrogram".into()));
        }
        if frames.ncols() != self.config.n_mels {
            return Err(ModelError::Input(format!(
                "mel has {} bands, model expects {}",
                frames.ncols(),
                self.config.n_mels
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric("mel spectrogram".into()));
        }
        let d = self.config.d_model;
        let n = frames.nrows();
        let mut x = self.encoder.frame_proj.forward(&frames.view());
        x += &nn::sinusoidal_positions(n, d);
        let p = self.dropout_p();
        let mut caches = Vec::with_capacity(self.encoder.blocks.len());
        for (i, block) in self.encoder.blocks.iter().enumerate() {
            let dropout = rng.as_deref_mut().map(|rng| Dropout { p, rng });
            let (y, c) = block.forward(&x, self.config.n_heads, false, &self.block_lora(Stack::Enc, i), dropout);
            x = y;
            caches.push(c);
        }
        let (post, ln_cache) = self.encoder.ln_post.forward(&x);
        let stride = self.config.adapter_stride;
        let n_tok = self.config.n_audio_tokens(n);
        let mut pooled = Array2::zeros((n_tok, d));
        for t in 0..n_tok {
            let end = ((t + 1) * stride).min(n);
            let group = post.slice(s![t * stride..end, ..]);
            pooled.row_mut(t).assign(&group.mean_axis(Axis(0)).expect("non-empty group"));
        }
        let vectors = self.adapter.proj.forward(&pooled.view());
        Ok((
            AudioTokens { vectors },
            EncoderCache {
                mel: frames.clone(),
                blocks: caches,
                ln_post: ln_cache,
                post,
                pooled,
            },
        ))
    }

    /// Frame projection, sinusoidal positions, bidirectional encoder blocks,
    /// then the adapter: mean-pool every `adapter_stride` frames and project.
    pub fn encode_audio(&self, mel: &MelSpectrogram) -> Result<AudioTokens, ModelError> {
        Ok(self.encode_internal(mel, None)?.0)
    }

    fn decode_internal(
        &self,
        audio: &AudioTokens,
        seq: &TokenSequence,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, DecoderCache), ModelError> {
        let len = seq.len();
        if len == 0 {
            return Err(ModelError::Input("empty token sequence".into()));
        }
        if len > self.config.max_seq {
            return Err(ModelError::TooLong {
                len,
                max: self.config.max_seq,
            });
        }
        let placeholders = seq.n_audio();
        if placeholders != audio.len() {
            return Err(ModelError::Alignment {
                placeholders,
                audio: audio.len(),
            });
        }
        let mut x = self.embed(Some(audio), &seq.tokens, 0)?;
        let p = self.dropout_p();
        let mut caches = Vec::with_capacity(self.decoder.blocks.len());
        for (i, block) in self.decoder.blocks.iter().enumerate() {
            let dropout = rng.as_deref_mut().map(|rng| Dropout { p, rng });
            let (y, c) = block.forward(&x, self.config.n_heads, true, &self.block_lora(Stack::Dec, i), dropout);
            x = y;
            caches.push(c);
        }
        let (hidden, ln_f) = self.decoder.ln_f.forward(&x);
        let logits = self.decoder.head.forward(&hidden.view());
        Ok((
            logits,
            DecoderCache {
                tokens: seq.tokens.clone(),
                n_audio: audio.len(),
                blocks: caches,
                ln_f,
                hidden,
            },
        ))
    }

    /// Token embeddings (audio vectors at placeholders) plus positions `start..`.
    fn embed(&self, audio: Option<&AudioTokens>, tokens: &[u32], start: usize) -> Result<Array2<f64>, ModelError> {
        let d = self.config.d_model;
        let mut x = nn::sinusoidal_positions(start + tokens.len(), d).slice_move(s![start.., ..]);
        let mut a_idx = 0;
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab {
                return Err(ModelError::Input(format!("token id {tok} out of vocabulary")));
            }
            let mut row = x.row_mut(t);
            if tok == AUDIO_PLACEHOLDER {
                let audio = audio
                    .filter(|a| a_idx < a.len())
                    .ok_or_else(|| ModelError::Input("audio placeholder without audio token".into()))?;
                row += &audio.vectors.row(a_idx);
                a_idx += 1;
            } else {
                row += &self.decoder.tok_emb.row(tok as usize);
            }
        }
        Ok(x)
    }

    fn run_cached(&self, mut x: Array2<f64>, state: &mut DecodeState) -> Array2<f64> {
        for (i, block) in self.decoder.blocks.iter().enumerate() {
            x = block.forward_cached(&x, self.config.n_heads, &self.block_lora(Stack::Dec, i), &mut state.layers[i]);
        }
        let (hidden, _) = self.decoder.ln_f.forward(&x);
        self.decoder.head.forward(&hidden.view())
    }

    /// Eval-mode forward over `seq` that keeps per-layer keys/values so
    /// generation can continue with [`Self::extend`].
    pub fn prefill(&self, audio: &AudioTokens, seq: &TokenSequence) -> Result<(Array2<f64>, DecodeState), ModelError> {
        if seq.is_empty() {
            return Err(ModelError::Input("empty token sequence".into()));
        }
        if seq.len() > self.config.max_seq {
            return Err(ModelError::TooLong { len: seq.len(), max: self.config.max_seq });
        }
        if seq.n_audio() != audio.len() {
            return Err(ModelError::Alignment { placeholders: seq.n_audio(), audio: audio.len() });
        }
        let x = self.embed(Some(audio), &seq.tokens, 0)?;
        let mut state = DecodeState {
            layers: vec![nn::KvCache::new(self.config.d_model); self.decoder.blocks.len()],
        };
        let logits = self.run_cached(x, &mut state);
        Ok((logits, state))
    }

    /// Appends text tokens after a prefix; returns their logits rows.
    pub fn extend(&self, state: &mut DecodeState, tokens: &[u32]) -> Result<Array2<f64>, ModelError> {
        let start = state.len();
        if start + tokens.len() > self.config.max_seq {
            return Err(ModelError::TooLong { len: start + tokens.len(), max: self.config.max_seq });
        }
        let x = self.embed(None, tokens, start)?;
        Ok(self.run_cached(x, state))
    }

    /// Pre-softmax logits `[len × vocab]` in eval mode.
    pub fn forward(&self, audio: &AudioTokens, seq: &TokenSequence) -> Result<Array2<f64>, ModelError> {
        Ok(self.decode_internal(audio, seq, None)?.0)
    }

    /// Forward pass that keeps intermediates for [`Self::backward`].
    /// Passing an RNG enables adapter dropout (training mode).
    pub fn forward_train(
        &self,
        audio: AudioInput,
        seq: &TokenSequence,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, ForwardCache), ModelError> {
        let (tokens, enc_cache) = match audio {
            AudioInput::Mel(mel) => {
                let (t, c) = self.encode_internal(mel, rng.as_deref_mut())?;
                (std::borrow::Cow::Owned(t), Some(c))
            }
            AudioInput::Tokens(t) => (std::borrow::Cow::Borrowed(t), None),
        };
        let (logits, dec) = self.decode_internal(&tokens, seq, rng)?;
        Ok((
            logits,
            ForwardCache {
                encoder: enc_cache,
                decoder: dec,
            },
        ))
    }

    /// Reverse-mode pass from `dlogits`. Returns a model-shaped gradient holder;
    /// groups excluded by `mask` stay zero and are not computed.
    pub fn backward(&self, dlogits: &Array2<f64>, cache: &ForwardCache, mask: TrainableMask) -> MultimodalModel {
        let mut grads = self.zeros_like();
        let n_heads = self.config.n_heads;
        let dec = &cache.decoder;
        let head_grad = mask.decoder.then_some(&mut grads.decoder.head);
        let dhidden = self.decoder.head.backward(&dec.hidden.view(), dlogits, head_grad);
        let mut dx = self.decoder.ln_f.backward(
            &dhidden,
            &dec.ln_f,
            mask.decoder.then_some(&mut grads.decoder.ln_f),
        );
        let dec_needs = GradNeeds {
            base: mask.decoder,
            lora: mask.lora,
        };
        for i in (0..self.decoder.blocks.len()).rev() {
            let lora = self.block_lora(Stack::Dec, i);
            let (block_grad, lora_grads) = split_grads(&mut grads, Stack::Dec, i);
            dx = self.decoder.blocks[i].backward(&dx, &dec.blocks[i], n_heads, &lora, dec_needs, block_grad, lora_grads);
        }
        let d = self.config.d_model;
        let mut daudio = Array2::zeros((dec.n_audio, d));
        let mut a_idx = 0;
        for (t, &tok) in dec.tokens.iter().enumerate() {
            if tok == AUDIO_PLACEHOLDER {
                daudio.row_mut(a_idx).assign(&dx.row(t));
                a_idx += 1;
            } else if mask.decoder {
                let mut row = grads.decoder.tok_emb.row_mut(tok as usize);
                row += &dx.row(t);
            }
        }

        let enc_lora = self
            .lora
            .as_ref()
            .is_some_and(|s| s.pairs.keys().any(|k| k.stack == Stack::Enc));
        let needs_encoder = mask.encoder || mask.adapter || (mask.lora && enc_lora);
        let Some(enc) = cache.encoder.as_ref().filter(|_| needs_encoder) else {
            return grads;
        };
        let dpooled = self.adapter.proj.backward(
            &enc.pooled.view(),
            &daudio,
            mask.adapter.then_some(&mut grads.adapter.proj),
        );
        let n = enc.post.nrows();
        let stride = self.config.adapter_stride;
        let mut dpost = Array2::zeros((n, d));
        for t in 0..dpooled.nrows() {
            let end = ((t + 1) * stride).min(n);
            let share = &dpooled.row(t) / (end - t * stride) as f64;
            for f in t * stride..end {
                dpost.row_mut(f).assign(&share);
            }
        }
        let mut dx = self.encoder.ln_post.backward(
            &dpost,
            &enc.ln_post,
            mask.encoder.then_some(&mut grads.encoder.ln_post),
        );
        let enc_needs = GradNeeds {
            base: mask.encoder,
            lora: mask.lora,
        };
        for i in (0..self.encoder.blocks.len()).rev() {
            let lora = self.block_lora(Stack::Enc, i);
            let (block_grad, lora_grads) = split_grads(&mut grads, Stack::Enc, i);
            dx = self.encoder.blocks[i].backward(&dx, &enc.blocks[i], n_heads, &lora, enc_needs, block_grad, lora_grads);
        }
        if mask.encoder {
            self.encoder
                .frame_proj
                .backward(&enc.mel.view(), &dx, Some(&mut grads.encoder.frame_proj));
        }
        grads
    }

    /// Flattens a model-shaped gradient holder into named tensors allowed by `mask`.
    pub fn gradient_set(grads: &MultimodalModel, mask: TrainableMask) -> GradientSet {
        let mut set = GradientSet::default();
        for p in grads.params() {
            if mask.allows(&p.name) {
                set.insert(p.name, p.data.to_vec());
            }
        }
        set
    }
}

/// Mutable block gradient plus per-projection adapter gradients for one layer.
fn split_grads(
    grads: &mut MultimodalModel,
    stack: Stack,
    layer: usize,
) -> (Option<&mut Block>, [Option<&mut nn::LoraPair>; 4]) {
    let block = match stack {
        Stack::Enc => &mut grads.encoder.blocks[layer],
        Stack::Dec => &mut grads.decoder.blocks[layer],
    };
    let mut lora: [Option<&mut nn::LoraPair>; 4] = [None, None, None, None];
    if let Some(set) = grads.lora.as_mut() {
        for (site, pair) in set.pairs.iter_mut() {
            if site.stack == stack && site.layer == layer {
                lora[site.target.index()] = Some(pair);
            }
        }
    }
    (Some(block), lora)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_row(row: &Array1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = row.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::assemble_sequence;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            d_ff: 24,
            adapter_stride: 3,
            max_seq: 128,
            ..ModelConfig::default()
        }
    }

    fn random_mel(frames: usize, n_mels: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram {
            frames: Array2::from_shape_fn((frames, n_mels), |_| rng.random_range(-8.0..2.0)),
            frame_hop_s: 0.01,
            n_mels,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = MultimodalModel::init(ModelConfig::default(), 3).unwrap();
        let b = MultimodalModel::init(ModelConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        for p in a.params() {
            if p.name.ends_with(".b") || p.name.ends_with(".beta") {
                assert!(p.data.iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
        let c = MultimodalModel::init(ModelConfig::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_tensor_enumeration() {
        for cfg in [ModelConfig::default(), tiny_config()] {
            let m = MultimodalModel::init(cfg.clone(), 0).unwrap();
            let enumerated: usize = m.params().iter().map(|p| p.shape.iter().product::<usize>()).sum();
            assert_eq!(enumerated, cfg.param_count());
        }
        // default toy config is about half a million parameters
        let n = ModelConfig::default().param_count();
        assert!((150_000..600_000).contains(&n), "{n}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig { d_model: 30, n_heads: 4, ..ModelConfig::default() };
        assert!(matches!(MultimodalModel::init(cfg, 0), Err(ModelError::Config(_))));
        let cfg = ModelConfig { adapter_stride: 0, ..ModelConfig::default() };
        assert!(MultimodalModel::init(cfg, 0).is_err());
    }

    #[test]
    fn audio_token_count_follows_stride() {
        let m = MultimodalModel::init(ModelConfig::default(), 0).unwrap();
        let t = m.encode_audio(&random_mel(98, 40, 1)).unwrap();
        assert_eq!(t.len(), 25);
        assert_eq!(t.vectors.ncols(), 64);
    }

    #[test]
    fn encoder_rejects_bad_input() {
        let m = MultimodalModel::init(tiny_config(), 0).unwrap();
        let mut mel = random_mel(10, 40, 1);
        mel.frames[[2, 3]] = f64::NAN;
        assert!(matches!(m.encode_audio(&mel), Err(ModelError::Numeric(_))));
        assert!(m.encode_audio(&random_mel(0, 40, 1)).is_err());
        assert!(m.encode_audio(&random_mel(5, 20, 1)).is_err());
    }

    #[test]
    fn encoder_output_is_stable_for_random_models() {
        for seed in 0..20 {
            let m = MultimodalModel::init(ModelConfig::default(), seed).unwrap();
            let t = m.encode_audio(&random_mel(60, 40, seed + 100)).unwrap();
            for row in t.vectors.rows() {
                assert!(row.iter().all(|v| v.is_finite()));
                assert!(row.dot(&row).sqrt() < 1e3);
            }
        }
    }

    #[test]
    fn positional_encoding_makes_frame_order_matter() {
        let m = MultimodalModel::init(tiny_config(), 2).unwrap();
        let mel = random_mel(9, 40, 5);
        let mut swapped = mel.clone();
        let (r0, r1) = (mel.frames.row(0).to_owned(), mel.frames.row(1).to_owned());
        swapped.frames.row_mut(0).assign(&r1);
        swapped.frames.row_mut(1).assign(&r0);
        let a = m.encode_audio(&mel).unwrap();
        let b = m.encode_audio(&swapped).unwrap();
        assert_ne!(a.vectors, b.vectors);
    }

    #[test]
    fn forward_shape_and_softmax() {
        let m = MultimodalModel::init(tiny_config(), 1).unwrap();
        let audio = m.encode_audio(&random_mel(7, 40, 2)).unwrap();
        let seq = assemble_sequence(audio.len(), "hello", Some("spoof")).unwrap();
        let logits = m.forward(&audio, &seq).unwrap();
        assert_eq!(logits.dim(), (seq.len(), 260));
        for row in logits.rows() {
            let p = softmax_row(&row.to_owned());
            assert!((p.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_rejects_misaligned_and_long_sequences() {
        let m = MultimodalModel::init(tiny_config(), 1).unwrap();
        let audio = m.encode_audio(&random_mel(7, 40, 2)).unwrap();
        let seq = assemble_sequence(audio.len() + 1, "x", None).unwrap();
        assert!(matches!(m.forward(&audio, &seq), Err(ModelError::Alignment { .. })));
        let long = "x".repeat(200);
        let seq = assemble_sequence(audio.len(), &long, None).unwrap();
        assert!(matches!(m.forward(&audio, &seq), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn decoder_is_causal() {
        let m = MultimodalModel::init(tiny_config(), 4).unwrap();
        let audio = m.encode_audio(&random_mel(6, 40, 3)).unwrap();
        let seq = assemble_sequence(audio.len(), "abcdefgh", Some("bonafide")).unwrap();
        let base = m.forward(&audio, &seq).unwrap();
        for j in [3usize, 6, 10, seq.len() - 1] {
            let mut changed = seq.clone();
            changed.tokens[j] = if changed.tokens[j] == 120 { 121 } else { 120 };
            let out = m.forward(&audio, &changed).unwrap();
            assert_eq!(out.slice(s![..j, ..]), base.slice(s![..j, ..]));
            assert_ne!(out.row(j), base.row(j));
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let m = MultimodalModel::init(tiny_config(), 8).unwrap();
        let audio = m.encode_audio(&random_mel(8, 40, 9)).unwrap();
        let full_seq = assemble_sequence(audio.len(), "prompt text", Some("spoof")).unwrap();
        let full = m.forward(&audio, &full_seq).unwrap();
        let prefix = assemble_sequence(audio.len(), "prompt text", None).unwrap();
        let (mut rows, mut state) = m.prefill(&audio, &prefix).unwrap();
        for &tok in &full_seq.tokens[prefix.len()..] {
            let r = m.extend(&mut state, &[tok]).unwrap();
            rows.append(Axis(0), r.view()).unwrap();
        }
        assert_eq!(state.len(), full_seq.len());
        let diff = (&rows - &full).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-10, "{diff}");
        assert!(m.extend(&mut state, &[AUDIO_PLACEHOLDER]).is_err());
    }

    #[test]
    fn logits_finite_across_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for i in 0..100u64 {
            let heads = [1usize, 2, 4][rng.random_range(0..3)];
            let cfg = ModelConfig {
                d_model: heads * rng.random_range(2..6),
                n_enc_layers: rng.random_range(0..3),
                n_dec_layers: rng.random_range(1..3),
                n_heads: heads,
                d_ff: rng.random_range(4..20),
                adapter_stride: rng.random_range(1..5),
                max_seq: 128,
                ..ModelConfig::default()
            };
            let m = MultimodalModel::init(cfg, i).unwrap();
            let mel = random_mel(rng.random_range(1..12), 40, i);
            let audio = m.encode_audio(&mel).unwrap();
            let seq = assemble_sequence(audio.len(), "ab c", Some("x")).unwrap();
            let logits = m.forward(&audio, &seq).unwrap();
            assert!(logits.iter().all(|v| v.is_finite()), "config {i}");
        }
    }

    #[test]
    fn gradient_set_respects_mask() {
        let m = MultimodalModel::init(tiny_config(), 1).unwrap();
        let g = m.zeros_like();
        let mask = TrainableMask { encoder: false, adapter: true, decoder: false, lora: false };
        let set = MultimodalModel::gradient_set(&g, mask);
        assert_eq!(set.names().collect::<Vec<_>>(), vec!["adapter.proj.b", "adapter.proj.w"]);
    }
}
