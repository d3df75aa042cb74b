//! Utterance manifests, class-balanced subset construction and the synthetic
//! bonafide/spoof corpus generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, Waveform, MODEL_RATE};
use crate::Label;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate utterance id {utt_id:?} at line {line}")]
    Duplicate { utt_id: String, line: usize },
    #[error("split {split} has no {class} utterances")]
    EmptyClass { split: Split, class: Label },
    #[error("split {split}: need {needed} spoof utterances but only {available} available (deficit {deficit})")]
    InsufficientSpoof {
        split: Split,
        needed: usize,
        available: usize,
        deficit: usize,
    },
    #[error("unknown utterance id {0:?} in subset")]
    UnknownUtterance(String),
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("write error: {0}")]
    Write(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Attack id carried by bonafide records.
pub const NO_ATTACK: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Path exactly as written in the manifest.
    pub path: PathBuf,
    pub label: Label,
    pub attack_id: String,
    pub split: Split,
    /// Set at load time when the resolved audio path does not exist.
    pub missing: bool,
}

impl UtteranceRecord {
    pub fn new(
        utt_id: impl Into<String>,
        path: impl Into<PathBuf>,
        label: Label,
        attack_id: impl Into<String>,
        split: Split,
    ) -> Self {
        Self {
            utt_id: utt_id.into(),
            path: path.into(),
            label,
            attack_id: attack_id.into(),
            split,
            missing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub name: String,
    /// Directory that relative record paths are resolved against.
    pub base_dir: PathBuf,
    /// File the manifest was loaded from or last saved to.
    pub source: Option<PathBuf>,
    pub entries: Vec<UtteranceRecord>,
}

fn check_record(rec: &UtteranceRecord) -> Result<(), String> {
    if rec.utt_id.is_empty() {
        return Err("empty utt_id".into());
    }
    match rec.label {
        Label::Spoof if rec.attack_id.is_empty() || rec.attack_id == NO_ATTACK => {
            Err(format!("spoof utterance {} has no attack id", rec.utt_id))
        }
        Label::Bonafide if rec.attack_id != NO_ATTACK => Err(format!(
            "bonafide utterance {} must carry attack id \"-\"",
            rec.utt_id
        )),
        _ => Ok(()),
    }
}

impl Manifest {
    /// Builds a manifest from records, enforcing label/attack and uniqueness invariants.
    pub fn new(
        name: impl Into<String>,
        base_dir: impl Into<PathBuf>,
        entries: Vec<UtteranceRecord>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, rec) in entries.iter().enumerate() {
            check_record(rec).map_err(|msg| CorpusError::Parse { line: i + 1, msg })?;
            if !seen.insert(rec.utt_id.as_str()) {
                return Err(CorpusError::Duplicate {
                    utt_id: rec.utt_id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            base_dir: base_dir.into(),
            source: None,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rec: &UtteranceRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.base_dir.join(&rec.path)
        }
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.entries.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.entries.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|r| r.label == label).count()
    }

    /// Records restricted to `split`, paths rebased to absolute form.
    pub fn filter_split(&self, split: Split) -> Manifest {
        self.filtered(format!("{}-{split}", self.name), |r| r.split == split)
    }

    fn filtered(&self, name: String, keep: impl Fn(&UtteranceRecord) -> bool) -> Manifest {
        let entries = self
            .entries
            .iter()
            .filter(|r| keep(r))
            .map(|r| UtteranceRecord {
                path: self.resolve(r),
                ..r.clone()
            })
            .collect();
        Manifest {
            name,
            base_dir: self.base_dir.clone(),
            source: None,
            entries,
        }
    }

    /// Writes TSV; paths under the target directory are written relative to it.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = String::new();
        for rec in &self.entries {
            let resolved = self.resolve(rec);
            let shown = resolved
                .strip_prefix(&dir)
                .map(Path::to_path_buf)
                .unwrap_or(resolved);
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                rec.utt_id,
                shown.display(),
                rec.label,
                rec.attack_id,
                rec.split
            ));
        }
        fs::write(path, out)?;
        let mut rebased = Vec::with_capacity(self.entries.len());
        for rec in &self.entries {
            let resolved = self.resolve(rec);
            let shown = resolved
                .strip_prefix(&dir)
                .map(Path::to_path_buf)
                .unwrap_or(resolved);
            rebased.push(UtteranceRecord {
                path: shown,
                ..rec.clone()
            });
        }
        self.entries = rebased;
        self.base_dir = dir;
        self.source = Some(path.to_path_buf());
        Ok(())
    }
}

/// Parses a manifest TSV: `utt_id  path  label  attack_id  split`, no header.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(CorpusError::Parse {
                line: lineno,
                msg: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        let parse_err = |msg: String| CorpusError::Parse { line: lineno, msg };
        let label = cols[2].parse::<Label>().map_err(parse_err)?;
        let split = cols[4].parse::<Split>().map_err(parse_err)?;
        let mut rec = UtteranceRecord::new(cols[0], cols[1], label, cols[3], split);
        check_record(&rec).map_err(parse_err)?;
        if !seen.insert(rec.utt_id.clone()) {
            return Err(CorpusError::Duplicate {
                utt_id: rec.utt_id,
                line: lineno,
            });
        }
        let resolved = if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            base_dir.join(&rec.path)
        };
        rec.missing = !resolved.exists();
        entries.push(rec);
    }
    Ok(Manifest {
        name,
        base_dir,
        source: Some(path.to_path_buf()),
        entries,
    })
}

/// A class-balanced selection of utterance ids from one split of a base manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetManifest {
    pub base: PathBuf,
    pub split: Split,
    pub seed: u64,
    pub selected: Vec<String>,
}

impl SubsetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "base\t{}", self.base.display())?;
        writeln!(f, "seed\t{}", self.seed)?;
        writeln!(f, "split\t{}", self.split)?;
        for id in &self.selected {
            writeln!(f, "{id}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let mut header = |key: &str| -> Result<String, CorpusError> {
            let (i, line) = lines.next().ok_or(CorpusError::Parse {
                line: 0,
                msg: format!("missing {key} header"),
            })?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('\t'))
                .map(str::to_string)
                .ok_or(CorpusError::Parse {
                    line: i + 1,
                    msg: format!("expected {key} header"),
                })
        };
        let base = PathBuf::from(header("base")?);
        let seed = header("seed")?.parse().map_err(|e| CorpusError::Parse {
            line: 2,
            msg: format!("bad seed: {e}"),
        })?;
        let split = header("split")?
            .parse()
            .map_err(|msg| CorpusError::Parse { line: 3, msg })?;
        let selected = lines
            .map(|(_, l)| l.trim())
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Ok(Self {
            base,
            split,
            seed,
            selected,
        })
    }

    /// Resolves the selected ids against `base` into a standalone manifest.
    pub fn materialize(&self, base: &Manifest) -> Result<Manifest, CorpusError> {
        let by_id: BTreeMap<&str, &UtteranceRecord> =
            base.entries.iter().map(|r| (r.utt_id.as_str(), r)).collect();
        let mut entries = Vec::with_capacity(self.selected.len());
        for id in &self.selected {
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| CorpusError::UnknownUtterance(id.clone()))?;
            entries.push(UtteranceRecord {
                path: base.resolve(rec),
                ..(*rec).clone()
            });
        }
        Ok(Manifest {
            name: format!("{}-{}-balanced", base.name, self.split),
            base_dir: base.base_dir.clone(),
            source: None,
            entries,
        })
    }
}

/// 64-bit FNV-1a, used to derive per-item RNG streams from stable strings.
pub fn stream_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Splits `total` into `parts` near-equal quotas; the first `total % parts` get one extra.
pub fn even_quotas(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(|i| q + usize::from(i < r)).collect()
}

/// All bonafide utterances of `split` plus an equal number of spoofed ones,
/// stratified as evenly as possible over the attack ids present in the split.
pub fn build_balanced_subset(
    m: &Manifest,
    split: Split,
    seed: u64,
) -> Result<SubsetManifest, CorpusError> {
    let bonafide: Vec<&UtteranceRecord> = m
        .split(split)
        .filter(|r| r.label == Label::Bonafide)
        .collect();
    let mut pools: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in m.split(split).filter(|r| r.label == Label::Spoof) {
        pools.entry(r.attack_id.as_str()).or_default().push(r);
    }
    if bonafide.is_empty() {
        return Err(CorpusError::EmptyClass {
            split,
            class: Label::Bonafide,
        });
    }
    if pools.is_empty() {
        return Err(CorpusError::EmptyClass {
            split,
            class: Label::Spoof,
        });
    }
    let needed = bonafide.len();
    let available: usize = pools.values().map(Vec::len).sum();
    if available < needed {
        return Err(CorpusError::InsufficientSpoof {
            split,
            needed,
            available,
            deficit: needed - available,
        });
    }

    // Water-filling: attacks whose pool is below the even share give up their
    // slack, which is redistributed over the remaining attacks.
    let mut quotas: BTreeMap<&str, usize> = BTreeMap::new();
    let mut open: Vec<&str> = pools.keys().copied().collect();
    let mut remaining = needed;
    loop {
        let shares = even_quotas(remaining, open.len());
        let capped: Vec<usize> = open
            .iter()
            .zip(&shares)
            .enumerate()
            .filter(|(_, (a, s))| pools[**a].len() < **s)
            .map(|(i, _)| i)
            .collect();
        if capped.is_empty() {
            for (a, s) in open.iter().zip(shares) {
                quotas.insert(a, s);
            }
            break;
        }
        for &i in capped.iter().rev() {
            let a = open.remove(i);
            quotas.insert(a, pools[a].len());
            remaining -= pools[a].len();
        }
    }

    let mut selected: Vec<String> = bonafide.iter().map(|r| r.utt_id.clone()).collect();
    for (attack, pool) in &pools {
        let mut order: Vec<&UtteranceRecord> = pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, attack));
        order.shuffle(&mut rng);
        selected.extend(order[..quotas[attack]].iter().map(|r| r.utt_id.clone()));
    }
    Ok(SubsetManifest {
        base: m.source.clone().unwrap_or_default(),
        split,
        seed,
        selected,
    })
}

/// A seeded draw of `n` utterances, half bonafide and half spoof
/// (the odd one, if any, goes to bonafide). Manifest order is preserved.
pub fn sample_balanced(m: &Manifest, n: usize, seed: u64) -> Result<Manifest, CorpusError> {
    let n_bona = n.div_ceil(2);
    let n_spoof = n / 2;
    let mut keep = std::collections::BTreeSet::new();
    for (label, want) in [(Label::Bonafide, n_bona), (Label::Spoof, n_spoof)] {
        let mut pool: Vec<&str> = m
            .entries
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.utt_id.as_str())
            .collect();
        if pool.len() < want {
            return Err(CorpusError::Config(format!(
                "balanced draw needs {want} {label} utterances, manifest has {}",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("sample/{label}")));
        pool.shuffle(&mut rng);
        keep.extend(pool[..want].iter().map(|s| s.to_string()));
    }
    Ok(m.filtered(format!("{}-sample{n}", m.name), |r| keep.contains(&r.utt_id)))
}

/// Artifact family of a synthetic spoof; doubles as its attack id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactFamily {
    Glitch,
    Monotone,
    Robotic,
}

impl ArtifactFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactFamily::Glitch => "glitch",
            ArtifactFamily::Monotone => "monotone",
            ArtifactFamily::Robotic => "robotic",
        }
    }
}

impl fmt::Display for ArtifactFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "glitch" => Ok(ArtifactFamily::Glitch),
            "monotone" => Ok(ArtifactFamily::Monotone),
            "robotic" => Ok(ArtifactFamily::Robotic),
            other => Err(format!("unknown artifact family {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_bonafide: usize,
    pub n_spoof: usize,
    pub duration_s: f64,
    pub artifact_families: Vec<ArtifactFamily>,
    pub seed: u64,
    /// Split tag written on every generated record.
    pub split: Split,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.duration_s >= 0.5) || !self.duration_s.is_finite() {
            return Err(CorpusError::Config(format!(
                "duration_s must be >= 0.5, got {}",
                self.duration_s
            )));
        }
        if self.n_spoof > 0 && self.artifact_families.is_empty() {
            return Err(CorpusError::Config(
                "spoof utterances requested without any artifact family".into(),
            ));
        }
        Ok(())
    }

    fn families(&self) -> Vec<ArtifactFamily> {
        let mut f = self.artifact_families.clone();
        f.sort();
        f.dedup();
        f
    }
}

/// Peak level of the voiced signal before noise is added.
const VOICE_PEAK: f64 = 0.45;
const SNR_DB: f64 = 30.0;
const F0_RANGE: (f64, f64) = (80.0, 300.0);
const F0_STEP_HZ: f64 = 20.0;
const GLITCH_AMPLITUDE: f64 = 0.7;
const ROBOTIC_AM_HZ: f64 = 50.0;
const ROBOTIC_BITS: u32 = 3;

/// Utterance kind, which decides the synthesis recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtteranceKind {
    Bonafide,
    Spoof(ArtifactFamily),
}

/// Harmonic source with formant shaping, syllabic AM and white noise at 30 dB SNR.
fn voice(rng: &mut ChaCha8Rng, n: usize, drifting_pitch: bool) -> Vec<f64> {
    let rate = MODEL_RATE as f64;
    let block = 160usize;
    let n_blocks = n.div_ceil(block);
    let mut f0 = rng.random_range(100.0..220.0);
    let step = Normal::new(0.0, F0_STEP_HZ).unwrap();
    let mut track = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        track.push(f0);
        if drifting_pitch {
            f0 += step.sample(rng);
            if f0 < F0_RANGE.0 {
                f0 = 2.0 * F0_RANGE.0 - f0;
            }
            if f0 > F0_RANGE.1 {
                f0 = 2.0 * F0_RANGE.1 - f0;
            }
        }
    }
    let formants = [
        (rng.random_range(300.0..800.0), 90.0),
        (rng.random_range(900.0..2200.0), 130.0),
        (rng.random_range(2300.0..3200.0), 180.0),
    ];
    let am_hz = rng.random_range(3.0..6.0);
    let am_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let max_harm = (4000.0 / F0_RANGE.0) as usize;
    let mut phases = vec![0.0f64; max_harm + 1];
    let mut amps = vec![0.0f64; max_harm + 1];
    let mut out = Vec::with_capacity(n);
    for (b, &f0b) in track.iter().enumerate() {
        let n_harm = ((4000.0 / f0b) as usize).min(max_harm);
        for k in 1..=max_harm {
            amps[k] = if k <= n_harm {
                let fk = k as f64 * f0b;
                let resonance: f64 = formants
                    .iter()
                    .map(|(fc, bw)| (-0.5 * ((fk - fc) / bw).powi(2)).exp())
                    .sum();
                (0.15 + resonance) / (k * k) as f64
            } else {
                0.0
            };
        }
        let start = b * block;
        for i in start..(start + block).min(n) {
            let mut s = 0.0;
            for k in 1..=n_harm {
                phases[k] += std::f64::consts::TAU * k as f64 * f0b / rate;
                s += amps[k] * phases[k].sin();
            }
            let t = i as f64 / rate;
            let env = 0.55 + 0.45 * (std::f64::consts::TAU * am_hz * t + am_phase).sin();
            out.push(s * env);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for v in &mut out {
        *v *= VOICE_PEAK / peak;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let noise = Normal::new(0.0, rms / 10f64.powf(SNR_DB / 20.0)).unwrap();
    for v in &mut out {
        *v += noise.sample(rng);
    }
    out
}

/// Synthesizes one utterance's samples at 16 kHz.
pub fn synthesize(kind: UtteranceKind, n_samples: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        UtteranceKind::Bonafide => voice(rng, n_samples, true),
        UtteranceKind::Spoof(ArtifactFamily::Monotone) => voice(rng, n_samples, false),
        UtteranceKind::Spoof(ArtifactFamily::Glitch) => {
            let mut x = voice(rng, n_samples, true);
            let count = rng.random_range(5..=15usize);
            let mut placed: Vec<usize> = Vec::with_capacity(count);
            while placed.len() < count {
                let p = rng.random_range(1..n_samples - 1);
                if placed.iter().all(|&q| q.abs_diff(p) >= 3) {
                    placed.push(p);
                }
            }
            for p in placed {
                let dir = if x[p] >= 0.0 { -1.0 } else { 1.0 };
                x[p] += dir * GLITCH_AMPLITUDE;
            }
            x
        }
        UtteranceKind::Spoof(ArtifactFamily::Robotic) => {
            let x = voice(rng, n_samples, true);
            let levels = (1u32 << ROBOTIC_BITS) as f64;
            let step = 2.0 / levels;
            x.iter()
                .enumerate()
                .map(|(i, v)| {
                    let t = i as f64 / MODEL_RATE as f64;
                    let am = 0.5 + 0.5 * (std::f64::consts::TAU * ROBOTIC_AM_HZ * t).sin();
                    ((v * am) / step).round().clamp(-levels / 2.0, levels / 2.0 - 1.0) * step
                })
                .collect()
        }
    }
}

/// Writes `n_bonafide + n_spoof` 16 kHz PCM16 files under `out_dir/wav/` and
/// `out_dir/manifest.tsv`. Each file's RNG stream derives from `(seed, utt_id)`.
pub fn gen_synthetic_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest, CorpusError> {
    cfg.validate()?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| CorpusError::Write(format!("{}: {e}", wav_dir.display())))?;
    let mut plan: Vec<(String, UtteranceKind)> = (0..cfg.n_bonafide)
        .map(|i| (format!("{}_bona_{i:05}", cfg.split), UtteranceKind::Bonafide))
        .collect();
    let families = cfg.families();
    for (family, quota) in families.iter().zip(even_quotas(cfg.n_spoof, families.len())) {
        for i in 0..quota {
            plan.push((
                format!("{}_{}_{i:05}", cfg.split, family),
                UtteranceKind::Spoof(*family),
            ));
        }
    }
    let n_samples = (cfg.duration_s * MODEL_RATE as f64).round() as usize;
    plan.par_iter()
        .map(|(id, kind)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, id));
            let samples = synthesize(*kind, n_samples, &mut rng);
            let wave = Waveform::new(samples, MODEL_RATE).map_err(|e| CorpusError::Write(e.to_string()))?;
            let path = wav_dir.join(format!("{id}.wav"));
            audio::write_wav(&path, &wave).map_err(|e: AudioError| {
                CorpusError::Write(format!("{}: {e}", path.display()))
            })
        })
        .collect::<Result<Vec<()>, _>>()?;

    let entries = plan
        .into_iter()
        .map(|(id, kind)| {
            let (label, attack) = match kind {
                UtteranceKind::Bonafide => (Label::Bonafide, NO_ATTACK.to_string()),
                UtteranceKind::Spoof(f) => (Label::Spoof, f.to_string()),
            };
            UtteranceRecord::new(id.clone(), format!("wav/{id}.wav"), label, attack, cfg.split)
        })
        .collect();
    let mut manifest = Manifest::new("synthetic", out_dir, entries)?;
    manifest
        .save(out_dir.join("manifest.tsv"))
        .map_err(|e| CorpusError::Write(e.to_string()))?;
    Ok(manifest)
}
