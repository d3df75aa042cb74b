//! Low-rank adaptation of attention projections: `W' = W + s·A·B` with `W` frozen.
//!
//! `s` is `alpha / r` by default; [`LoraScaling::Unit`] gives the unscaled
//! `W + A·B` form. `A` starts normal(0, 1/r) and `B` starts at zero, so a
//! freshly attached adapter leaves the model function unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::nn::{BlockLora, LoraPair};
use crate::model::{GradientSet, MultimodalModel};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("lora config error: {0}")]
    Config(String),
    #[error("lora state error: {0}")]
    State(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub fn index(self) -> usize {
        match self {
            LoraTarget::Query => 0,
            LoraTarget::Key => 1,
            LoraTarget::Value => 2,
            LoraTarget::Output => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Query => "query",
            LoraTarget::Key => "key",
            LoraTarget::Value => "value",
            LoraTarget::Output => "output",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = LoraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query" | "q" => Ok(LoraTarget::Query),
            "key" | "k" => Ok(LoraTarget::Key),
            "value" | "v" => Ok(LoraTarget::Value),
            "output" | "o" => Ok(LoraTarget::Output),
            other => Err(LoraError::Config(format!("unknown target projection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraScaling {
    /// `alpha / r`
    AlphaOverRank,
    /// Equation-literal `W + A·B`.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub targets: BTreeSet<LoraTarget>,
    /// Also adapt the audio encoder's projections.
    pub include_encoder: bool,
    pub scaling: LoraScaling,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            dropout_p: 0.1,
            targets: BTreeSet::from([LoraTarget::Query, LoraTarget::Value]),
            include_encoder: false,
            scaling: LoraScaling::AlphaOverRank,
        }
    }
}

impl LoraConfig {
    pub fn with_targets<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self, LoraError> {
        self.targets = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<_, _>>()?;
        Ok(self)
    }

    pub fn scale(&self) -> f64 {
        match self.scaling {
            LoraScaling::AlphaOverRank => self.alpha / self.rank as f64,
            LoraScaling::Unit => 1.0,
        }
    }

    pub fn validate(&self, d: usize, k: usize) -> Result<(), LoraError> {
        if self.rank == 0 {
            return Err(LoraError::Config("rank must be positive".into()));
        }
        if self.rank > d.min(k) / 2 {
            return Err(LoraError::Config(format!(
                "rank {} too large for {d}x{k} projection (max {})",
                self.rank,
                d.min(k) / 2
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(LoraError::Config("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(LoraError::Config("dropout_p must lie in [0, 1)".into()));
        }
        if self.targets.is_empty() {
            return Err(LoraError::Config("no target projections".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Enc,
    Dec,
}

impl Stack {
    pub fn as_str(self) -> &'static str {
        match self {
            Stack::Enc => "enc",
            Stack::Dec => "dec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LoraSite {
    pub stack: Stack,
    pub layer: usize,
    pub target: LoraTarget,
}

impl LoraSite {
    pub fn tensor_name(&self, factor: char) -> String {
        format!("lora.{}.{}.{}.{factor}", self.stack.as_str(), self.layer, self.target)
    }

    pub fn parse_tensor_name(name: &str) -> Option<(LoraSite, char)> {
        let mut parts = name.split('.');
        if parts.next()? != "lora" {
            return None;
        }
        let stack = match parts.next()? {
            "enc" => Stack::Enc,
            "dec" => Stack::Dec,
            _ => return None,
        };
        let layer = parts.next()?.parse().ok()?;
        let target = parts.next()?.parse().ok()?;
        let factor = match parts.next()? {
            "a" => 'a',
            "b" => 'b',
            _ => return None,
        };
        parts
            .next()
            .is_none()
            .then_some((LoraSite { stack, layer, target }, factor))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet {
    pub config: LoraConfig,
    pub enabled: bool,
    pub pairs: BTreeMap<LoraSite, LoraPair>,
}

impl LoraAdapterSet {
    pub fn block_lora(&self, stack: Stack, layer: usize) -> BlockLora<'_> {
        let mut out = BlockLora {
            pairs: [None; 4],
            scale: self.config.scale(),
        };
        if !self.enabled {
            return out;
        }
        for target in &self.config.targets {
            out.pairs[target.index()] = self.pairs.get(&LoraSite {
                stack,
                layer,
                target: *target,
            });
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            enabled: self.enabled,
            pairs: self.pairs.iter().map(|(k, p)| (*k, p.zeros_like())).collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// `s·A·B` for every site.
    pub fn deltas(&self) -> BTreeMap<LoraSite, ndarray::Array2<f64>> {
        let scale = self.config.scale();
        self.pairs.iter().map(|(k, p)| (*k, p.delta(scale))).collect()
    }
}

/// Freezes the base and adds zero-initialized adapters on every target projection.
pub fn attach_lora(
    mut model: MultimodalModel,
    cfg: LoraConfig,
    seed: u64,
) -> Result<MultimodalModel, LoraError> {
    if model.lora.is_some() {
        return Err(LoraError::State("adapters already attached".into()));
    }
    let d = model.config.d_model;
    cfg.validate(d, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = BTreeMap::new();
    let mut stacks = vec![(Stack::Dec, model.config.n_dec_layers)];
    if cfg.include_encoder {
        stacks.insert(0, (Stack::Enc, model.config.n_enc_layers));
    }
    for (stack, n_layers) in stacks {
        for layer in 0..n_layers {
            for &target in &cfg.targets {
                let site = LoraSite { stack, layer, target };
                pairs.insert(site, LoraPair::init(d, d, cfg.rank, &mut rng));
            }
        }
    }
    model.lora = Some(LoraAdapterSet {
        config: cfg,
        enabled: true,
        pairs,
    });
    Ok(model)
}

/// Folds `s·A·B` into the base projections and removes the adapters.
pub fn merge_lora(mut model: MultimodalModel) -> Result<MultimodalModel, LoraError> {
    let set = model
        .lora
        .take()
        .ok_or_else(|| LoraError::State("no adapters attached".into()))?;
    for (site, delta) in set.deltas() {
        let block = match site.stack {
            Stack::Enc => &mut model.encoder.blocks[site.layer],
            Stack::Dec => &mut model.decoder.blocks[site.layer],
        };
        block.projection_mut(site.target.index()).w += &delta;
    }
    Ok(model)
}

/// Removes the adapters without touching the base weights.
pub fn detach_lora(
    mut model: MultimodalModel,
) -> Result<(MultimodalModel, LoraAdapterSet), LoraError> {
    let set = model
        .lora
        .take()
        .ok_or_else(|| LoraError::State("no adapters attached".into()))?;
    Ok((model, set))
}

/// Drops every gradient whose parameter is frozen in `model`.
pub fn lora_grad_filter(grads: GradientSet, model: &MultimodalModel) -> GradientSet {
    let mask = model.trainable_mask();
    grads.retain(|name| mask.allows(name))
}
