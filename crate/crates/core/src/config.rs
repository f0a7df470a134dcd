//! Run configuration: TOML with `[model]`, `[slg]`, `[train]` and `[data]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusFormat, HistorySource};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::sha::{ShaAblation, ShaConfig, ShaVariant};
use crate::slg::Consistency;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Zero means `4 · d_model`.
    pub d_ff: usize,
    pub dropout: f64,
    pub sha_layers: usize,
    pub encoder_layers: usize,
    pub rel_pos_clip: usize,
    pub sha_variant: ShaVariant,
    pub sha_ablation: ShaAblation,
    pub lrm_enabled: bool,
    pub lrm_positions: Vec<usize>,
    pub lrm_shared_heads: bool,
    pub standard_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            heads: 8,
            d_ff: 0,
            dropout: 0.3,
            sha_layers: 3,
            encoder_layers: 6,
            rel_pos_clip: 16,
            sha_variant: ShaVariant::Sequential,
            sha_ablation: ShaAblation::Full,
            lrm_enabled: true,
            lrm_positions: vec![2],
            lrm_shared_heads: true,
            standard_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn sha(&self) -> ShaConfig {
        ShaConfig {
            n_layers: self.sha_layers,
            d_model: self.d_model,
            d_ff: self.ffn_width(),
            heads: self.heads,
            variant: self.sha_variant,
            ablation: self.sha_ablation,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.encoder_layers,
            d_model: self.d_model,
            d_ff: self.ffn_width(),
            heads: self.heads,
            rel_pos_clip: self.rel_pos_clip,
            lrm_enabled: self.lrm_enabled,
            lrm_positions: self.lrm_positions.clone(),
            lrm_shared_heads: self.lrm_shared_heads,
            standard_residual: self.standard_residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlgConfig {
    pub enabled: bool,
    pub decoder_layers: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub consistency: Consistency,
}

impl Default for SlgConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            decoder_layers: 6,
            alpha: 0.35,
            lambda: 0.75,
            consistency: Consistency::TaggerTarget,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub history_source: HistorySource,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 100,
            batch_size: 32,
            learning_rate: 5e-5,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            grad_clip: 0.0,
            history_source: HistorySource::Gold,
            shuffle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: CorpusFormat,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: CorpusFormat::MultiTurn,
            train: None,
            dev: None,
            test: None,
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub slg: SlgConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Multi-turn defaults.
    pub fn multi_turn() -> Self {
        Self::default()
    }

    /// Single-turn defaults: smaller model, Adam at 1e-3, history module off.
    pub fn single_turn() -> Self {
        let mut c = Self::default();
        c.model.d_model = 128;
        c.model.sha_ablation = ShaAblation::Off;
        c.train.learning_rate = 1e-3;
        c.train.optimizer = OptimizerKind::Adam;
        c.train.weight_decay = 0.0;
        c.data.format = CorpusFormat::SingleTurn;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "multi_turn" => Ok(Self::multi_turn()),
            "single_turn" => Ok(Self::single_turn()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value`; the value is parsed as a TOML literal, falling
    /// back to a bare string. Only the key and the value's type are checked here, so
    /// that interdependent keys can be changed one at a time; call [`validate`]
    /// once every override is in.
    ///
    /// [`validate`]: Self::validate
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{key}` needs a section")))?;
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Table::try_from(&*self).expect("config serializes");
        let sec = root
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
        let known = <Self as Default>::default();
        let known = toml::Table::try_from(&known).expect("config serializes");
        let optional = section == "data" && ["train", "dev", "test", "output_dir"].contains(&field);
        if !optional && !known[section].as_table().is_some_and(|t| t.contains_key(field)) {
            return Err(Error::Config(format!("unknown config key `{section}.{field}`")));
        }
        sec.insert(field.to_string(), value);
        let updated: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{section}.{field}`: {}", e.message())))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.d_model == 0 || m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return bad(format!("model.d_model {} must be a positive multiple of model.heads {}", m.d_model, m.heads));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", m.dropout));
        }
        if m.sha_layers == 0 && !m.sha_ablation.bypassed() {
            return bad("model.sha_layers must be at least 1".into());
        }
        self.model.encoder().validate()?;
        let s = &self.slg;
        if !(0.0..=0.5).contains(&s.alpha) {
            return bad(format!("slg.alpha {} outside [0, 0.5]", s.alpha));
        }
        if !(0.0..=1.0).contains(&s.lambda) {
            return bad(format!("slg.lambda {} outside [0, 1]", s.lambda));
        }
        if s.enabled && s.decoder_layers == 0 {
            return bad("slg.decoder_layers must be at least 1".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0) {
            return bad(format!("train.learning_rate {} must be positive", t.learning_rate));
        }
        if t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return bad("train.weight_decay and train.grad_clip must be non-negative".into());
        }
        Ok(())
    }
}

/// Documentation of every key, printed by `--help-config`.
pub const HELP: &str = "\
[model]
  d_model            hidden width of every module (768)
  heads              attention heads (8)
  d_ff               feed-forward width; 0 means 4*d_model (0)
  dropout            dropout rate after every sub-layer (0.3)
  sha_layers         history-attention layers N (3)
  encoder_layers     encoder layers M (6)
  rel_pos_clip       farthest relative position l (16)
  sha_variant        sequential | parallel (sequential)
  sha_ablation       full | utterance_only | result_only | result_attention_only | off | cat_all (full)
  lrm_enabled        layer-refined mechanism on/off (true)
  lrm_positions      encoder layers followed by LRM, 1-based ([2])
  lrm_shared_heads   LRM reuses the final classifier (true)
  standard_residual  add Norm(x + Z) around encoder self-attention (false)
[slg]
  enabled            train with the slot-label generation decoder (true)
  decoder_layers     decoder layers (6)
  alpha              consistency weight in [0, 0.5] (0.35)
  lambda             SLG loss weight in [0, 1] (0.75)
  consistency        tagger_target | both (tagger_target)
[train]
  seed               RNG seed for init, dropout and shuffling (42)
  epochs             training epochs (100)
  batch_size         turns per optimizer step (32)
  learning_rate      (5e-5)
  optimizer          adamw | adam (adamw)
  weight_decay       decoupled decay, AdamW only (0.01)
  grad_clip          global gradient-norm clip, 0 disables (0)
  history_source     gold | predicted history results while training (gold)
  shuffle            shuffle turns every epoch (true)
[data]
  format             multi_turn | single_turn (multi_turn)
  train, dev, test   JSON-lines corpus paths
  output_dir         run directory; falls back to $SHALRT_OUTPUT_DIR, then ./runs
";
