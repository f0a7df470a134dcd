//! Salient history attention: mixes the current utterance with the embeddings of
//! earlier utterances (keys) and their recorded results (values).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{HistoryBundle, ResultToken};
use crate::error::Result;
use crate::nn::layers::{broadcast_key_mask, normal_embedding};
use crate::nn::{Ctx, FeedForward, LayerNorm, MultiHeadAttention, ParamId, ParamSet, Real, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShaVariant {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShaAblation {
    #[default]
    Full,
    /// History-utterance attention only; its output feeds the FFN.
    UtteranceOnly,
    /// A single attention with Q/K/V from the current states, results, results.
    ResultOnly,
    /// History-result attention fed directly by the self-attention output.
    ResultAttentionOnly,
    /// Module bypassed: the encoder sees the plain embeddings.
    Off,
    /// Module bypassed; history tokens are appended to the encoder input instead.
    CatAll,
}

impl ShaAblation {
    pub fn bypassed(self) -> bool {
        matches!(self, Self::Off | Self::CatAll)
    }

    fn uses_utterance_attention(self) -> bool {
        matches!(self, Self::Full | Self::UtteranceOnly)
    }

    fn uses_result_attention(self) -> bool {
        matches!(self, Self::Full | Self::ResultOnly | Self::ResultAttentionOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShaConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub variant: ShaVariant,
    pub ablation: ShaAblation,
}

/// Embedded history: keys from utterances, values from results, one mask entry per row.
#[derive(Clone, Debug)]
pub struct HistoryEmbeddings {
    pub utterance: Var,
    pub results: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
struct ShaLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    utterance_attn: MultiHeadAttention,
    utterance_norm: LayerNorm,
    result_attn: MultiHeadAttention,
    result_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Sha {
    layers: Vec<ShaLayer>,
    pub variant: ShaVariant,
    pub ablation: ShaAblation,
    /// `d_i × d_model` intent embeddings for the result side.
    pub intent_table: ParamId,
    /// `d_s × d_model` slot-label embeddings for the result side.
    pub slot_table: ParamId,
    num_intents: usize,
}

impl Sha {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        cfg: &ShaConfig,
        num_intents: usize,
        num_slots: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let intent_table = params.register("sha.intent_embedding", normal_embedding(num_intents, d, rng))?;
        let slot_table = params.register("sha.slot_embedding", normal_embedding(num_slots, d, rng))?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("sha.layer{i}");
            layers.push(ShaLayer {
                self_attn: MultiHeadAttention::new(params, &format!("{p}.self_attn"), d, cfg.heads, rng)?,
                self_norm: LayerNorm::new(params, &format!("{p}.self_norm"), d)?,
                utterance_attn: MultiHeadAttention::new(params, &format!("{p}.utterance_attn"), d, cfg.heads, rng)?,
                utterance_norm: LayerNorm::new(params, &format!("{p}.utterance_norm"), d)?,
                result_attn: MultiHeadAttention::new(params, &format!("{p}.result_attn"), d, cfg.heads, rng)?,
                result_norm: LayerNorm::new(params, &format!("{p}.result_norm"), d)?,
                ffn: FeedForward::new(params, &format!("{p}.ffn"), d, cfg.d_ff, rng)?,
                ffn_norm: LayerNorm::new(params, &format!("{p}.ffn_norm"), d)?,
            });
        }
        Ok(Self {
            layers,
            variant: cfg.variant,
            ablation: cfg.ablation,
            intent_table,
            slot_table,
            num_intents,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Looks up `E_u` in the token table and `E_r` in the result tables.
    /// Returns `None` when the bundle has no real history position.
    pub fn embed_history<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        token_table: Var,
        bundle: &HistoryBundle,
    ) -> Result<Option<HistoryEmbeddings>> {
        if bundle.is_empty() {
            return Ok(None);
        }
        let utterance = tape.gather_rows(token_table, &bundle.utterance)?;
        let intents = tape.param(self.intent_table);
        let slots = tape.param(self.slot_table);
        let table = tape.concat_rows(&[intents, slots])?;
        let ids: Vec<usize> = bundle
            .results
            .iter()
            .map(|r| match *r {
                ResultToken::Intent(i) => i,
                ResultToken::Slot(s) => self.num_intents + s,
                ResultToken::Pad => 0,
            })
            .collect();
        let results = tape.gather_rows(table, &ids)?;
        Ok(Some(HistoryEmbeddings {
            utterance,
            results,
            mask: bundle.mask.clone(),
        }))
    }

    /// Returns `ê = Ĥ_DH + e`, or `e` itself when the module is bypassed.
    /// `mask` marks the real rows of `e` (CLS and tokens).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &mut Ctx,
        e: Var,
        mask: &[bool],
        history: Option<&HistoryEmbeddings>,
    ) -> Result<Var> {
        if self.ablation.bypassed() {
            return Ok(e);
        }
        let mut x = e;
        for layer in &self.layers {
            x = self.layer_forward(layer, tape, ctx, x, mask, history)?;
        }
        tape.add(x, e)
    }

    fn layer_forward<T: Real>(
        &self,
        l: &ShaLayer,
        tape: &mut Tape<'_, T>,
        ctx: &mut Ctx,
        x: Var,
        mask: &[bool],
        history: Option<&HistoryEmbeddings>,
    ) -> Result<Var> {
        let rows = tape.rows(x);
        let self_mask = broadcast_key_mask(rows, mask);
        let a = l.self_attn.forward(tape, x, x, x, Some(&self_mask))?;
        let a = ctx.dropout(tape, a)?;
        let sum = tape.add(x, a)?;
        let h_c = l.self_norm.forward(tape, sum)?;

        let ab = self.ablation;
        let h = match (history, self.variant) {
            (None, ShaVariant::Sequential) => h_c,
            (None, ShaVariant::Parallel) => l.result_norm.forward(tape, h_c)?,
            (Some(hist), ShaVariant::Sequential) => {
                let hmask = broadcast_key_mask(rows, &hist.mask);
                let mut h = h_c;
                if ab.uses_utterance_attention() {
                    let u = l.utterance_attn.forward(tape, h, hist.utterance, hist.utterance, Some(&hmask))?;
                    let u = ctx.dropout(tape, u)?;
                    let s = tape.add(h, u)?;
                    h = l.utterance_norm.forward(tape, s)?;
                }
                if ab.uses_result_attention() {
                    let keys = if ab == ShaAblation::ResultOnly { hist.results } else { hist.utterance };
                    let r = l.result_attn.forward(tape, h, keys, hist.results, Some(&hmask))?;
                    let r = ctx.dropout(tape, r)?;
                    let s = tape.add(h, r)?;
                    h = l.result_norm.forward(tape, s)?;
                }
                h
            }
            (Some(hist), ShaVariant::Parallel) => {
                let hmask = broadcast_key_mask(rows, &hist.mask);
                let mut s = h_c;
                if ab.uses_utterance_attention() {
                    let u = l.utterance_attn.forward(tape, h_c, hist.utterance, hist.utterance, Some(&hmask))?;
                    let u = ctx.dropout(tape, u)?;
                    s = tape.add(s, u)?;
                }
                if ab.uses_result_attention() {
                    let keys = if ab == ShaAblation::ResultOnly { hist.results } else { hist.utterance };
                    let r = l.result_attn.forward(tape, h_c, keys, hist.results, Some(&hmask))?;
                    let r = ctx.dropout(tape, r)?;
                    s = tape.add(s, r)?;
                }
                l.result_norm.forward(tape, s)?
            }
        };
        let f = l.ffn.forward(tape, ctx, h)?;
        let f = ctx.dropout(tape, f)?;
        let s = tape.add(h, f)?;
        l.ffn_norm.forward(tape, s)
    }
}
