//! Slot label generation: a teacher-forced Transformer decoder over slot labels
//! that reads the shared encoder states during training, plus the joint losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{sinusoidal, HeadOutput};
use crate::error::{Error, Result};
use crate::nn::layers::{broadcast_key_mask, causal_mask, normal_embedding};
use crate::nn::{Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamSet, Real, Tape, Var, LOG_FLOOR};

/// Which side of the consistency term receives gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    /// The tagger's distribution is a fixed target; only the generator moves.
    #[default]
    TaggerTarget,
    Both,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// `(d_s + 1) × d_model`; the last row is BOS.
    label_embedding: ParamId,
    layers: Vec<DecoderLayer>,
    output: Linear,
    pub bos: usize,
    d_model: usize,
}

impl Decoder {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        num_slots: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let label_embedding = params.register("slg.label_embedding", normal_embedding(num_slots + 1, d_model, rng))?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("slg.layer{i}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(params, &format!("{p}.self_attn"), d_model, heads, rng)?,
                self_norm: LayerNorm::new(params, &format!("{p}.self_norm"), d_model)?,
                cross_attn: MultiHeadAttention::new(params, &format!("{p}.cross_attn"), d_model, heads, rng)?,
                cross_norm: LayerNorm::new(params, &format!("{p}.cross_norm"), d_model)?,
                ffn: FeedForward::new(params, &format!("{p}.ffn"), d_model, d_ff, rng)?,
                ffn_norm: LayerNorm::new(params, &format!("{p}.ffn_norm"), d_model)?,
            });
        }
        let output = Linear::new(params, "slg.output", d_model, num_slots, true, rng)?;
        Ok(Self {
            label_embedding,
            layers,
            output,
            bos: num_slots,
            d_model,
        })
    }

    /// Distributions over slot labels for every position of `inputs`
    /// (BOS followed by earlier labels). Position `j` sees inputs `≤ j` only.
    pub fn forward_inputs<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &mut Ctx,
        encoder: Var,
        encoder_mask: &[bool],
        inputs: &[usize],
    ) -> Result<Var> {
        let n = inputs.len();
        let table = tape.param(self.label_embedding);
        let emb = tape.gather_rows(table, inputs)?;
        let pos = tape.constant(&sinusoidal(n, self.d_model));
        let mut x = tape.add(emb, pos)?;
        x = ctx.dropout(tape, x)?;
        let causal = causal_mask(n);
        let cross = broadcast_key_mask(n, encoder_mask);
        for l in &self.layers {
            let a = l.self_attn.forward(tape, x, x, x, Some(&causal))?;
            let a = ctx.dropout(tape, a)?;
            let s = tape.add(x, a)?;
            x = l.self_norm.forward(tape, s)?;
            let c = l.cross_attn.forward(tape, x, encoder, encoder, Some(&cross))?;
            let c = ctx.dropout(tape, c)?;
            let s = tape.add(x, c)?;
            x = l.cross_norm.forward(tape, s)?;
            let f = l.ffn.forward(tape, ctx, x)?;
            let f = ctx.dropout(tape, f)?;
            let s = tape.add(x, f)?;
            x = l.ffn_norm.forward(tape, s)?;
        }
        let logits = self.output.forward(tape, x)?;
        tape.softmax(logits, None)
    }

    /// Teacher-forced pass: inputs are the gold labels shifted right behind BOS.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &mut Ctx,
        encoder: Var,
        encoder_mask: &[bool],
        gold_slots: &[usize],
    ) -> Result<Var> {
        let real = encoder_mask.iter().filter(|&&m| m).count();
        if gold_slots.is_empty() || real < gold_slots.len() + 1 {
            return Err(Error::Contract(format!(
                "{} gold labels for an encoder sequence with {real} real rows",
                gold_slots.len()
            )));
        }
        let mut inputs = Vec::with_capacity(gold_slots.len());
        inputs.push(self.bos);
        inputs.extend_from_slice(&gold_slots[..gold_slots.len() - 1]);
        self.forward_inputs(tape, ctx, encoder, encoder_mask, &inputs)
    }

    /// Token-serial greedy generation of `n` labels, re-running the decoder on the
    /// growing prefix at each step.
    pub fn greedy<T: Real>(&self, tape: &mut Tape<'_, T>, encoder: Var, encoder_mask: &[bool], n: usize) -> Result<Vec<usize>> {
        let mut inputs = vec![self.bos];
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let p = self.forward_inputs(tape, &mut Ctx::eval(), encoder, encoder_mask, &inputs)?;
            let row = &tape.value(p)[step * self.output.out_dim..(step + 1) * self.output.out_dim];
            let best = argmax(row);
            out.push(best);
            inputs.push(best);
        }
        Ok(out)
    }
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `−log ŷ_I[y_I] − Σ_j log ŷ_S[j, y_S_j]` over the first `gold_slots.len()` slot rows.
pub fn slu_loss<T: Real>(tape: &mut Tape<'_, T>, heads: &HeadOutput, gold_intent: usize, gold_slots: &[usize]) -> Result<Var> {
    let intent = tape.nll(heads.intent, &[gold_intent], LOG_FLOOR)?;
    let slots = tape.slice_rows(heads.slots, 0, gold_slots.len())?;
    let slots = tape.nll(slots, gold_slots, LOG_FLOOR)?;
    tape.add(intent, slots)
}

/// `(1 − α)·NLL(ŷ_G, y) + α·CE(ŷ_G, ŷ_S)` with `ŷ_S` as the soft target.
pub fn slg_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    generated: Var,
    gold_slots: &[usize],
    tagger: Var,
    alpha: f64,
    direction: Consistency,
) -> Result<Var> {
    let n = gold_slots.len();
    if tape.rows(generated) != n || tape.rows(tagger) < n {
        return Err(Error::Contract(format!(
            "generator has {} rows, tagger {}, gold {n}",
            tape.rows(generated),
            tape.rows(tagger)
        )));
    }
    let nll = tape.nll(generated, gold_slots, LOG_FLOOR)?;
    let nll = tape.scale(nll, T::lit(1.0 - alpha));
    if alpha == 0.0 {
        return Ok(nll);
    }
    let mut target = tape.slice_rows(tagger, 0, n)?;
    if direction == Consistency::TaggerTarget {
        target = tape.detach(target);
    }
    let ce = tape.soft_ce(generated, target, LOG_FLOOR)?;
    let ce = tape.scale(ce, T::lit(alpha));
    tape.add(nll, ce)
}
