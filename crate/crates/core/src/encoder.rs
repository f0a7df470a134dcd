//! Relative-position Transformer encoder, the layer-refined mechanism and the
//! intent/slot classifier heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{broadcast_key_mask, normal_embedding, xavier_uniform};
use crate::nn::{Ctx, FeedForward, LayerNorm, Linear, ParamId, ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub rel_pos_clip: usize,
    pub lrm_enabled: bool,
    /// LRM runs after each listed layer (1-based).
    pub lrm_positions: Vec<usize>,
    pub lrm_shared_heads: bool,
    /// Adds `Norm(x + Z)` around the self-attention.
    pub standard_residual: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.lrm_enabled {
            if self.lrm_positions.is_empty() {
                return Err(Error::Config("lrm_positions is empty while LRM is enabled".into()));
            }
            if let Some(k) = self.lrm_positions.iter().find(|&&k| k == 0 || k >= self.n_layers) {
                return Err(Error::Config(format!(
                    "lrm position {k} outside 1..{}",
                    self.n_layers - 1
                )));
            }
        }
        Ok(())
    }
}

pub fn clip(x: i64, l: usize) -> i64 {
    x.clamp(-(l as i64), l as i64)
}

/// Row of the relative tables used by query `p` and key `q`: `clip(p − q, l) + l`.
pub fn relative_index(len: usize, l: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(len * len);
    for p in 0..len {
        for q in 0..len {
            idx.push((clip(p as i64 - q as i64, l) + l as i64) as usize);
        }
    }
    idx
}

/// Multi-head self-attention with learned relative-position terms on keys and values.
#[derive(Clone, Debug)]
pub struct RelSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// `(2l+1) × head_dim`, shared by all heads.
    pub rel_key: ParamId,
    pub rel_value: ParamId,
    pub heads: usize,
    pub clip: usize,
}

impl RelSelfAttention {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        clip: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dh = d_model / heads;
        Ok(Self {
            query: Linear::new(params, &format!("{name}.query"), d_model, d_model, true, rng)?,
            key: Linear::new(params, &format!("{name}.key"), d_model, d_model, true, rng)?,
            value: Linear::new(params, &format!("{name}.value"), d_model, d_model, true, rng)?,
            output: Linear::new(params, &format!("{name}.output"), d_model, d_model, true, rng)?,
            rel_key: params.register(format!("{name}.rel_key"), xavier_uniform(2 * clip + 1, dh, rng))?,
            rel_value: params.register(format!("{name}.rel_value"), xavier_uniform(2 * clip + 1, dh, rng))?,
            heads,
            clip,
        })
    }

    /// `mask` marks real rows; padded keys receive no attention.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
        let len = tape.rows(x);
        let d = tape.cols(x);
        let dh = d / self.heads;
        let width = 2 * self.clip + 1;
        let idx = relative_index(len, self.clip);
        let key_mask = broadcast_key_mask(len, mask);
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let wk = tape.param(self.rel_key);
        let wv = tape.param(self.rel_value);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let content = tape.matmul_t(qh, kh)?;
            let rel = tape.matmul_t(qh, wk)?;
            let rel = tape.gather_cols(rel, &idx, len)?;
            let logits = tape.add(content, rel)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax(logits, Some(&key_mask))?;
            let out = tape.matmul(attn, vh)?;
            let buckets = tape.scatter_cols(attn, &idx, width)?;
            let rel_out = tape.matmul(buckets, wv)?;
            outs.push(tape.add(out, rel_out)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.output.forward(tape, merged)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: RelSelfAttention,
    pub attn_norm: Option<LayerNorm>,
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng>(params: &mut ParamSet<T>, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let attn = RelSelfAttention::new(params, &format!("{name}.self_attn"), d, cfg.heads, cfg.rel_pos_clip, rng)?;
        let attn_norm = if cfg.standard_residual {
            Some(LayerNorm::new(params, &format!("{name}.attn_norm"), d)?)
        } else {
            None
        };
        Ok(Self {
            attn,
            attn_norm,
            ffn: FeedForward::new(params, &format!("{name}.ffn"), d, cfg.d_ff, rng)?,
            norm: LayerNorm::new(params, &format!("{name}.norm"), d)?,
        })
    }

    /// `H = Norm(Z + FFN(Z))` with `Z` the attention output.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, ctx: &mut Ctx, x: Var, mask: &[bool]) -> Result<Var> {
        let z = self.attn.forward(tape, x, mask)?;
        let mut z = ctx.dropout(tape, z)?;
        if let Some(norm) = &self.attn_norm {
            let s = tape.add(x, z)?;
            z = norm.forward(tape, s)?;
        }
        let f = self.ffn.forward(tape, ctx, z)?;
        let f = ctx.dropout(tape, f)?;
        let s = tape.add(z, f)?;
        self.norm.forward(tape, s)
    }
}

/// Class distributions (and logits) read off a hidden-state sequence.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `1 × d_i`
    pub intent: Var,
    /// `(L−1) × d_s`, one row per non-CLS position.
    pub slots: Var,
    pub intent_logits: Var,
    pub slot_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub intent: Linear,
    /// Consumes `h_j ⊕ h_cls`.
    pub slot: Linear,
}

impl Heads {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        d_model: usize,
        num_intents: usize,
        num_slots: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            intent: Linear::new(params, &format!("{name}.intent"), d_model, num_intents, true, rng)?,
            slot: Linear::new(params, &format!("{name}.slot"), 2 * d_model, num_slots, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<HeadOutput> {
        let len = tape.rows(h);
        if len < 2 {
            return Err(Error::Contract("classifier needs CLS plus at least one token".into()));
        }
        let cls = tape.slice_rows(h, 0, 1)?;
        let intent_logits = self.intent.forward(tape, cls)?;
        let tokens = tape.slice_rows(h, 1, len - 1)?;
        let cls_rep = tape.gather_rows(cls, &vec![0; len - 1])?;
        let joined = tape.concat_cols(&[tokens, cls_rep])?;
        let slot_logits = self.slot.forward(tape, joined)?;
        Ok(HeadOutput {
            intent: tape.softmax(intent_logits, None)?,
            slots: tape.softmax(slot_logits, None)?,
            intent_logits,
            slot_logits,
        })
    }
}

/// Result-embedding tables of the layer-refined mechanism.
#[derive(Clone, Debug)]
pub struct Lrm {
    /// `d_i × d_model` (the transpose of the column-per-class layout).
    pub intent_table: ParamId,
    /// `d_s × d_model`
    pub slot_table: ParamId,
    /// `d_model × 1` slot-summary weighting vector.
    pub weight: ParamId,
    /// Separate preliminary classifier when heads are not shared.
    pub heads: Option<Heads>,
}

impl Lrm {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        cfg: &EncoderConfig,
        num_intents: usize,
        num_slots: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            intent_table: params.register("lrm.intent_embedding", normal_embedding(num_intents, d, rng))?,
            slot_table: params.register("lrm.slot_embedding", normal_embedding(num_slots, d, rng))?,
            weight: params.register("lrm.weight", xavier_uniform(d, 1, rng))?,
            heads: if cfg.lrm_shared_heads {
                None
            } else {
                Some(Heads::new(params, "lrm.heads", d, num_intents, num_slots, rng)?)
            },
        })
    }

    /// Mixes soft preliminary results back into `h`. `mask` marks real rows of `h`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var, pre: &HeadOutput, mask: &[bool]) -> Result<Var> {
        let e_i = tape.param(self.intent_table);
        let e_s = tape.param(self.slot_table);
        let v = tape.param(self.weight);
        let intent_emb = tape.matmul(pre.intent, e_i)?;
        let slot_emb = tape.matmul(pre.slots, e_s)?;
        let scores = tape.matmul(slot_emb, v)?;
        let scores = tape.transpose(scores);
        let alpha = tape.softmax(scores, Some(&mask[1..]))?;
        let summary = tape.matmul(alpha, slot_emb)?;
        let cls_add = tape.add(intent_emb, summary)?;
        let delta = tape.concat_rows(&[cls_add, slot_emb])?;
        tape.add(h, delta)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub heads: HeadOutput,
    /// Preliminary predictions, one per LRM application.
    pub preliminary: Vec<HeadOutput>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub lrm_positions: Vec<usize>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(params: &mut ParamSet<T>, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(params, &format!("encoder.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let mut lrm_positions = if cfg.lrm_enabled { cfg.lrm_positions.clone() } else { Vec::new() };
        lrm_positions.sort_unstable();
        lrm_positions.dedup();
        Ok(Self { layers, lrm_positions })
    }

    /// Runs every layer, applying `lrm` after the configured layers, then classifies.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &mut Ctx,
        x: Var,
        mask: &[bool],
        heads: &Heads,
        lrm: Option<&Lrm>,
    ) -> Result<EncoderOutput> {
        let mut h = x;
        let mut preliminary = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, ctx, h, mask)?;
            if let Some(lrm) = lrm {
                if self.lrm_positions.contains(&(i + 1)) {
                    let pre = lrm.heads.as_ref().unwrap_or(heads).forward(tape, h)?;
                    h = lrm.apply(tape, h, &pre, mask)?;
                    preliminary.push(pre);
                }
            }
        }
        Ok(EncoderOutput {
            hidden: h,
            heads: heads.forward(tape, h)?,
            preliminary,
        })
    }
}

/// Sinusoidal position table, `len × d`.
pub fn sinusoidal<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            data.push(T::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[len.max(1), d], data).expect("positive shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use crate::nn::MultiHeadAttention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn cfg(layers: usize, lrm: bool) -> EncoderConfig {
        EncoderConfig {
            n_layers: layers,
            d_model: D,
            d_ff: 16,
            heads: 2,
            rel_pos_clip: 2,
            lrm_enabled: lrm,
            lrm_positions: vec![1],
            lrm_shared_heads: true,
            standard_residual: false,
        }
    }

    fn input(rows: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * D).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    struct Model {
        params: ParamSet<f64>,
        enc: Encoder,
        heads: Heads,
        lrm: Option<Lrm>,
    }

    fn model(c: &EncoderConfig, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc = Encoder::new(&mut params, c, &mut rng).unwrap();
        let heads = Heads::new(&mut params, "heads", D, 3, 5, &mut rng).unwrap();
        let lrm = c.lrm_enabled.then(|| Lrm::new(&mut params, c, 3, 5, &mut rng).unwrap());
        Model { params, enc, heads, lrm }
    }

    fn run(m: &Model, p: &ParamSet<f64>, x: &[f64], mask: &[bool]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(p);
        let xv = tape.matrix(mask.len(), D, x.to_vec()).unwrap();
        let out = m.enc.forward(&mut tape, &mut Ctx::eval(), xv, mask, &m.heads, m.lrm.as_ref()).unwrap();
        (
            tape.value(out.hidden).to_vec(),
            tape.value(out.heads.intent).to_vec(),
            tape.value(out.heads.slots).to_vec(),
        )
    }

    #[test]
    fn clip_and_index() {
        assert_eq!(clip(5, 3), 3);
        assert_eq!(clip(-5, 3), -3);
        assert_eq!(clip(2, 3), 2);
        let idx = relative_index(3, 1);
        assert_eq!(idx, [1, 0, 0, 2, 1, 0, 2, 2, 1]);
        assert!(relative_index(4, 0).iter().all(|&i| i == 0));
    }

    #[test]
    fn single_position_output_is_value_plus_relative_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let attn = RelSelfAttention::new(&mut params, "a", D, 2, 3, &mut rng).unwrap();
        let x = input(1, 2);
        let mut tape = Tape::new(&params);
        let xv = tape.matrix(1, D, x.clone()).unwrap();
        let out = attn.forward(&mut tape, xv, &[true]).unwrap();
        let got = tape.value(out).to_vec();

        let v = crate::nn::matmul(&Tensor::new(&[1, D], x).unwrap(), &params.get(attn.value.weight).tensor).unwrap();
        let wv = &params.get(attn.rel_value).tensor;
        let mut pre = v.into_data();
        for (i, p) in pre.iter_mut().enumerate() {
            *p += params.get(attn.value.bias.unwrap()).tensor.data()[i] + wv.row(3)[i % (D / 2)];
        }
        let mut want = crate::nn::matmul(&Tensor::new(&[1, D], pre).unwrap(), &params.get(attn.output.weight).tensor)
            .unwrap()
            .into_data();
        for (i, w) in want.iter_mut().enumerate() {
            *w += params.get(attn.output.bias.unwrap()).tensor.data()[i];
        }
        assert!(close(&got, &want, 1e-12));
    }

    #[test]
    fn zero_relative_tables_give_vanilla_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let rel = RelSelfAttention::new(&mut params, "a", D, 2, 0, &mut rng).unwrap();
        for id in [rel.rel_key, rel.rel_value] {
            params.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let vanilla = MultiHeadAttention {
            query: rel.query.clone(),
            key: rel.key.clone(),
            value: rel.value.clone(),
            output: rel.output.clone(),
            heads: 2,
            d_model: D,
        };
        let x = input(4, 4);
        let mut tape = Tape::new(&params);
        let xv = tape.matrix(4, D, x).unwrap();
        let a = rel.forward(&mut tape, xv, &[true; 4]).unwrap();
        let b = vanilla.forward(&mut tape, xv, xv, xv, None).unwrap();
        assert!(close(tape.value(a), tape.value(b), 1e-12));
    }

    #[test]
    fn position_information_is_live() {
        let m = model(&cfg(1, false), 5);
        let x = input(4, 6);
        let mut swapped = x.clone();
        for c in 0..D {
            swapped.swap(D + c, 2 * D + c);
        }
        let (a, ..) = run(&m, &m.params, &x, &[true; 4]);
        let (b, ..) = run(&m, &m.params, &swapped, &[true; 4]);
        // rows 1 and 2 swapped in the input must not merely be swapped in the output
        let mut b_back = b.clone();
        for c in 0..D {
            b_back.swap(D + c, 2 * D + c);
        }
        assert!(!close(&a, &b_back, 1e-6));
    }

    #[test]
    fn zero_ffn_output_leaves_norm_of_attention() {
        let m = model(&cfg(1, false), 7);
        let mut p = m.params.clone();
        for name in ["encoder.layer0.ffn.outer.weight", "encoder.layer0.ffn.outer.bias"] {
            p.by_name_mut(name).unwrap().tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(3, 8);
        let (h, ..) = run(&m, &p, &x, &[true; 3]);
        let mut tape = Tape::new(&p);
        let xv = tape.matrix(3, D, x).unwrap();
        let z = m.enc.layers[0].attn.forward(&mut tape, xv, &[true; 3]).unwrap();
        let n = m.enc.layers[0].norm.forward(&mut tape, z).unwrap();
        assert!(close(&h, tape.value(n), 1e-12));
    }

    #[test]
    fn zero_heads_are_uniform_and_sum_to_one() {
        let m = model(&cfg(2, false), 9);
        let (_, i, s) = run(&m, &m.params, &input(4, 10), &[true; 4]);
        assert!((i.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for row in s.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut p = m.params.clone();
        for param in p.iter_mut().filter(|p| p.name.starts_with("heads.")) {
            param.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, i, s) = run(&m, &p, &input(4, 10), &[true; 4]);
        assert!(i.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(s.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn argmax_is_invariant_to_logit_scaling() {
        let m = model(&cfg(2, true), 11);
        let (_, i, s) = run(&m, &m.params, &input(5, 12), &[true; 5]);
        let mut p = m.params.clone();
        for param in p.iter_mut().filter(|p| p.name.starts_with("heads.")) {
            param.tensor.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        }
        // LRM consumes the heads too, so compare with LRM off
        let m2 = Model { lrm: None, ..model(&cfg(2, true), 11) };
        let (_, i1, s1) = run(&m2, &m.params, &input(5, 12), &[true; 5]);
        let (_, i2, s2) = run(&m2, &p, &input(5, 12), &[true; 5]);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(&i1), argmax(&i2));
        for (a, b) in s1.chunks(5).zip(s2.chunks(5)) {
            assert_eq!(argmax(a), argmax(b));
        }
        assert_eq!(i.len(), 3);
        assert_eq!(s.len(), 4 * 5);
    }

    #[test]
    fn lrm_with_zero_tables_is_identity() {
        let with = model(&cfg(2, true), 13);
        let mut p = with.params.clone();
        for id in [with.lrm.as_ref().unwrap().intent_table, with.lrm.as_ref().unwrap().slot_table] {
            p.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let without = Model { lrm: None, ..model(&cfg(2, true), 13) };
        let x = input(4, 14);
        assert!(close(&run(&with, &p, &x, &[true; 4]).0, &run(&without, &p, &x, &[true; 4]).0, 1e-12));
    }

    #[test]
    fn lrm_off_is_plain_layer_composition() {
        let m = model(&cfg(3, false), 15);
        let x = input(4, 16);
        let (h, ..) = run(&m, &m.params, &x, &[true; 4]);
        let mut tape = Tape::new(&m.params);
        let mut v = tape.matrix(4, D, x).unwrap();
        for l in &m.enc.layers {
            v = l.forward(&mut tape, &mut Ctx::eval(), v, &[true; 4]).unwrap();
        }
        assert_eq!(h, tape.value(v));
    }

    #[test]
    fn lrm_summary_is_mean_when_weight_is_zero() {
        let m = model(&cfg(2, true), 17);
        let lrm = m.lrm.as_ref().unwrap();
        let mut p = m.params.clone();
        p.get_mut(lrm.weight).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.get_mut(lrm.intent_table).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new(&p);
        let h = tape.matrix(3, D, input(3, 18)).unwrap();
        let pre = m.heads.forward(&mut tape, h).unwrap();
        let out = lrm.apply(&mut tape, h, &pre, &[true; 3]).unwrap();
        let e_s = crate::nn::matmul(&tape.tensor(pre.slots), &p.get(lrm.slot_table).tensor).unwrap();
        let (hv, ov) = (tape.value(h).to_vec(), tape.value(out).to_vec());
        for c in 0..D {
            let mean = 0.5 * (e_s.at(0, c) + e_s.at(1, c));
            assert!((ov[c] - hv[c] - mean).abs() < 1e-12);
            assert!((ov[D + c] - hv[D + c] - e_s.at(0, c)).abs() < 1e-12);
        }
        // padded token rows are excluded from the summary
        let mut tape = Tape::new(&p);
        let h = tape.matrix(3, D, input(3, 18)).unwrap();
        let pre = m.heads.forward(&mut tape, h).unwrap();
        let out = lrm.apply(&mut tape, h, &pre, &[true, true, false]).unwrap();
        let ov = tape.value(out).to_vec();
        for c in 0..D {
            assert!((ov[c] - hv[c] - e_s.at(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_slot_embeddings_collapse_summary() {
        let m = model(&cfg(2, true), 19);
        let lrm = m.lrm.as_ref().unwrap();
        let mut p = m.params.clone();
        let row: Vec<f64> = (0..D).map(|i| i as f64 * 0.1).collect();
        let t = &mut p.get_mut(lrm.slot_table).tensor;
        for r in 0..5 {
            t.data_mut()[r * D..(r + 1) * D].copy_from_slice(&row);
        }
        p.get_mut(lrm.intent_table).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new(&p);
        let h = tape.zeros(4, D);
        let pre = m.heads.forward(&mut tape, h).unwrap();
        let out = lrm.apply(&mut tape, h, &pre, &[true; 4]).unwrap();
        let ov = tape.value(out);
        assert!(close(&ov[..D], &ov[D..2 * D], 1e-12));
    }

    #[test]
    fn padded_positions_do_not_change_outputs_or_gradients() {
        let m = model(&cfg(2, true), 21);
        let x = input(5, 22);
        let loss = |rows: usize| {
            let mut tape = Tape::new(&m.params);
            let xv = tape.matrix(rows, D, x[..rows * D].to_vec()).unwrap();
            let mask: Vec<bool> = (0..rows).map(|i| i < 3).collect();
            let out = m.enc.forward(&mut tape, &mut Ctx::eval(), xv, &mask, &m.heads, m.lrm.as_ref()).unwrap();
            let s = tape.slice_rows(out.heads.slots, 0, 2).unwrap();
            let a = tape.nll(s, &[1, 2], 1e-12).unwrap();
            let b = tape.nll(out.heads.intent, &[0], 1e-12).unwrap();
            let l = tape.add(a, b).unwrap();
            (tape.scalar(l), tape.backward(l).unwrap().into_params())
        };
        let (l3, g3) = loss(3);
        let (l5, g5) = loss(5);
        assert!((l3 - l5).abs() < 1e-12);
        for (a, b) in g3.iter().zip(&g5) {
            assert!(close(a, b, 1e-12));
        }
    }

    #[test]
    fn gradient_through_two_layers_with_lrm() {
        for standard in [false, true] {
            let mut c = cfg(2, true);
            c.standard_residual = standard;
            let mut m = model(&c, 23);
            let x = input(4, 24);
            let enc = m.enc.clone();
            let heads = m.heads.clone();
            let lrm = m.lrm.clone();
            let f = |p: &ParamSet<f64>| -> Result<(f64, Vec<Vec<f64>>)> {
                let mut tape = Tape::new(p);
                let xv = tape.matrix(4, D, x.clone())?;
                let out = enc.forward(&mut tape, &mut Ctx::eval(), xv, &[true; 4], &heads, lrm.as_ref())?;
                let a = tape.nll(out.heads.slots, &[0, 4, 2], 1e-12)?;
                let b = tape.nll(out.heads.intent, &[1], 1e-12)?;
                let l = tape.add(a, b)?;
                Ok((tape.scalar(l), tape.backward(l)?.into_params()))
            };
            let (_, g) = f(&m.params).unwrap();
            let r = check_params(&mut m.params, &g, 1e-5, |p| Ok(f(p)?.0)).unwrap();
            assert!(r.max_rel_err <= 1e-4, "{}", r.worst);
        }
    }

    #[test]
    fn invalid_lrm_positions_are_rejected() {
        let mut c = cfg(3, true);
        c.lrm_positions = vec![3];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.lrm_positions = vec![0];
        assert!(c.validate().is_err());
        c.lrm_positions = vec![1, 2];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal::<f64>(2, 4);
        assert_eq!(t.row(0), [0.0, 1.0, 0.0, 1.0]);
        assert!((t.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }
}
