//! The full model: token embeddings, history attention, encoder with LRM,
//! classifier heads and the training-only slot-label decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SlgConfig};
use crate::data::{DialogueSession, HistoryBundle, HistorySource, Prediction, CLS};
use crate::encoder::{Encoder, EncoderOutput, Heads, Lrm};
use crate::error::{Error, Result};
use crate::nn::layers::normal_embedding;
use crate::nn::{Ctx, ParamId, ParamSet, Real, Tape, Var};
use crate::sha::{Sha, ShaAblation, ShaVariant};
use crate::slg::{argmax, slg_loss, slu_loss, Decoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub intents: usize,
    pub slots: usize,
}

/// Encoder pass over one turn.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub output: EncoderOutput,
    /// Real-row mask of the encoder input.
    pub mask: Vec<bool>,
    /// Real token count of the current turn.
    pub n: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub slu: Var,
    pub slg: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ShaLrt<T: Real = f64> {
    pub config: ModelConfig,
    pub slg_config: SlgConfig,
    pub dims: Dims,
    pub params: ParamSet<T>,
    token_embedding: ParamId,
    sha: Option<Sha>,
    encoder: Encoder,
    heads: Heads,
    lrm: Option<Lrm>,
    decoder: Option<Decoder>,
    /// Number of parameters registered before the decoder.
    decoder_start: usize,
    lrm_active: bool,
}

impl<T: Real> ShaLrt<T> {
    /// Builds and initializes every parameter from `rng`. Decoder parameters are
    /// registered last so that they can be dropped by truncation.
    pub fn new(config: &ModelConfig, slg: &SlgConfig, dims: Dims, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.intents == 0 || dims.slots == 0 || dims.vocab <= CLS {
            return Err(Error::Config(format!("degenerate dimensions {dims:?}")));
        }
        let mut params = ParamSet::new();
        let d = config.d_model;
        let token_embedding = params.register("embedding.tokens", normal_embedding(dims.vocab, d, rng))?;
        let sha = if config.sha_ablation.bypassed() {
            None
        } else {
            Some(Sha::new(&mut params, &config.sha(), dims.intents, dims.slots, rng)?)
        };
        let enc_cfg = config.encoder();
        let encoder = Encoder::new(&mut params, &enc_cfg, rng)?;
        let heads = Heads::new(&mut params, "heads", d, dims.intents, dims.slots, rng)?;
        let lrm = if enc_cfg.lrm_enabled {
            Some(Lrm::new(&mut params, &enc_cfg, dims.intents, dims.slots, rng)?)
        } else {
            None
        };
        let decoder_start = params.len();
        let decoder = if slg.enabled {
            Some(Decoder::new(
                &mut params,
                slg.decoder_layers,
                d,
                config.ffn_width(),
                config.heads,
                dims.slots,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            slg_config: slg.clone(),
            dims,
            params,
            token_embedding,
            sha,
            encoder,
            heads,
            lrm,
            decoder,
            decoder_start,
            lrm_active: true,
        })
    }

    pub fn with_seed(config: &ModelConfig, slg: &SlgConfig, dims: Dims, seed: u64) -> Result<Self> {
        Self::new(config, slg, dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    /// Parameter count without the decoder.
    pub fn inference_param_count(&self) -> usize {
        self.decoder_start
    }

    /// Drops the decoder and its parameters; inference is unaffected.
    pub fn strip_decoder(&mut self) {
        self.params.truncate(self.decoder_start);
        self.decoder = None;
    }

    /// Toggles LRM at inference without touching its parameters.
    pub fn has_lrm(&self) -> bool {
        self.lrm.is_some()
    }

    pub fn set_lrm_active(&mut self, on: bool) {
        self.lrm_active = on;
    }

    /// Switches between the sequential and parallel history layers; both share parameters.
    pub fn set_sha_variant(&mut self, variant: ShaVariant) {
        self.config.sha_variant = variant;
        if let Some(sha) = &mut self.sha {
            sha.variant = variant;
        }
    }

    pub fn cast<U: Real>(&self) -> ShaLrt<U> {
        ShaLrt {
            config: self.config.clone(),
            slg_config: self.slg_config.clone(),
            dims: self.dims,
            params: self.params.cast(),
            token_embedding: self.token_embedding,
            sha: self.sha.clone(),
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
            lrm: self.lrm.clone(),
            decoder: self.decoder.clone(),
            decoder_start: self.decoder_start,
            lrm_active: self.lrm_active,
        }
    }

    /// Runs embeddings, history attention and the encoder for one turn of real
    /// token ids (CLS is prepended here).
    pub fn encode(&self, tape: &mut Tape<'_, T>, ctx: &mut Ctx, tokens: &[usize], history: &HistoryBundle) -> Result<Encoded> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty turn".into()));
        }
        if !history.is_aligned() {
            return Err(Error::Alignment {
                keys: history.utterance.len(),
                values: history.results.len(),
            });
        }
        let n = tokens.len();
        let mut ids = Vec::with_capacity(n + 1);
        ids.push(CLS);
        ids.extend_from_slice(tokens);
        if self.config.sha_ablation == ShaAblation::CatAll {
            ids.extend(history.utterance.iter().zip(&history.mask).filter(|(_, &m)| m).map(|(&t, _)| t));
        }
        let mask = vec![true; ids.len()];
        let table = tape.param(self.token_embedding);
        let e = tape.gather_rows(table, &ids)?;
        let x = match &self.sha {
            Some(sha) => {
                let hist = sha.embed_history(tape, table, history)?;
                sha.forward(tape, ctx, e, &mask, hist.as_ref())?
            }
            None => e,
        };
        let lrm = if self.lrm_active { self.lrm.as_ref() } else { None };
        let output = self.encoder.forward(tape, ctx, x, &mask, &self.heads, lrm)?;
        Ok(Encoded { output, mask, n })
    }

    /// `L_SLU + λ·L_SLG` for one turn. The decoder is skipped when absent or when λ is zero.
    pub fn loss(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &mut Ctx,
        tokens: &[usize],
        history: &HistoryBundle,
        gold_intent: usize,
        gold_slots: &[usize],
    ) -> Result<LossVars> {
        if gold_slots.len() != tokens.len() {
            return Err(Error::Contract(format!(
                "{} slot labels for {} tokens",
                gold_slots.len(),
                tokens.len()
            )));
        }
        let enc = self.encode(tape, ctx, tokens, history)?;
        let slu = slu_loss(tape, &enc.output.heads, gold_intent, gold_slots)?;
        let cfg = &self.slg_config;
        match &self.decoder {
            Some(dec) if cfg.lambda > 0.0 => {
                let generated = dec.forward(tape, ctx, enc.output.hidden, &enc.mask, gold_slots)?;
                let slg = slg_loss(tape, generated, gold_slots, enc.output.heads.slots, cfg.alpha, cfg.consistency)?;
                let weighted = tape.scale(slg, T::lit(cfg.lambda));
                let total = tape.add(slu, weighted)?;
                Ok(LossVars { total, slu, slg: Some(slg) })
            }
            _ => Ok(LossVars { total: slu, slu, slg: None }),
        }
    }

    /// Argmax labels for one turn; never touches the decoder.
    pub fn predict(&self, tokens: &[usize], history: &HistoryBundle) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, &mut Ctx::eval(), tokens, history)?;
        let heads = &enc.output.heads;
        let intent = argmax(tape.value(heads.intent_logits));
        let cols = self.dims.slots;
        let slots = tape.value(heads.slot_logits)[..enc.n * cols].chunks(cols).map(argmax).collect();
        Ok(Prediction { intent, slots })
    }

    /// Predicts every turn in order, recording each prediction before the next
    /// turn reads it as history.
    pub fn predict_session(&self, session: &mut DialogueSession) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(session.turns.len());
        for t in 0..session.turns.len() {
            let history = session.history(t, HistorySource::Predicted)?;
            let p = self.predict(&session.turns[t].tokens, &history)?;
            session.record_prediction(t, p.intent, p.slots.clone())?;
            out.push(p);
        }
        Ok(out)
    }

    /// Token-serial greedy slot generation with the decoder over the same encoder.
    pub fn greedy_decode(&self, tokens: &[usize], history: &HistoryBundle) -> Result<Vec<usize>> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no decoder".into()))?;
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, &mut Ctx::eval(), tokens, history)?;
        dec.greedy(&mut tape, enc.output.hidden, &enc.mask, enc.n)
    }
}
