use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamSet, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-forward execution mode: whether dropout is live, and the generator that draws its masks.
pub struct Ctx<'r> {
    pub training: bool,
    pub dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Ctx<'r> {
    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn dropout<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => tape.dropout(x, self.dropout, true, &mut **rng),
            _ => Ok(x),
        }
    }
}

pub fn xavier_uniform<T: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(&[rows, cols], data).expect("non-empty shape")
}

/// Embedding table rows drawn from N(0, d^-1/2).
pub fn normal_embedding<T: Real, R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, (dim as f64).powf(-0.5)).expect("positive std");
    let data = (0..rows * dim).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(&[rows, dim], data).expect("non-empty shape")
}

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.register(
            format!("{name}.weight"),
            xavier_uniform(in_dim, out_dim, rng),
        )?;
        let bias = if bias {
            Some(params.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: params.register(format!("{name}.gain"), Tensor::filled(&[dim], T::one()))?,
            bias: params.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Two linear maps with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(params, &format!("{name}.inner"), d_model, d_ff, true, rng)?,
            outer: Linear::new(params, &format!("{name}.outer"), d_ff, d_model, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h)?;
        self.outer.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention with separate query, key and value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

/// Key mask broadcast to every query row: `out[i·keys + j] = keys_mask[j]`.
pub fn broadcast_key_mask(query_rows: usize, key_mask: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(query_rows * key_mask.len());
    for _ in 0..query_rows {
        m.extend_from_slice(key_mask);
    }
    m
}

/// Lower-triangular `len × len` mask: position `i` sees positions `≤ i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|k| k % len <= k / len).collect()
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(params, &format!("{name}.query"), d_model, d_model, true, rng)?,
            key: Linear::new(params, &format!("{name}.key"), d_model, d_model, true, rng)?,
            value: Linear::new(params, &format!("{name}.value"), d_model, d_model, true, rng)?,
            output: Linear::new(params, &format!("{name}.output"), d_model, d_model, true, rng)?,
            heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `mask` is row-major `queries × keys`, `true` where attention is allowed.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, q_src, k_src, v_src, mask)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns each head's attention weights.
    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let (nk, nv) = (tape.rows(k_src), tape.rows(v_src));
        if nk != nv {
            return Err(Error::Alignment {
                keys: nk,
                values: nv,
            });
        }
        let q = self.query.forward(tape, q_src)?;
        let k = self.key.forward(tape, k_src)?;
        let v = self.value.forward(tape, v_src)?;
        let dh = self.head_dim();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let logits = tape.matmul_t(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax(logits, mask)?;
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok((self.output.forward(tape, merged)?, weights))
    }
}
