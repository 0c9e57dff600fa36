use rand::RngCore;

use super::EncoderWeights;
use crate::error::{contract, DotError, Result};
use crate::table::TokenizedSequence;
use crate::tensor::{Degenerate, Graph, ParamStore, Scalar, Var};

const LN_EPS: f64 = 1e-12;

/// Where a per-token bias enters the attention logits `z[query, key]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// `bias[t]` is added to column `t`: token `t` as an information source.
    KeyOnly,
    /// Column `t` and row `t`. With `-inf` this both hides `t` and silences
    /// its own query, which is what exact dropping needs.
    Symmetric,
    /// Row `t` only. Kept for contrast with the key convention.
    QueryOnly,
}

impl ForwardMode {
    fn degenerate(self) -> Degenerate {
        match self {
            ForwardMode::KeyOnly => Degenerate::Error,
            _ => Degenerate::Zero,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final hidden states, `[len, H]`.
    pub hidden: Var,
    /// `tanh(W h_CLS + b)`, `[1, H]`.
    pub pooled: Var,
    /// Attention probabilities, one `[len, len]` node per (layer, head),
    /// layer-major.
    pub attention: Vec<Var>,
}

fn check_bias<T: Scalar>(values: &[T], len: usize) -> Result<()> {
    if values.len() != len {
        return Err(DotError::Shape {
            op: "attention bias",
            lhs: vec![len],
            rhs: vec![values.len()],
        });
    }
    if let Some(i) = values.iter().position(|&b| !(b <= T::zero())) {
        return Err(contract(format!("attention bias at {i} is {:?}; it must be <= 0", values[i])));
    }
    Ok(())
}

fn attention_probs<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    bias: Option<Var>,
    mode: ForwardMode,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let mut z = g.matmul_ext(q, k, true, T::one() / T::c(d as f64).sqrt())?;
    if let Some(b) = bias {
        if mode != ForwardMode::QueryOnly {
            z = g.add_row_bcast(z, b)?;
        }
        if mode != ForwardMode::KeyOnly {
            z = g.add_col_bcast(z, b)?;
        }
    }
    g.softmax_rows(z, mode.degenerate())
}

/// One head of scaled dot-product attention with an additive per-token bias
/// in logit space. Returns `(output, probabilities)`.
pub fn biased_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mode: ForwardMode,
) -> Result<(Var, Var)> {
    if let Some(b) = bias {
        check_bias(g.value(b), g.shape(k)[0])?;
    }
    let p = attention_probs(g, q, k, bias, mode)?;
    let out = g.matmul(p, v)?;
    Ok((out, p))
}

fn dense<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, kernel: crate::tensor::ParamId, bias: crate::tensor::ParamId) -> Result<Var> {
    let w = g.param(store, kernel);
    let b = g.param(store, bias);
    let y = g.matmul(x, w)?;
    g.add_row_bcast(y, b)
}

fn maybe_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, p: f64, rng: &mut Option<&mut (dyn RngCore + 'static)>) -> Var {
    match rng {
        Some(r) => g.dropout(x, p, *r),
        None => x,
    }
}

/// Runs the encoder on `seq`. `bias` (length `seq.len()`, entries `<= 0`) is
/// applied in every layer and head. Dropout is active only when `rng` is given.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    weights: &EncoderWeights,
    seq: &TokenizedSequence,
    bias: Option<Var>,
    mode: ForwardMode,
    mut rng: Option<&mut (dyn RngCore + 'static)>,
) -> Result<EncoderOutput> {
    let cfg = &weights.config;
    let n = seq.len();
    if n == 0 {
        return Err(contract("cannot encode an empty sequence"));
    }
    if n > cfg.max_input || seq.max_position() >= cfg.max_input {
        return Err(DotError::InputTooLong {
            len: n.max(seq.max_position() + 1),
            max: cfg.max_input,
        });
    }
    if let Some(b) = bias {
        check_bias(g.value(b), n)?;
    }

    let zeros = vec![0usize; n];
    let channels: [&[usize]; 7] = [
        &seq.segment_ids,
        &seq.column_ids,
        &seq.row_ids,
        &zeros,
        &seq.rank_ids,
        &zeros,
        &zeros,
    ];
    let word = g.param(store, weights.word);
    let mut x = g.gather_rows(word, &seq.token_ids)?;
    let pos = g.param(store, weights.position);
    let e = g.gather_rows(pos, &seq.position_ids)?;
    x = g.add(x, e)?;
    for (table, ids) in weights.token_types.iter().zip(channels) {
        let t = g.param(store, *table);
        let e = g.gather_rows(t, ids)?;
        x = g.add(x, e)?;
    }
    let gain = g.param(store, weights.emb_norm_gain);
    let beta = g.param(store, weights.emb_norm_bias);
    let eps = T::c(LN_EPS);
    x = g.layer_norm(x, gain, beta, eps)?;
    x = maybe_dropout(g, x, cfg.hidden_dropout, &mut rng);

    let (heads, hd) = (cfg.num_heads, cfg.head_dim());
    let mut attention = Vec::with_capacity(cfg.num_layers * heads);
    for layer in &weights.layers {
        let q = dense(g, store, x, layer.query_kernel, layer.query_bias)?;
        let k = dense(g, store, x, layer.key_kernel, layer.key_bias)?;
        let v = dense(g, store, x, layer.value_kernel, layer.value_bias)?;
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let p = attention_probs(g, qh, kh, bias, mode)?;
            attention.push(p);
            let p = maybe_dropout(g, p, cfg.attention_dropout, &mut rng);
            ctx.push(g.matmul(p, vh)?);
        }
        let ctx = if heads == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
        let a = dense(g, store, ctx, layer.attn_out_kernel, layer.attn_out_bias)?;
        let a = maybe_dropout(g, a, cfg.hidden_dropout, &mut rng);
        let a = g.add(a, x)?;
        let gain = g.param(store, layer.attn_norm_gain);
        let beta = g.param(store, layer.attn_norm_bias);
        x = g.layer_norm(a, gain, beta, eps)?;

        let f = dense(g, store, x, layer.inter_kernel, layer.inter_bias)?;
        let f = g.gelu(f);
        let f = dense(g, store, f, layer.out_kernel, layer.out_bias)?;
        let f = maybe_dropout(g, f, cfg.hidden_dropout, &mut rng);
        let f = g.add(f, x)?;
        let gain = g.param(store, layer.out_norm_gain);
        let beta = g.param(store, layer.out_norm_bias);
        x = g.layer_norm(f, gain, beta, eps)?;
    }

    let cls = g.gather_rows(x, &[0])?;
    let pooled = dense(g, store, cls, weights.pooler_kernel, weights.pooler_bias)?;
    let pooled = g.tanh(pooled);
    Ok(EncoderOutput {
        hidden: x,
        pooled,
        attention,
    })
}
