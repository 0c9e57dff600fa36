//! Token relevance scoring, top-k token and column selection, attention bias
//! construction, and the exact-drop harness.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderWeights, ForwardMode};
use crate::error::{contract, DotError, Result};
use crate::table::TokenizedSequence;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Per-token `s_t = log P(t | q, T)`, aligned with a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningScores {
    values: Vec<f64>,
}

impl PruningScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&s| !(s <= 0.0)) {
            return Err(contract(format!("pruning score {} at {i} is not <= 0", values[i])));
        }
        Ok(PruningScores { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Token,
    Column,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Ascending positions into the scored sequence.
    pub kept: Vec<usize>,
    pub mode: SelectionMode,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    /// `s_t` for every kept token, over the compacted sequence.
    Soft,
    /// `-inf` for every dropped token, over the full sequence.
    Hard,
}

/// Linear head mapping final hidden states to one relevance logit per token.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningHead {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl PruningHead {
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, hidden: usize, rng: &mut R) -> Result<Self> {
        let data = crate::encoder::truncated_normal(rng, hidden);
        Ok(PruningHead {
            kernel: store.insert(format!("{prefix}head.kernel"), vec![hidden, 1], data, true)?,
            bias: store.insert(format!("{prefix}head.bias"), vec![1], vec![T::zero()], false)?,
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let find = |n: &str| {
            store
                .id(&format!("{prefix}{n}"))
                .ok_or_else(|| DotError::Checkpoint(format!("missing tensor `{prefix}{n}`")))
        };
        Ok(PruningHead {
            kernel: find("head.kernel")?,
            bias: find("head.bias")?,
        })
    }
}

/// Graph nodes produced by [`score_tokens`].
#[derive(Debug, Clone)]
pub struct ScoredTokens {
    /// Relevance logits, shape `[len]`.
    pub logits: Var,
    /// `log sigmoid(logits)`, shape `[len]`.
    pub scores: Var,
}

impl ScoredTokens {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Result<PruningScores> {
        PruningScores::new(g.value(self.scores).iter().map(|v| v.to_f64().unwrap()).collect())
    }
}

/// Runs the pruning encoder and its head over `seq`.
pub fn score_tokens<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    weights: &EncoderWeights,
    head: &PruningHead,
    seq: &TokenizedSequence,
    rng: Option<&mut (dyn RngCore + 'static)>,
) -> Result<ScoredTokens> {
    let out = encoder::forward(g, store, weights, seq, None, ForwardMode::KeyOnly, rng)?;
    let w = g.param(store, head.kernel);
    let b = g.param(store, head.bias);
    let z = g.matmul(out.hidden, w)?;
    let z = g.add_row_bcast(z, b)?;
    let logits = g.reshape(z, vec![seq.len()])?;
    let scores = g.log_sigmoid(logits);
    Ok(ScoredTokens { logits, scores })
}

fn check_budget(seq: &TokenizedSequence, k: usize) -> Result<usize> {
    let mandatory = seq.mandatory_count();
    if k < mandatory {
        return Err(DotError::Budget {
            budget: k,
            required: mandatory,
        });
    }
    Ok(k - mandatory)
}

fn check_len(scores: &[f64], seq: &TokenizedSequence) -> Result<()> {
    if scores.len() != seq.len() {
        return Err(DotError::Shape {
            op: "selection",
            lhs: vec![seq.len()],
            rhs: vec![scores.len()],
        });
    }
    Ok(())
}

fn mandatory_plus(seq: &TokenizedSequence, mut picked: Vec<usize>) -> Vec<usize> {
    picked.extend((0..seq.len()).filter(|&i| seq.is_mandatory(i)));
    picked.sort_unstable();
    picked
}

/// Keeps the mandatory span plus the highest-scoring table tokens (earlier
/// position first on ties) up to `k` tokens in total.
pub fn select_top_k_tokens(scores: &PruningScores, seq: &TokenizedSequence, k: usize) -> Result<Selection> {
    let s = scores.values();
    check_len(s, seq)?;
    let budget = check_budget(seq, k)?;
    let mut table: Vec<usize> = seq.table_indices().collect();
    table.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    table.truncate(budget);
    Ok(Selection {
        kept: mandatory_plus(seq, table),
        mode: SelectionMode::Token,
        k,
    })
}

/// Mean score per 1-based column id, ascending by id.
pub fn column_scores(scores: &PruningScores, seq: &TokenizedSequence) -> Result<Vec<(usize, f64)>> {
    check_len(scores.values(), seq)?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for i in seq.table_indices() {
        let e = acc.entry(seq.column_ids[i]).or_default();
        e.0 += scores.values()[i];
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(c, (sum, n))| (c, sum / n as f64)).collect())
}

/// Admits whole columns by descending mean score (lower id on ties); a column
/// that does not fit is skipped and later ones are still tried.
pub fn select_columns(column_scores: &[(usize, f64)], seq: &TokenizedSequence, k: usize) -> Result<Selection> {
    let mut remaining = check_budget(seq, k)?;
    let mut ranked = column_scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in seq.table_indices() {
        members.entry(seq.column_ids[i]).or_default().push(i);
    }
    let mut picked = Vec::new();
    for (col, _) in ranked {
        let Some(m) = members.get(&col) else { continue };
        if m.len() <= remaining {
            remaining -= m.len();
            picked.extend_from_slice(m);
        }
    }
    Ok(Selection {
        kept: mandatory_plus(seq, picked),
        mode: SelectionMode::Column,
        k,
    })
}

/// Bias values for a selection. `Soft` yields one entry per kept token
/// (mandatory tokens get 0); `Hard` yields one entry per original token.
pub fn build_bias(selection: &Selection, scores: &PruningScores, seq: &TokenizedSequence, mode: BiasMode) -> Vec<f64> {
    match mode {
        BiasMode::Soft => selection
            .kept
            .iter()
            .map(|&i| if seq.is_mandatory(i) { 0.0 } else { scores.values()[i] })
            .collect(),
        BiasMode::Hard => {
            let mut out = vec![f64::NEG_INFINITY; seq.len()];
            for &i in &selection.kept {
                out[i] = 0.0;
            }
            out
        }
    }
}

/// Soft bias as a graph node: kept scores with mandatory entries zeroed, so
/// gradients reach the pruning model only through kept table tokens.
pub fn soft_bias_var<T: Scalar>(g: &mut Graph<T>, selection: &Selection, seq: &TokenizedSequence, scores: Var) -> Result<Var> {
    let gathered = g.gather_elems(scores, &selection.kept)?;
    let mask = selection
        .kept
        .iter()
        .map(|&i| if seq.is_mandatory(i) { T::zero() } else { T::one() })
        .collect();
    let mask = g.constant(vec![selection.kept.len()], mask)?;
    g.mul(gathered, mask)
}

/// Max abs difference over surviving positions between the full sequence
/// with `-inf` on `drop` (applied in `mode`) and the compacted sequence.
pub fn hard_drop_diff(
    store: &ParamStore<f64>,
    weights: &EncoderWeights,
    seq: &TokenizedSequence,
    drop: &[usize],
    mode: ForwardMode,
) -> Result<f64> {
    let mut dropped = vec![false; seq.len()];
    for &i in drop {
        if i >= seq.len() {
            return Err(contract(format!("drop index {i} out of range")));
        }
        if seq.is_mandatory(i) {
            return Err(contract(format!("token {i} is mandatory and cannot be dropped")));
        }
        dropped[i] = true;
    }
    let kept: Vec<usize> = (0..seq.len()).filter(|&i| !dropped[i]).collect();
    let h = weights.config.hidden;

    let mut g = Graph::new();
    let bias = dropped.iter().map(|&d| if d { f64::NEG_INFINITY } else { 0.0 }).collect();
    let bias = g.constant(vec![seq.len()], bias)?;
    let full = encoder::forward(&mut g, store, weights, seq, Some(bias), mode, None)?;
    let compact = encoder::forward(&mut g, store, weights, &seq.select(&kept), None, ForwardMode::KeyOnly, None)?;
    let (a, b) = (g.value(full.hidden), g.value(compact.hidden));
    let mut worst = 0.0f64;
    for (r, &i) in kept.iter().enumerate() {
        for c in 0..h {
            let d = (a[i * h + c] - b[r * h + c]).abs();
            // a NaN must not pass as agreement
            worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
        }
    }
    Ok(worst)
}

/// Exact-drop check with the symmetric mask.
pub fn hard_drop_equivalence(
    store: &ParamStore<f64>,
    weights: &EncoderWeights,
    seq: &TokenizedSequence,
    drop: &[usize],
) -> Result<f64> {
    hard_drop_diff(store, weights, seq, drop, ForwardMode::Symmetric)
}
