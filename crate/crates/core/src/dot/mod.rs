//! The two-stage pipeline: a pruning encoder scores tokens, the top-k survive,
//! and their scores bias every attention layer of the task encoder.

mod train;

pub use train::{evaluate, train, EvalRecord, Prediction, StepRecord, TrainConfig, TrainSummary};

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, checkpoint, EncoderConfig, EncoderWeights, ForwardMode};
use crate::error::{contract, DotError, Result};
use crate::pruning::{
    self, column_scores, select_columns, select_top_k_tokens, BiasMode, PruningHead, PruningScores, Selection,
    SelectionMode,
};
use crate::table::{cc_select, hem_select, linearize_full, CellRef, Example, Origin, TaskType, TokenizedSequence, Vocabulary};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preselector {
    Cc,
    Hem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Task loss only; the pruning model learns through the attention bias.
    J,
    /// Task loss with the bias detached, plus a direct pruning loss.
    P,
    /// Task loss through the bias, plus a direct pruning loss.
    PJ,
}

impl std::str::FromStr for LossMode {
    type Err = DotError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "J" | "j" => Ok(LossMode::J),
            "P" | "p" => Ok(LossMode::P),
            "PJ" | "pj" => Ok(LossMode::PJ),
            other => Err(DotError::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoTConfig {
    /// `None` runs the task encoder directly on the preselected input.
    pub pruning: Option<EncoderConfig>,
    pub task: EncoderConfig,
    pub pre_limit: usize,
    pub k: usize,
    pub preselector: Preselector,
    pub selection: SelectionMode,
    pub loss: LossMode,
    pub beta: f64,
    /// Weight of the direct pruning loss in P and PJ modes.
    #[serde(default = "one")]
    pub pruning_weight: f64,
    pub task_type: TaskType,
    /// Scores are clipped to `[-score_clip, 0]`.
    #[serde(default = "fifty")]
    pub score_clip: f64,
}

fn one() -> f64 {
    1.0
}

fn fifty() -> f64 {
    50.0
}

impl DoTConfig {
    /// `pruning → k → task` over a `pre_limit` cell-concatenation input, J loss.
    pub fn new(pruning: Option<EncoderConfig>, task: EncoderConfig, pre_limit: usize, k: usize) -> Self {
        DoTConfig {
            pruning,
            task,
            pre_limit,
            k,
            preselector: Preselector::Cc,
            selection: SelectionMode::Token,
            loss: LossMode::J,
            beta: 1.0,
            pruning_weight: 1.0,
            task_type: TaskType::CellSelection,
            score_clip: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DotError::Config(m));
        self.task.validate()?;
        if let Some(p) = &self.pruning {
            p.validate()?;
            if self.k > self.pre_limit {
                return fail(format!("k {} exceeds pre_limit {}", self.k, self.pre_limit));
            }
            if self.pre_limit > p.max_input {
                return fail(format!("pre_limit {} exceeds the pruning model's max_input {}", self.pre_limit, p.max_input));
            }
            if p.vocab_size != self.task.vocab_size {
                return fail("pruning and task vocabularies differ".into());
            }
        }
        if self.pre_limit > self.task.max_input {
            // compaction keeps original positions, which range up to pre_limit
            return fail(format!("pre_limit {} exceeds the task model's max_input {}", self.pre_limit, self.task.max_input));
        }
        if !(self.beta >= 0.0) || !(self.pruning_weight >= 0.0) {
            return fail("beta and pruning_weight must be >= 0".into());
        }
        if !(self.score_clip > 0.0) {
            return fail("score_clip must be positive".into());
        }
        Ok(())
    }

    /// Budget of the task model: `k` with a pruning stage, else `pre_limit`.
    pub fn task_budget(&self) -> usize {
        if self.pruning.is_some() {
            self.k
        } else {
            self.pre_limit
        }
    }
}

fn size_name(c: &EncoderConfig) -> String {
    for name in ["mini", "small", "medium", "large"] {
        let p = EncoderConfig::preset(name).expect("known preset");
        if (p.num_layers, p.hidden, p.num_heads, p.intermediate) == (c.num_layers, c.hidden, c.num_heads, c.intermediate) {
            return name.into();
        }
    }
    format!("L{}H{}", c.num_layers, c.hidden)
}

impl fmt::Display for DoTConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pre = match self.preselector {
            Preselector::Cc => "CC",
            Preselector::Hem => "HEM",
        };
        match &self.pruning {
            Some(p) => write!(f, "{pre}→{} DoT({}→{}→{})", self.pre_limit, size_name(p), self.k, size_name(&self.task)),
            None => write!(f, "{pre}→{} {}", self.pre_limit, size_name(&self.task)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    /// One logit per token.
    Cell { kernel: ParamId, bias: ParamId },
    /// One hidden layer on the pooled CLS vector, then one logit.
    Class {
        hidden_kernel: ParamId,
        hidden_bias: ParamId,
        kernel: ParamId,
        bias: ParamId,
    },
}

/// Parameter handles of a full pipeline. Tensors live in a [`ParamStore`]
/// under the `pruning.` and `task.` prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct DoTModel {
    pub config: DoTConfig,
    pub pruning: Option<(EncoderWeights, PruningHead)>,
    pub task: EncoderWeights,
    pub head: TaskHead,
}

impl DoTModel {
    pub fn init<T: Scalar, R: Rng>(config: &DoTConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let pruning = match &config.pruning {
            Some(p) => {
                let w = EncoderWeights::init(store, "pruning.", p, rng)?;
                let head = PruningHead::init(store, "pruning.", p.hidden, rng)?;
                Some((w, head))
            }
            None => None,
        };
        let task = EncoderWeights::init(store, "task.", &config.task, rng)?;
        let h = config.task.hidden;
        let head = match config.task_type {
            TaskType::CellSelection => TaskHead::Cell {
                kernel: store.insert("task.head.cell.kernel", vec![h, 1], crate::encoder::truncated_normal(rng, h), true)?,
                bias: store.insert("task.head.cell.bias", vec![1], vec![T::zero()], false)?,
            },
            TaskType::Classification => TaskHead::Class {
                hidden_kernel: store.insert("task.head.cls.hidden.kernel", vec![h, h], crate::encoder::truncated_normal(rng, h * h), true)?,
                hidden_bias: store.insert("task.head.cls.hidden.bias", vec![h], vec![T::zero(); h], false)?,
                kernel: store.insert("task.head.cls.kernel", vec![h, 1], crate::encoder::truncated_normal(rng, h), true)?,
                bias: store.insert("task.head.cls.bias", vec![1], vec![T::zero()], false)?,
            },
        };
        Ok(DoTModel {
            config: config.clone(),
            pruning,
            task,
            head,
        })
    }

    /// Re-binds handles to tensors of a loaded store.
    pub fn bind<T: Scalar>(config: &DoTConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let pruning = match &config.pruning {
            Some(p) => Some((EncoderWeights::bind(store, "pruning.", p)?, PruningHead::bind(store, "pruning.")?)),
            None => None,
        };
        let find = |n: &str| store.id(n).ok_or_else(|| DotError::Checkpoint(format!("missing tensor `{n}`")));
        let head = match config.task_type {
            TaskType::CellSelection => TaskHead::Cell {
                kernel: find("task.head.cell.kernel")?,
                bias: find("task.head.cell.bias")?,
            },
            TaskType::Classification => TaskHead::Class {
                hidden_kernel: find("task.head.cls.hidden.kernel")?,
                hidden_bias: find("task.head.cls.hidden.bias")?,
                kernel: find("task.head.cls.kernel")?,
                bias: find("task.head.cls.bias")?,
            },
        };
        Ok(DoTModel {
            config: config.clone(),
            pruning,
            task: EncoderWeights::bind(store, "task.", &config.task)?,
            head,
        })
    }

    /// Parameters of the pruning stage.
    pub fn pruning_params(&self) -> Vec<ParamId> {
        match &self.pruning {
            Some((w, h)) => {
                let mut v = w.ids();
                v.extend([h.kernel, h.bias]);
                v
            }
            None => Vec::new(),
        }
    }
}

/// Checkpoint document stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedModel {
    pub dot: DoTConfig,
    pub vocab: Vec<String>,
}

pub fn save_model<T: Scalar>(path: &std::path::Path, store: &ParamStore<T>, config: &DoTConfig, vocab: &Vocabulary) -> Result<()> {
    let doc = SavedModel {
        dot: config.clone(),
        vocab: vocab.entries().to_vec(),
    };
    checkpoint::save(path, store, &serde_json::to_value(doc)?)
}

pub fn load_model<T: Scalar>(path: &std::path::Path) -> Result<(DoTModel, ParamStore<T>, Vocabulary)> {
    let (store, doc) = checkpoint::load::<T>(path)?;
    let doc: SavedModel = serde_json::from_value(doc).map_err(|e| DotError::Checkpoint(e.to_string()))?;
    let vocab = Vocabulary::from_tokens(doc.vocab);
    let model = DoTModel::bind(&doc.dot, &store)?;
    Ok((model, store, vocab))
}

/// An example with its preselected model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub example: Example,
    /// Tokens of the unlimited linearization.
    pub full_len: usize,
    /// Preselected input with positions renumbered from 0.
    pub seq: TokenizedSequence,
}

/// Linearizes and applies the preselector. The preselected input becomes the
/// model input, so its positions are renumbered; the later top-k compaction
/// keeps them.
pub fn prepare(config: &DoTConfig, example: &Example, vocab: &Vocabulary) -> Result<Prepared> {
    example.validate()?;
    let full = linearize_full(example, vocab);
    let mut seq = match config.preselector {
        Preselector::Cc => cc_select(&full, config.pre_limit)?,
        Preselector::Hem => hem_select(&full, &example.question, &example.table, config.pre_limit)?,
    };
    seq.position_ids = (0..seq.len()).collect();
    Ok(Prepared {
        example: example.clone(),
        full_len: full.len(),
        seq,
    })
}

pub fn prepare_all(config: &DoTConfig, examples: &[Example], vocab: &Vocabulary) -> Result<Vec<Prepared>> {
    examples.iter().map(|e| prepare(config, e, vocab)).collect()
}

pub struct ForwardOptions<'a> {
    /// Cut the gradient path from the task loss into the pruning model.
    pub detach_bias: bool,
    /// Use these scores instead of running the pruning model.
    pub scores_override: Option<&'a PruningScores>,
    /// Enables dropout.
    pub rng: Option<&'a mut (dyn RngCore + 'static)>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            detach_bias: false,
            scores_override: None,
            rng: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DoTOutput {
    pub selection: Selection,
    pub compact: TokenizedSequence,
    /// Clipped scores over the preselected input (absent without a pruning stage).
    pub scores: Option<PruningScores>,
    /// Raw relevance logits over the preselected input.
    pub pruning_logits: Option<Var>,
    pub bias: Option<Var>,
    /// Cell selection: one logit per kept table token; classification: one logit.
    pub logits: Var,
    /// Indices into `compact` that the cell-selection logits refer to.
    pub logit_positions: Vec<usize>,
}

/// Runs the pipeline on a preselected input.
pub fn dot_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &DoTModel,
    seq: &TokenizedSequence,
    mut opts: ForwardOptions<'_>,
) -> Result<DoTOutput> {
    let cfg = &model.config;
    let (selection, scores, pruning_logits, bias) = match (&model.pruning, opts.scores_override) {
        (_, Some(over)) => {
            if over.len() != seq.len() {
                return Err(contract("score override length differs from the input"));
            }
            let sel = select(cfg, over, seq)?;
            let b = pruning::build_bias(&sel, over, seq, BiasMode::Soft);
            let b = g.constant(vec![b.len()], b.into_iter().map(T::c).collect())?;
            (sel, Some(over.clone()), None, Some(b))
        }
        (Some((w, head)), None) => {
            let scored = pruning::score_tokens(g, store, w, head, seq, opts.rng.as_deref_mut())?;
            let clipped = g.clamp_min(scored.scores, T::c(-cfg.score_clip));
            let values = PruningScores::new(g.value(clipped).iter().map(|v| v.to_f64().unwrap()).collect())?;
            let sel = select(cfg, &values, seq)?;
            let mut b = pruning::soft_bias_var(g, &sel, seq, clipped)?;
            if opts.detach_bias {
                b = g.detach(b);
            }
            (sel, Some(values), Some(scored.logits), Some(b))
        }
        (None, None) => {
            let sel = Selection {
                kept: (0..seq.len()).collect(),
                mode: cfg.selection,
                k: seq.len(),
            };
            (sel, None, None, None)
        }
    };
    let compact = seq.select(&selection.kept);
    let out = encoder::forward(g, store, &model.task, &compact, bias, ForwardMode::KeyOnly, opts.rng.as_deref_mut())?;

    let (logits, logit_positions) = match &model.head {
        TaskHead::Cell { kernel, bias } => {
            let positions: Vec<usize> = compact.table_indices().collect();
            let rows = g.gather_rows(out.hidden, &positions)?;
            let w = g.param(store, *kernel);
            let b = g.param(store, *bias);
            let z = g.matmul(rows, w)?;
            let z = g.add_row_bcast(z, b)?;
            (g.reshape(z, vec![positions.len()])?, positions)
        }
        TaskHead::Class {
            hidden_kernel,
            hidden_bias,
            kernel,
            bias,
        } => {
            let (hk, hb) = (g.param(store, *hidden_kernel), g.param(store, *hidden_bias));
            let x = g.matmul(out.pooled, hk)?;
            let x = g.add_row_bcast(x, hb)?;
            let x = g.tanh(x);
            let (k, b) = (g.param(store, *kernel), g.param(store, *bias));
            let z = g.matmul(x, k)?;
            let z = g.add_row_bcast(z, b)?;
            (g.reshape(z, vec![1])?, Vec::new())
        }
    };
    Ok(DoTOutput {
        selection,
        compact,
        scores,
        pruning_logits,
        bias,
        logits,
        logit_positions,
    })
}

fn select(cfg: &DoTConfig, scores: &PruningScores, seq: &TokenizedSequence) -> Result<Selection> {
    let k = cfg.k.min(seq.len());
    match cfg.selection {
        SelectionMode::Token => select_top_k_tokens(scores, seq, k),
        SelectionMode::Column => select_columns(&column_scores(scores, seq)?, seq, k),
    }
}

fn is_answer_token(example: &Example, origin: Origin) -> bool {
    match origin {
        Origin::Cell { row, col } => example.is_answer(CellRef { row, col }),
        _ => false,
    }
}

/// Per-term values of a loss graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts<T> {
    pub total: Var,
    pub task: T,
    pub pruning: T,
    /// The example has answer cells but none survived selection.
    pub answer_pruned: bool,
}

/// Mean cross-entropy of the task head: per kept table token against answer
/// membership, or the entailment label.
pub fn task_loss<T: Scalar>(g: &mut Graph<T>, out: &DoTOutput, example: &Example) -> Result<(Var, bool)> {
    match example.task_type() {
        TaskType::CellSelection => {
            let targets: Vec<T> = out
                .logit_positions
                .iter()
                .map(|&i| if is_answer_token(example, out.compact.origin[i]) { T::one() } else { T::zero() })
                .collect();
            let has_answers = example.answer_coords.as_ref().is_some_and(|a| !a.is_empty());
            let pruned = has_answers && targets.iter().all(|&t| t == T::zero());
            Ok((g.bce_with_logits(out.logits, &targets)?, pruned))
        }
        TaskType::Classification => {
            let y = if example.label == Some(true) { T::one() } else { T::zero() };
            Ok((g.bce_with_logits(out.logits, &[y])?, false))
        }
    }
}

/// Cross-entropy of the pruning probabilities against answer membership over
/// the whole preselected input. `None` when there is nothing to supervise.
pub fn pruning_loss<T: Scalar>(g: &mut Graph<T>, out: &DoTOutput, seq: &TokenizedSequence, example: &Example) -> Result<Option<Var>> {
    let Some(logits) = out.pruning_logits else { return Ok(None) };
    if example.task_type() == TaskType::Classification {
        return Ok(None);
    }
    let targets: Vec<T> = seq
        .origin
        .iter()
        .map(|&o| if is_answer_token(example, o) { T::one() } else { T::zero() })
        .collect();
    Ok(Some(g.bce_with_logits(logits, &targets)?))
}

fn combine<T: Scalar>(
    g: &mut Graph<T>,
    task: (Var, bool),
    pruning: Option<Var>,
    beta: f64,
    pruning_weight: Option<f64>,
) -> Result<LossParts<T>> {
    let (t, answer_pruned) = task;
    let task_value = g.scalar(t);
    let (mut sum, pruning_value) = (t, T::zero());
    let mut pruning_value = pruning_value;
    if let (Some(p), Some(w)) = (pruning, pruning_weight) {
        pruning_value = g.scalar(p);
        let wp = g.scale(p, T::c(w));
        sum = g.add(sum, wp)?;
    }
    Ok(LossParts {
        total: g.scale(sum, T::c(beta)),
        task: task_value,
        pruning: pruning_value,
        answer_pruned,
    })
}

/// `β · task` on outputs computed with the bias attached.
pub fn loss_j_dot<T: Scalar>(g: &mut Graph<T>, out: &DoTOutput, example: &Example, beta: f64) -> Result<LossParts<T>> {
    let t = task_loss(g, out, example)?;
    combine(g, t, None, beta, None)
}

/// `β · (task + w · pruning)` on outputs computed with the bias detached.
pub fn loss_p_dot<T: Scalar>(
    g: &mut Graph<T>,
    out: &DoTOutput,
    seq: &TokenizedSequence,
    example: &Example,
    beta: f64,
    pruning_weight: f64,
) -> Result<LossParts<T>> {
    if out.bias.is_some_and(|b| g.requires_grad(b)) {
        return Err(contract("P loss expects outputs computed with a detached bias"));
    }
    let t = task_loss(g, out, example)?;
    let p = pruning_loss(g, out, seq, example)?;
    combine(g, t, p, beta, Some(pruning_weight))
}

/// `β · (task + w · pruning)` with the task term flowing through the bias.
pub fn loss_pj_dot<T: Scalar>(
    g: &mut Graph<T>,
    out: &DoTOutput,
    seq: &TokenizedSequence,
    example: &Example,
    beta: f64,
    pruning_weight: f64,
) -> Result<LossParts<T>> {
    let t = task_loss(g, out, example)?;
    let p = pruning_loss(g, out, seq, example)?;
    combine(g, t, p, beta, Some(pruning_weight))
}

/// Forward pass plus the configured loss.
pub fn dot_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &DoTModel,
    prepared: &Prepared,
    rng: Option<&mut (dyn RngCore + 'static)>,
) -> Result<(DoTOutput, LossParts<T>)> {
    let cfg = &model.config;
    let opts = ForwardOptions {
        detach_bias: cfg.loss == LossMode::P,
        scores_override: None,
        rng,
    };
    let out = dot_forward(g, store, model, &prepared.seq, opts)?;
    let (seq, ex) = (&prepared.seq, &prepared.example);
    let parts = match cfg.loss {
        LossMode::J => loss_j_dot(g, &out, ex, cfg.beta)?,
        LossMode::P => loss_p_dot(g, &out, seq, ex, cfg.beta, cfg.pruning_weight)?,
        LossMode::PJ => loss_pj_dot(g, &out, seq, ex, cfg.beta, cfg.pruning_weight)?,
    };
    Ok((out, parts))
}

/// Mean score of answer-cell tokens minus the mean score of the kept table
/// tokens; `None` when no answer token is in the scored input.
pub fn answer_score_gap(scores: &PruningScores, selection: &Selection, seq: &TokenizedSequence, example: &Example) -> Option<f64> {
    let s = scores.values();
    let answer: Vec<f64> = (0..seq.len()).filter(|&i| is_answer_token(example, seq.origin[i])).map(|i| s[i]).collect();
    let kept: Vec<f64> = selection.kept.iter().filter(|&&i| seq.origin[i].is_table()).map(|&i| s[i]).collect();
    if answer.is_empty() || kept.is_empty() {
        return None;
    }
    Some(answer.iter().sum::<f64>() / answer.len() as f64 - kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Scores that keep exactly the header and the answer rows.
pub fn oracle_row_scores(seq: &TokenizedSequence, example: &Example) -> PruningScores {
    let rows: BTreeSet<usize> = example.answer_coords.iter().flatten().map(|c| c.row).collect();
    let values = seq
        .origin
        .iter()
        .map(|o| match *o {
            Origin::Cell { row, .. } if !rows.contains(&row) => f64::NEG_INFINITY,
            _ => 0.0,
        })
        .collect();
    PruningScores::new(values).expect("scores are 0 or -inf")
}
