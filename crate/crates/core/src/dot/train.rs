use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{answer_score_gap, dot_forward, dot_loss, is_answer_token, DoTModel, ForwardOptions, Prepared};
use crate::error::{DotError, Result};
use crate::pruning::PruningScores;
use crate::table::{CellRef, Origin, TaskType};
use crate::tensor::{AdamW, AdamWConfig, Graph, LinearSchedule, ParamId, ParamStore, Precision, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Missing fields in serialized form take the [`Default`] values.
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub num_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    #[serde(default)]
    pub adam: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Worker threads for the examples of a batch. Results are merged in
    /// example order, so the value does not change any output.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

fn default_threads() -> usize {
    1
}

/// The WIKISQL row of the per-dataset hyperparameters.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::dataset("wikisql").expect("known dataset")
    }
}

impl TrainConfig {
    /// Learning rate, warmup ratio, dropout rates and step count published
    /// for `wikisql`, `tabfact` or `wikitq`.
    pub fn dataset(name: &str) -> Result<Self> {
        let (learning_rate, warmup_ratio, hidden_dropout, attention_dropout, num_steps) = match name.to_ascii_lowercase().as_str() {
            "wikisql" => (6e-5, 0.14, 0.1, 0.1, 50_000),
            "tabfact" => (2e-5, 0.05, 0.07, 0.0, 80_000),
            "wikitq" => (1.9e-5, 0.19, 0.1, 0.1, 50_000),
            _ => return Err(DotError::Config(format!("no hyperparameters for dataset `{name}`"))),
        };
        Ok(TrainConfig {
            learning_rate,
            warmup_ratio,
            hidden_dropout,
            attention_dropout,
            num_steps,
            batch_size: 8,
            seed: 0,
            precision: Precision::F32,
            adam: AdamWConfig::default(),
            clip_norm: default_clip(),
            threads: default_threads(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DotError::Config(m));
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return fail("batch_size and threads must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        for p in [self.hidden_dropout, self.attention_dropout] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("dropout rate {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One line of the metrics trace. Only deterministic quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub pruning_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Batch mean over examples whose answer survived preselection.
    pub answer_score_gap: Option<f64>,
    pub answer_pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    /// Wall time of forward, backward and update per step.
    pub step_seconds: Vec<f64>,
    /// Examples per second over the steps after the first ten.
    pub npe_per_sec: Option<f64>,
}

/// Maps `f` over `items` on up to `threads` scoped workers; output order
/// matches input order.
fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(usize, &I) -> O + Sync) -> Vec<O> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(i, x)| f(c * chunk + i, x)).collect::<Vec<O>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

struct ExampleResult<T> {
    loss: T,
    task: T,
    pruning: T,
    gap: Option<f64>,
    answer_pruned: bool,
    grads: BTreeMap<ParamId, Vec<T>>,
}

fn example_step<T: Scalar>(
    model: &DoTModel,
    store: &ParamStore<T>,
    prepared: &Prepared,
    rng: Option<&mut (dyn RngCore + 'static)>,
) -> Result<ExampleResult<T>> {
    let mut g = Graph::new();
    let (out, parts) = dot_loss(&mut g, store, model, prepared, rng)?;
    let grads = g.backward(parts.total)?.into_params();
    let gap = out
        .scores
        .as_ref()
        .and_then(|s| answer_score_gap(s, &out.selection, &prepared.seq, &prepared.example));
    Ok(ExampleResult {
        loss: g.scalar(parts.total),
        task: parts.task,
        pruning: parts.pruning,
        gap,
        answer_pruned: parts.answer_pruned,
        grads,
    })
}

/// Trains `store` in place. `on_step` sees every record as it is produced.
pub fn train<T: Scalar>(
    model: &DoTModel,
    store: &mut ParamStore<T>,
    cfg: &TrainConfig,
    data: &[Prepared],
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DotError::Data("training set is empty".into()));
    }
    let mut model = model.clone();
    for w in model.pruning.iter_mut().map(|(w, _)| w).chain([&mut model.task]) {
        w.config.hidden_dropout = cfg.hidden_dropout;
        w.config.attention_dropout = cfg.attention_dropout;
    }
    let dropout = cfg.hidden_dropout > 0.0 || cfg.attention_dropout > 0.0;
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.warmup_ratio, cfg.num_steps);
    let mut adam = AdamW::new(cfg.adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut step_seconds = Vec::with_capacity(cfg.num_steps);
    let mut final_loss = f64::NAN;

    for step in 0..cfg.num_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let started = Instant::now();
        let results = par_map(&batch, cfg.threads, |j, &idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D0D0);
            rng.set_stream((step * cfg.batch_size + j) as u64);
            let rng: Option<&mut (dyn RngCore + 'static)> = if dropout { Some(&mut rng) } else { None };
            example_step(&model, store, &data[idx], rng)
        });
        let mut grads: BTreeMap<ParamId, Vec<T>> = BTreeMap::new();
        let (mut loss, mut task, mut pruning) = (0.0, 0.0, 0.0);
        let (mut gap_sum, mut gap_n, mut answer_pruned) = (0.0, 0usize, 0usize);
        for r in results {
            let r = r?;
            loss += r.loss.to_f64().unwrap();
            task += r.task.to_f64().unwrap();
            pruning += r.pruning.to_f64().unwrap();
            if let Some(gap) = r.gap {
                gap_sum += gap;
                gap_n += 1;
            }
            answer_pruned += r.answer_pruned as usize;
            for (id, g) in r.grads {
                match grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(id, g);
                    }
                }
            }
        }
        let b = batch.len() as f64;
        let (loss, task, pruning) = (loss / b, task / b, pruning / b);
        let mut sq = 0.0f64;
        for g in grads.values() {
            sq += g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>();
        }
        let grad_norm = sq.sqrt() / b;
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(DotError::Divergence {
                step,
                detail: format!("loss {loss}, gradient norm {grad_norm}"),
            });
        }
        // batch mean and clipping are applied inside the update
        let mut scale = 1.0 / b;
        if let Some(max) = cfg.clip_norm {
            if grad_norm > max {
                scale *= max / grad_norm;
            }
        }
        let lr = schedule.lr(step);
        adam.step_scaled(store, &grads, scale, lr);
        step_seconds.push(started.elapsed().as_secs_f64());

        final_loss = loss;
        on_step(&StepRecord {
            step,
            loss,
            task_loss: task,
            pruning_loss: pruning,
            lr,
            grad_norm,
            answer_score_gap: (gap_n > 0).then(|| gap_sum / gap_n as f64),
            answer_pruned,
        })?;
    }

    let skip = if cfg.num_steps > 10 { 10 } else { 0 };
    let timed: f64 = step_seconds[skip..].iter().sum();
    let npe_per_sec = (timed > 0.0).then(|| ((cfg.num_steps - skip) * cfg.batch_size) as f64 / timed);
    Ok(TrainSummary {
        steps: cfg.num_steps,
        final_loss,
        step_seconds,
        npe_per_sec,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Highest mean-logit cell among kept tokens (none if no cell survived).
    Cell(Option<CellRef>),
    Label(bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub full_len: usize,
    pub prediction: Prediction,
    pub correct: bool,
    pub answer_score_gap: Option<f64>,
    pub answer_pruned: bool,
}

/// Predicted cell: the kept cell whose tokens have the highest mean logit,
/// earliest in reading order on ties.
pub fn predict_cell(origins: &[Origin], logits: &[f64]) -> Option<CellRef> {
    let mut cells: BTreeMap<CellRef, (f64, usize)> = BTreeMap::new();
    for (o, &z) in origins.iter().zip(logits) {
        if let Origin::Cell { row, col } = *o {
            let e = cells.entry(CellRef { row, col }).or_default();
            e.0 += z;
            e.1 += 1;
        }
    }
    let mut best: Option<(CellRef, f64)> = None;
    for (c, (sum, n)) in cells {
        let m = sum / n as f64;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((c, m));
        }
    }
    best.map(|(c, _)| c)
}

/// Evaluates every example without dropout. `scores_override` replaces the
/// pruning model's scores per example when given.
pub fn evaluate<T: Scalar>(
    model: &DoTModel,
    store: &ParamStore<T>,
    data: &[Prepared],
    threads: usize,
    scores_override: Option<&(dyn Fn(&Prepared) -> PruningScores + Sync)>,
) -> Result<Vec<EvalRecord>> {
    par_map(data, threads, |index, p| {
        let over = scores_override.map(|f| f(p));
        let mut g = Graph::<T>::new();
        let opts = ForwardOptions {
            scores_override: over.as_ref(),
            ..ForwardOptions::default()
        };
        let out = dot_forward(&mut g, store, model, &p.seq, opts)?;
        let logits: Vec<f64> = g.value(out.logits).iter().map(|v| v.to_f64().unwrap()).collect();
        let ex = &p.example;
        let (prediction, correct) = match ex.task_type() {
            TaskType::CellSelection => {
                let origins: Vec<Origin> = out.logit_positions.iter().map(|&i| out.compact.origin[i]).collect();
                let cell = predict_cell(&origins, &logits);
                let correct = match (cell, &ex.answer_coords) {
                    (Some(c), Some(gold)) => gold.len() == 1 && gold.contains(&c),
                    _ => false,
                };
                (Prediction::Cell(cell), correct)
            }
            TaskType::Classification => {
                let yes = logits[0] > 0.0;
                (Prediction::Label(yes), ex.label == Some(yes))
            }
        };
        let has_answers = ex.answer_coords.as_ref().is_some_and(|a| !a.is_empty());
        let answer_pruned = has_answers && !out.compact.origin.iter().any(|&o| is_answer_token(ex, o));
        let answer_score_gap = out.scores.as_ref().and_then(|s| answer_score_gap(s, &out.selection, &p.seq, ex));
        Ok(EvalRecord {
            index,
            full_len: p.full_len,
            prediction,
            correct,
            answer_score_gap,
            answer_pruned,
        })
    })
    .into_iter()
    .collect()
}
