//! Evaluation summaries: accuracy overall and per length bucket, the
//! answer-score-gap histogram, and an independent re-scoring of predictions.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use dot_core::dot::{EvalRecord, Prediction, Prepared};
use dot_core::synth::{bucketize, BucketEdges};
use dot_core::table::Example;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub bucket: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Correct count from [`rescore`], which ignores the `correct` flags.
    pub rescored_correct: usize,
    pub rescorer_agrees: bool,
    /// Non-empty buckets only.
    pub buckets: Vec<BucketReport>,
    pub answer_pruned: usize,
    pub answer_pruned_rate: f64,
    pub score_gap: Option<GapSummary>,
    pub histogram: Vec<HistogramBin>,
}

/// Counts predictions matching the gold answers, straight from the examples.
pub fn rescore(records: &[EvalRecord], examples: &[Example]) -> usize {
    records
        .iter()
        .filter(|r| {
            let ex = &examples[r.index];
            match r.prediction {
                Prediction::Cell(Some(c)) => ex
                    .answer_coords
                    .as_ref()
                    .is_some_and(|gold| gold.iter().eq(std::iter::once(&c))),
                Prediction::Cell(None) => false,
                Prediction::Label(b) => ex.label == Some(b),
            }
        })
        .count()
}

/// `bins` equal-width bins spanning the observed range; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![HistogramBin {
            lo,
            hi,
            count: values.len(),
        }];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: lo + i as f64 * width,
            hi: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count,
        })
        .collect()
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn summarize(records: &[EvalRecord], data: &[Prepared], edges: &BucketEdges, bins: usize) -> EvalReport {
    let examples: Vec<Example> = data.iter().map(|p| p.example.clone()).collect();
    let n = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let rescored_correct = rescore(records, &examples);
    let buckets = bucketize(&examples, edges)
        .into_iter()
        .map(|(b, idx)| {
            let c = idx.iter().filter(|&&i| records[i].correct).count();
            BucketReport {
                bucket: edges.label(b),
                n: idx.len(),
                correct: c,
                accuracy: ratio(c, idx.len()),
            }
        })
        .collect();
    let answer_pruned = records.iter().filter(|r| r.answer_pruned).count();
    let gaps: Vec<f64> = records.iter().filter_map(|r| r.answer_score_gap).collect();
    let score_gap = (!gaps.is_empty()).then(|| GapSummary {
        n: gaps.len(),
        mean: gaps.iter().sum::<f64>() / gaps.len() as f64,
        min: gaps.iter().copied().fold(f64::INFINITY, f64::min),
        max: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    });
    EvalReport {
        n,
        correct,
        accuracy: ratio(correct, n),
        rescored_correct,
        rescorer_agrees: rescored_correct == correct,
        buckets,
        answer_pruned,
        answer_pruned_rate: ratio(answer_pruned, n),
        score_gap,
        histogram: histogram(&gaps, bins),
    }
}

pub fn write_histogram(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lo", "hi", "count"])?;
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
