//! Deterministic synthetic table QA: key lookups and (key, value) entailment
//! over tables grown with distractor rows.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DotError, Result};
use crate::table::{tokenize, CellRef, Example, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Lookup,
    Entailment,
}

/// Inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }

    fn sample<R: Rng>(self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub rows: Span,
    pub cols: Span,
    /// Tokens per value cell; key cells and headers are one token.
    pub cell_tokens: Span,
    pub vocab_size: usize,
    /// Extra rows per base row, rounded.
    #[serde(default)]
    pub distractor_ratio: f64,
    /// Distractor rows keep being added until the linearized length reaches this.
    #[serde(default)]
    pub min_tokens: usize,
    /// Column holding every answer; drawn per example from the value columns
    /// when `None`.
    #[serde(default = "first_value_column")]
    pub value_column: Option<usize>,
    pub task: SynthTask,
}

fn first_value_column() -> Option<usize> {
    Some(1)
}

const TEMPLATE: [&str; 2] = ["of", "is"];

struct Pools {
    headers: Vec<String>,
    keys: Vec<String>,
    values: Vec<String>,
}

impl GeneratorSpec {
    pub fn lookup(seed: u64, n_examples: usize) -> Self {
        GeneratorSpec {
            seed,
            n_examples,
            rows: Span::new(2, 4),
            cols: Span::new(2, 4),
            cell_tokens: Span::new(1, 2),
            vocab_size: 400,
            distractor_ratio: 1.0,
            min_tokens: 0,
            value_column: first_value_column(),
            task: SynthTask::Lookup,
        }
    }

    fn pools(&self) -> Pools {
        let n_headers = (2 * self.cols.max).max(4);
        let rest = self.vocab_size - n_headers - TEMPLATE.len();
        let n_keys = rest / 2;
        Pools {
            headers: (0..n_headers).map(|i| format!("h{i}")).collect(),
            keys: (0..n_keys).map(|i| format!("k{i}")).collect(),
            values: (0..rest - n_keys).map(|i| format!("v{i}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DotError::Config(m));
        for (name, s) in [("rows", self.rows), ("cols", self.cols), ("cell_tokens", self.cell_tokens)] {
            if s.min > s.max || s.min == 0 {
                return fail(format!("{name} range {}..={} is empty or starts at 0", s.min, s.max));
            }
        }
        if self.vocab_size < 20 {
            return fail(format!("vocab_size {} is below 20", self.vocab_size));
        }
        if self.cols.min < 2 {
            return fail("tables need a key column and at least one value column".into());
        }
        if !(self.distractor_ratio >= 0.0 && self.distractor_ratio.is_finite()) {
            return fail(format!("distractor_ratio {} must be finite and >= 0", self.distractor_ratio));
        }
        if let Some(c) = self.value_column {
            if c == 0 || c >= self.cols.min {
                return fail(format!("value_column {c} must lie in 1..{}", self.cols.min));
            }
        }
        let n_headers = (2 * self.cols.max).max(4);
        if n_headers + TEMPLATE.len() + 4 > self.vocab_size {
            return fail(format!("vocab_size {} leaves no room for keys and values", self.vocab_size));
        }
        Ok(())
    }
}

/// Tokens of `[CLS] question [SEP] table`.
pub fn linearized_len(example: &Example) -> usize {
    let table: usize = example
        .table
        .header
        .iter()
        .chain(example.table.rows.iter().flatten())
        .map(|c| tokenize(c).len())
        .sum();
    2 + tokenize(&example.question).len() + table
}

fn sample_cell<R: Rng>(pools: &Pools, n: usize, rng: &mut R) -> String {
    (0..n)
        .map(|_| pools.values.choose(rng).unwrap().as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn one_example(gs: &GeneratorSpec, pools: &Pools, index: usize) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(gs.seed);
    rng.set_stream(index as u64);

    let n_cols = gs.cols.sample(&mut rng);
    let base_rows = gs.rows.sample(&mut rng);
    let extra = (base_rows as f64 * gs.distractor_ratio).round() as usize;
    let header: Vec<String> = pools.headers.choose_multiple(&mut rng, n_cols).cloned().collect();
    let mut keys = pools.keys.clone();
    keys.shuffle(&mut rng);
    let mut keys = keys.into_iter();

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut len = 2 + 3 + n_cols;
    let out_of_keys = || DotError::Config("key pool exhausted; raise vocab_size or lower min_tokens".into());
    while rows.len() < base_rows + extra || len < gs.min_tokens {
        let mut row = vec![keys.next().ok_or_else(out_of_keys)?];
        for _ in 1..n_cols {
            row.push(sample_cell(pools, gs.cell_tokens.sample(&mut rng), &mut rng));
        }
        len += row.iter().map(|c| tokenize(c).len()).sum::<usize>();
        rows.push(row);
    }

    let row = rng.gen_range(0..rows.len());
    let col = match gs.value_column {
        Some(c) => c,
        None => rng.gen_range(1..n_cols),
    };
    let key = rows[row][0].clone();
    let table = Table::new(header, rows)?;
    let ex = match gs.task {
        SynthTask::Lookup => Example {
            question: format!("{} of {key}", table.header[col]),
            answer_coords: Some(BTreeSet::from([CellRef { row, col }])),
            label: None,
            table,
        },
        SynthTask::Entailment => {
            let truth = rng.gen_bool(0.5);
            let value = if truth {
                table.rows[row][col].clone()
            } else {
                loop {
                    let v = sample_cell(pools, gs.cell_tokens.sample(&mut rng), &mut rng);
                    if v != table.rows[row][col] {
                        break v;
                    }
                }
            };
            Example {
                question: format!("{} of {key} is {value}", table.header[col]),
                answer_coords: None,
                label: Some(truth),
                table,
            }
        }
    };
    Ok(ex)
}

/// Generates `gs.n_examples` examples. Example `i` depends only on
/// `(gs, i)`.
pub fn generate(gs: &GeneratorSpec) -> Result<Vec<Example>> {
    gs.validate()?;
    let pools = gs.pools();
    (0..gs.n_examples).map(|i| one_example(gs, &pools, i)).collect()
}

/// Length buckets `[0, e0), [e0, e1), ..., [e_last, inf)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketEdges(pub Vec<usize>);

impl BucketEdges {
    pub fn desk() -> Self {
        BucketEdges(vec![64, 128, 256])
    }

    pub fn long_inputs() -> Self {
        BucketEdges(vec![256, 512, 1024])
    }

    pub fn index(&self, len: usize) -> usize {
        self.0.iter().take_while(|&&e| len >= e).count()
    }

    pub fn label(&self, index: usize) -> String {
        match (index.checked_sub(1).map(|i| self.0[i]), self.0.get(index)) {
            (None, Some(hi)) => format!("<{hi}"),
            (Some(lo), Some(hi)) => format!("[{lo},{hi})"),
            (Some(lo), None) => format!(">={lo}"),
            (None, None) => "all".into(),
        }
    }
}

/// Example indices per non-empty bucket of linearized length.
pub fn bucketize(examples: &[Example], edges: &BucketEdges) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        out.entry(edges.index(linearized_len(ex))).or_default().push(i);
    }
    out
}
