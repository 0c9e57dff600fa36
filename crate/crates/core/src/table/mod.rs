//! Tables, question/table examples, and their linearization into token
//! sequences carrying segment, column, row and within-cell rank ids.

mod io;
mod select;

pub use io::{read_csv_examples, read_csv_table, read_jsonl, write_jsonl, ExampleRecord};
pub use select::{cc_select, cc_select_indices, hem_rank_columns, hem_select, hem_select_indices};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{DotError, Result};

/// Largest value any structural id can take (the id tables have 256 rows).
pub const MAX_STRUCT_ID: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        let table = Table { header, rows };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.is_empty() {
            return Err(DotError::Data("a table needs at least one column".into()));
        }
        if let Some((i, row)) = self.rows.iter().enumerate().find(|(_, r)| r.len() != self.header.len()) {
            return Err(DotError::Data(format!(
                "row {i} has {} cells, expected {}",
                row.len(),
                self.header.len()
            )));
        }
        Ok(())
    }

    pub fn n_cols(&self) -> usize {
        self.header.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// A 0-based data cell coordinate (the header is not a data row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellRef {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    CellSelection,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub question: String,
    pub table: Table,
    pub answer_coords: Option<BTreeSet<CellRef>>,
    pub label: Option<bool>,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        match (&self.answer_coords, self.label) {
            (Some(coords), None) => {
                if let Some(c) = coords
                    .iter()
                    .find(|c| c.row >= self.table.n_rows() || c.col >= self.table.n_cols())
                {
                    return Err(DotError::Data(format!("answer cell {c:?} lies outside the table")));
                }
                Ok(())
            }
            (None, Some(_)) => Ok(()),
            _ => Err(DotError::Data(
                "an example carries exactly one of answer coordinates or a label".into(),
            )),
        }
    }

    pub fn task_type(&self) -> TaskType {
        if self.label.is_some() {
            TaskType::Classification
        } else {
            TaskType::CellSelection
        }
    }

    pub fn is_answer(&self, cell: CellRef) -> bool {
        self.answer_coords.as_ref().is_some_and(|c| c.contains(&cell))
    }
}

/// Whitespace tokenizer with lowercasing and punctuation stripping.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw tokens; reserved entries always occupy ids 0 to 3.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = all.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len());
                all.push(t);
            }
        }
        Vocabulary { tokens: all, index }
    }

    /// Sorted vocabulary of every token in the corpus.
    pub fn build<'a, I: IntoIterator<Item = &'a Example>>(examples: I) -> Self {
        let mut set = BTreeSet::new();
        for ex in examples {
            set.extend(tokenize(&ex.question));
            for text in ex.table.header.iter().chain(ex.table.rows.iter().flatten()) {
                set.extend(tokenize(text));
            }
        }
        Self::from_tokens(set)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

/// Where a token of a linearized sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Cls,
    Sep,
    Question,
    Header { col: usize },
    Cell { row: usize, col: usize },
    Pad,
}

impl Origin {
    /// Key that orders cells in reading order: header row first.
    pub fn cell_key(self) -> Option<(usize, usize)> {
        match self {
            Origin::Header { col } => Some((0, col)),
            Origin::Cell { row, col } => Some((row + 1, col)),
            _ => None,
        }
    }

    pub fn col(self) -> Option<usize> {
        match self {
            Origin::Header { col } | Origin::Cell { col, .. } => Some(col),
            _ => None,
        }
    }

    pub fn is_table(self) -> bool {
        self.cell_key().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedSequence {
    pub token_ids: Vec<usize>,
    /// 0 for CLS, question and SEP; 1 for table tokens; 2 for padding.
    pub segment_ids: Vec<usize>,
    /// 1-based column, 0 outside the table.
    pub column_ids: Vec<usize>,
    /// 1-based data row, 0 for header and non-table tokens.
    pub row_ids: Vec<usize>,
    /// 1-based position within the cell, 0 outside the table.
    pub rank_ids: Vec<usize>,
    /// Position in the originally linearized sequence; kept through compaction.
    pub position_ids: Vec<usize>,
    pub origin: Vec<Origin>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Tokens that every selection must keep (CLS, question, SEP).
    pub fn is_mandatory(&self, i: usize) -> bool {
        matches!(self.origin[i], Origin::Cls | Origin::Sep | Origin::Question)
    }

    pub fn mandatory_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_mandatory(i)).count()
    }

    pub fn table_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.origin[i].is_table())
    }

    pub fn max_position(&self) -> usize {
        self.position_ids.iter().copied().max().unwrap_or(0)
    }

    /// Sub-sequence at the given (ascending) indices, all ids preserved.
    pub fn select(&self, indices: &[usize]) -> TokenizedSequence {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        let pick = |v: &Vec<usize>| indices.iter().map(|&i| v[i]).collect();
        TokenizedSequence {
            token_ids: pick(&self.token_ids),
            segment_ids: pick(&self.segment_ids),
            column_ids: pick(&self.column_ids),
            row_ids: pick(&self.row_ids),
            rank_ids: pick(&self.rank_ids),
            position_ids: pick(&self.position_ids),
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    /// Appends `n` padding tokens positioned after the last token.
    pub fn padded(&self, n: usize) -> TokenizedSequence {
        let mut out = self.clone();
        let next = if self.is_empty() { 0 } else { self.max_position() + 1 };
        for p in 0..n {
            out.token_ids.push(PAD);
            out.segment_ids.push(2);
            out.column_ids.push(0);
            out.row_ids.push(0);
            out.rank_ids.push(0);
            out.position_ids.push(next + p);
            out.origin.push(Origin::Pad);
        }
        out
    }

    fn push(&mut self, token: usize, segment: usize, origin: Origin, rank: usize) {
        let (col, row) = match origin {
            Origin::Header { col } => (col + 1, 0),
            Origin::Cell { row, col } => (col + 1, row + 1),
            _ => (0, 0),
        };
        self.position_ids.push(self.token_ids.len());
        self.token_ids.push(token);
        self.segment_ids.push(segment);
        self.column_ids.push(col.min(MAX_STRUCT_ID));
        self.row_ids.push(row.min(MAX_STRUCT_ID));
        self.rank_ids.push(rank.min(MAX_STRUCT_ID));
        self.origin.push(origin);
    }
}

/// Linearizes `[CLS] question [SEP] header cells...` without a length limit.
pub fn linearize_full(example: &Example, vocab: &Vocabulary) -> TokenizedSequence {
    let mut seq = TokenizedSequence::default();
    seq.push(CLS, 0, Origin::Cls, 0);
    for t in tokenize(&example.question) {
        seq.push(vocab.id(&t), 0, Origin::Question, 0);
    }
    seq.push(SEP, 0, Origin::Sep, 0);
    for (col, text) in example.table.header.iter().enumerate() {
        for (r, t) in tokenize(text).iter().enumerate() {
            seq.push(vocab.id(t), 1, Origin::Header { col }, r + 1);
        }
    }
    for (row, cells) in example.table.rows.iter().enumerate() {
        for (col, text) in cells.iter().enumerate() {
            for (r, t) in tokenize(text).iter().enumerate() {
                seq.push(vocab.id(t), 1, Origin::Cell { row, col }, r + 1);
            }
        }
    }
    seq
}

/// Linearizes an example, refusing (never truncating) inputs over `max_len`.
pub fn linearize(example: &Example, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedSequence> {
    let question_len = tokenize(&example.question).len() + 2;
    if question_len > max_len {
        return Err(DotError::InputTooLong {
            len: question_len,
            max: max_len,
        });
    }
    let seq = linearize_full(example, vocab);
    if seq.len() > max_len {
        return Err(DotError::InputTooLong {
            len: seq.len(),
            max: max_len,
        });
    }
    Ok(seq)
}
