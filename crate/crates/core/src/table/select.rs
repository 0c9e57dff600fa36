//! Heuristic pre-selection baselines: cell concatenation (CC) and heuristic
//! exact match (HEM).

use std::collections::{BTreeMap, BTreeSet};

use super::{tokenize, Table, TokenizedSequence};
use crate::error::{DotError, Result};

fn check_limit(seq: &TokenizedSequence, limit: usize) -> Result<usize> {
    let mandatory = seq.mandatory_count();
    if limit < mandatory {
        return Err(DotError::InputTooLong {
            len: mandatory,
            max: limit,
        });
    }
    Ok(limit - mandatory)
}

/// Round-robin over cells in reading order: the first token of every cell,
/// then the second, ... until `budget` table tokens are picked. Only tokens
/// for which `eligible` holds take part.
fn round_robin(seq: &TokenizedSequence, budget: usize, eligible: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in seq.table_indices().filter(|&i| eligible(i)) {
        let key = seq.origin[i].cell_key().expect("table token");
        cells.entry(key).or_default().push(i);
    }
    let mut picked = Vec::with_capacity(budget);
    let mut depth = 0;
    while picked.len() < budget {
        let mut any = false;
        for tokens in cells.values() {
            if let Some(&i) = tokens.get(depth) {
                any = true;
                picked.push(i);
                if picked.len() == budget {
                    break;
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    picked
}

fn with_mandatory(seq: &TokenizedSequence, mut picked: Vec<usize>) -> Vec<usize> {
    picked.extend((0..seq.len()).filter(|&i| seq.is_mandatory(i)));
    picked.sort_unstable();
    picked
}

/// Indices kept by cell concatenation under a total `limit`.
pub fn cc_select_indices(seq: &TokenizedSequence, limit: usize) -> Result<Vec<usize>> {
    let budget = check_limit(seq, limit)?;
    if seq.len() <= limit {
        return Ok((0..seq.len()).collect());
    }
    Ok(with_mandatory(seq, round_robin(seq, budget, |_| true)))
}

/// Cell concatenation: fits an equal number of tokens from every cell.
pub fn cc_select(seq: &TokenizedSequence, limit: usize) -> Result<TokenizedSequence> {
    Ok(seq.select(&cc_select_indices(seq, limit)?))
}

/// Columns ranked by how many distinct question tokens occur in their header
/// or cells; ties go to the lower column index.
pub fn hem_rank_columns(question: &str, table: &Table) -> Vec<(usize, usize)> {
    let q: BTreeSet<String> = tokenize(question).into_iter().collect();
    let mut ranked: Vec<(usize, usize)> = (0..table.n_cols())
        .map(|c| {
            let mut col_tokens: BTreeSet<String> = tokenize(&table.header[c]).into_iter().collect();
            for row in &table.rows {
                col_tokens.extend(tokenize(&row[c]));
            }
            (c, q.intersection(&col_tokens).count())
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Indices kept by heuristic exact match under a total `limit`.
pub fn hem_select_indices(seq: &TokenizedSequence, question: &str, table: &Table, limit: usize) -> Result<Vec<usize>> {
    let mut remaining = check_limit(seq, limit)?;
    if seq.len() <= limit {
        return Ok((0..seq.len()).collect());
    }
    let mut picked = Vec::new();
    for (col, _) in hem_rank_columns(question, table) {
        let members: Vec<usize> = seq.table_indices().filter(|&i| seq.origin[i].col() == Some(col)).collect();
        if members.len() <= remaining {
            remaining -= members.len();
            picked.extend(members);
        } else {
            picked.extend(round_robin(seq, remaining, |i| seq.origin[i].col() == Some(col)));
            break;
        }
    }
    Ok(with_mandatory(seq, picked))
}

/// Heuristic exact match: whole columns by question overlap, the last one cut
/// with the cell-concatenation rule.
pub fn hem_select(seq: &TokenizedSequence, question: &str, table: &Table, limit: usize) -> Result<TokenizedSequence> {
    Ok(seq.select(&hem_select_indices(seq, question, table, limit)?))
}
