use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellRef, Example, Table};
use crate::error::{DotError, Result};

/// One line of the example interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub question: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl TryFrom<ExampleRecord> for Example {
    type Error = DotError;

    fn try_from(r: ExampleRecord) -> Result<Example> {
        let label = match r.label {
            None => None,
            Some(0) => Some(false),
            Some(1) => Some(true),
            Some(other) => return Err(DotError::Data(format!("label must be 0 or 1, got {other}"))),
        };
        let ex = Example {
            question: r.question,
            table: Table {
                header: r.header,
                rows: r.rows,
            },
            answer_coords: r
                .answers
                .map(|a| a.into_iter().map(|[row, col]| CellRef { row, col }).collect::<BTreeSet<_>>()),
            label,
        };
        ex.validate()?;
        Ok(ex)
    }
}

impl From<&Example> for ExampleRecord {
    fn from(ex: &Example) -> Self {
        ExampleRecord {
            question: ex.question.clone(),
            header: ex.table.header.clone(),
            rows: ex.table.rows.clone(),
            answers: ex
                .answer_coords
                .as_ref()
                .map(|s| s.iter().map(|c| [c.row, c.col]).collect()),
            label: ex.label.map(u8::from),
        }
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| DotError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(Example::try_from(record).map_err(|e| DotError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table from CSV; the first record is the header.
pub fn read_csv_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Table::new(header, rows)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionRecord {
    question: String,
    #[serde(default)]
    answers: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    label: Option<u8>,
}

/// Reads one CSV table plus a sidecar JSONL file of questions about it.
pub fn read_csv_examples(table_path: &Path, questions_path: &Path) -> Result<Vec<Example>> {
    let table = read_csv_table(table_path)?;
    let reader = BufReader::new(File::open(questions_path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QuestionRecord = serde_json::from_str(&line)?;
        out.push(Example::try_from(ExampleRecord {
            question: q.question,
            header: table.header.clone(),
            rows: table.rows.clone(),
            answers: q.answers,
            label: q.label,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"question":"who","header":["a","b"],"rows":[["1","2"]],"answers":[[0,1]]}"#,
                "\n",
                r#"{"question":"is it","header":["a"],"rows":[["1"]],"label":1}"#,
                "\n"
            ),
        )
        .unwrap();
        let exs = read_jsonl(&path).unwrap();
        assert_eq!(exs.len(), 2);
        assert!(exs[0].is_answer(CellRef { row: 0, col: 1 }));
        assert_eq!(exs[1].label, Some(true));

        let out = dir.path().join("o.jsonl");
        write_jsonl(&out, &exs).unwrap();
        assert_eq!(read_jsonl(&out).unwrap(), exs);

        std::fs::write(&path, r#"{"question":"q","header":["a"],"rows":[],"label":0,"extra":1}"#).unwrap();
        assert!(read_jsonl(&path).is_err());
        std::fs::write(&path, r#"{"question":"q","header":["a"],"rows":[["1"]],"answers":[[3,0]]}"#).unwrap();
        assert!(read_jsonl(&path).is_err());
    }

    #[test]
    fn csv_with_sidecar_questions() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("t.csv");
        std::fs::write(&csv, "name,age\nann,31\nbob,45\n").unwrap();
        let qs = dir.path().join("q.jsonl");
        std::fs::write(&qs, "{\"question\":\"age of bob\",\"answers\":[[1,1]]}\n").unwrap();
        let exs = read_csv_examples(&csv, &qs).unwrap();
        assert_eq!(exs[0].table.rows[1], vec!["bob", "45"]);
        assert!(exs[0].is_answer(CellRef { row: 1, col: 1 }));
    }
}
