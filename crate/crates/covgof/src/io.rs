//! Long-format CSV: one row per measurement with subject, outcome, time and
//! value columns.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use covgof_core::{LongDataset, Record};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column names, overridable from the command line or a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub subject: String,
    pub outcome: String,
    pub time: String,
    pub value: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            outcome: "outcome".into(),
            time: "time".into(),
            value: "value".into(),
        }
    }
}

/// Tokens read as a missing measurement. Rows carrying one in the time or
/// value column are dropped and counted.
pub const MISSING: [&str; 5] = ["", "NA", "NaN", "nan", "."];

fn is_missing(field: &str) -> bool {
    MISSING.contains(&field.trim())
}

struct Columns {
    subject: usize,
    outcome: usize,
    time: usize,
    value: usize,
}

fn locate(headers: &csv::StringRecord, schema: &Schema) -> Result<Columns> {
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Csv {
            line: 1,
            message: format!("missing column '{name}' (header: {})", headers.iter().collect::<Vec<_>>().join(",")),
        })
    };
    Ok(Columns {
        subject: find(&schema.subject)?,
        outcome: find(&schema.outcome)?,
        time: find(&schema.time)?,
        value: find(&schema.value)?,
    })
}

fn parse_number(field: &str, column: &str, line: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Csv {
        line,
        message: format!("{column} '{field}' is not a number"),
    })
}

/// Maps raw outcome labels to `1..=K`. Integer labels must be exactly
/// `1..=K`; any other labels are numbered by first appearance.
fn outcome_ids(raw: &[(String, u64)]) -> Result<(Vec<usize>, Vec<String>)> {
    let numeric: Option<Vec<usize>> = raw.iter().map(|(s, _)| s.parse::<usize>().ok()).collect();
    if let Some(ids) = numeric {
        let k = ids.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; k + 1];
        for (&id, (_, line)) in ids.iter().zip(raw) {
            if id == 0 {
                return Err(Error::Csv {
                    line: *line,
                    message: "outcome ids start at 1".into(),
                });
            }
            seen[id] = true;
        }
        if let Some(gap) = (1..=k).find(|&i| !seen[i]) {
            return Err(Error::Config(format!("outcome ids must cover 1..={k}; {gap} has no rows")));
        }
        return Ok((ids, (1..=k).map(|i| i.to_string()).collect()));
    }
    let mut labels: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let ids = raw
        .iter()
        .map(|(s, _)| {
            *index.entry(s.as_str()).or_insert_with(|| {
                labels.push(s.clone());
                labels.len()
            })
        })
        .collect();
    Ok((ids, labels))
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<LongDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols = locate(&headers, schema)?;
    let mut kept: Vec<(String, f64, f64)> = Vec::new();
    let mut raw_outcomes: Vec<(String, u64)> = Vec::new();
    let mut dropped = 0;
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("");
        let (time, value) = (field(cols.time), field(cols.value));
        if is_missing(time) || is_missing(value) {
            dropped += 1;
            continue;
        }
        let subject = field(cols.subject);
        if subject.is_empty() {
            return Err(Error::Csv {
                line,
                message: "empty subject id".into(),
            });
        }
        let outcome = field(cols.outcome);
        if outcome.is_empty() {
            return Err(Error::Csv {
                line,
                message: "empty outcome".into(),
            });
        }
        let time = parse_number(time, &schema.time, line)?;
        let value = parse_number(value, &schema.value, line)?;
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::Csv {
                line,
                message: "time and value must be finite".into(),
            });
        }
        kept.push((subject.to_string(), time, value));
        raw_outcomes.push((outcome.to_string(), line));
    }
    if kept.is_empty() {
        return Err(Error::Config(format!("no usable rows ({dropped} dropped as missing)")));
    }
    let (ids, labels) = outcome_ids(&raw_outcomes)?;
    let records = kept
        .into_iter()
        .zip(ids)
        .map(|((subject, time, value), outcome)| Record {
            subject,
            outcome,
            time,
            value,
        })
        .collect();
    Ok(LongDataset::with_dropped(records, labels, dropped)?)
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<LongDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Writes rows ordered by subject, outcome and time; reloading gives back
/// an equal dataset.
pub fn write_csv<W: Write>(data: &LongDataset, writer: W, schema: &Schema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Internal(format!("csv write: {e}"));
    w.write_record([&schema.subject, &schema.outcome, &schema.time, &schema.value])
        .map_err(csv_err)?;
    for o in data.observations() {
        w.write_record([
            data.subject_labels()[o.subject].as_str(),
            data.outcome_labels()[o.outcome - 1].as_str(),
            &o.time.to_string(),
            &o.value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Internal(format!("csv flush: {e}")))?;
    Ok(())
}

pub fn save_csv(data: &LongDataset, path: &Path, schema: &Schema) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(data, std::io::BufWriter::new(file), schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<LongDataset> {
        read_csv(text.as_bytes(), &Schema::default())
    }

    #[test]
    fn four_rows_two_subjects() {
        let d = read("subject,outcome,time,value\na,1,0,1.5\na,1,1,2\nb,1,0,0.5\nb,1,2,1\n").unwrap();
        assert_eq!((d.n_subjects(), d.n_outcomes(), d.n_rows()), (2, 1, 4));
    }

    #[test]
    fn single_visit_subject_loads() {
        let d = read("subject,outcome,time,value\na,1,0,1\na,1,1,2\nb,1,0,3\n").unwrap();
        assert_eq!(d.single_visit_subjects(1), vec![1]);
    }

    #[test]
    fn missing_values_are_dropped_and_counted() {
        let mut text = String::from("subject,outcome,time,value\n");
        for i in 0..100 {
            let v = if i % 33 == 5 { "NA".to_string() } else { format!("{}", i as f64 * 0.1) };
            text.push_str(&format!("s{},1,{},{v}\n", i / 4, i % 4));
        }
        let d = read(&text).unwrap();
        assert_eq!((d.n_rows(), d.dropped_rows()), (97, 3));
    }

    #[test]
    fn malformed_number_reports_its_line() {
        let err = read("subject,outcome,time,value\na,1,0,1\na,1,x,2\n").unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_column_and_bad_outcomes() {
        assert!(matches!(read("id,outcome,time,value\na,1,0,1\n"), Err(Error::Csv { line: 1, .. })));
        assert!(read("subject,outcome,time,value\na,1,0,1\na,3,1,2\n").is_err());
        assert!(read("subject,outcome,time,value\na,0,0,1\n").is_err());
        assert!(read("subject,outcome,time,value\na,1,0,NA\n").is_err());
    }

    #[test]
    fn named_outcomes_and_custom_columns() {
        let schema = Schema {
            subject: "RID".into(),
            outcome: "test".into(),
            time: "years".into(),
            value: "score".into(),
        };
        let text = "RID,years,test,score\n7,0,MMSE,28\n7,1,FAQ,2\n7,1,MMSE,27\n";
        let d = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(d.outcome_labels(), ["MMSE", "FAQ"]);
        assert_eq!(d.split_by_outcome(1).unwrap().n_rows(), 2);
    }
}
