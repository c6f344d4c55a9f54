//! Score CSV files: a header row with at least `id` and `score`, optionally
//! `label` (0/1, may be blank), `condition` and probability columns.

use std::io::Write;
use std::path::Path;

use fsad_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub condition: Option<String>,
    pub label: Option<bool>,
    pub score: f64,
    pub probability: Option<f64>,
}

fn parse_label(text: &str, at: &str) -> Result<Option<bool>> {
    match text.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(Error::InvalidArgument(format!("{at}: label `{other}` is not 0 or 1"))),
    }
}

fn parse_f64(text: &str, at: &str) -> Result<f64> {
    text.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{at}: cannot parse `{text}` as a number")))
}

pub fn read_scores(path: &Path, probability_column: Option<&str>) -> Result<Vec<ScoreRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let id_col = column("id").ok_or_else(|| Error::InvalidArgument(format!("{}: no `id` column", path.display())))?;
    let score_col =
        column("score").ok_or_else(|| Error::InvalidArgument(format!("{}: no `score` column", path.display())))?;
    let label_col = column("label");
    let condition_col = column("condition");
    let prob_col = match probability_column {
        Some(name) => Some(column(name).ok_or_else(|| {
            Error::InvalidArgument(format!("{}: no `{name}` column", path.display()))
        })?),
        None => None,
    };
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let at = format!("{} row {}", path.display(), line + 1);
        let field = |i: usize| record.get(i).unwrap_or("");
        rows.push(ScoreRow {
            id: field(id_col).to_string(),
            condition: condition_col.map(|i| field(i).to_string()).filter(|c| !c.is_empty()),
            label: match label_col {
                Some(i) => parse_label(field(i), &at)?,
                None => None,
            },
            score: parse_f64(field(score_col), &at)?,
            probability: prob_col.map(|i| parse_f64(field(i), &at)).transpose()?,
        });
    }
    Ok(rows)
}

/// Labels of every row, failing on the first unlabeled one.
pub fn require_labels(rows: &[ScoreRow]) -> Result<Vec<bool>> {
    rows.iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::InvalidArgument(format!("row `{}` has no label", r.id)))
        })
        .collect()
}

pub fn label_text(label: Option<bool>) -> String {
    match label {
        Some(true) => "1".into(),
        Some(false) => "0".into(),
        None => String::new(),
    }
}

/// Opens `path`, or stdout when `None`, for CSV output.
pub fn csv_writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => Box::new(std::io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(sink))
}

pub fn flush(mut writer: csv::Writer<Box<dyn Write>>) -> Result<()> {
    writer.flush().map_err(|e| Error::Io {
        path: "<output>".into(),
        source: e,
    })
}
