use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, Sample};
use crate::error::{DrlError, Result};

/// How to interpret the columns of a numeric CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Treat the last column as an integer class label.
    pub has_label: bool,
    pub domain: Domain,
    /// Defaults to `max label + 1` for labeled files and 0 (unknown) otherwise.
    #[serde(default)]
    pub class_count: Option<usize>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&text, &name, schema)
}

fn parse_err(row: usize, column: usize, message: impl Into<String>) -> DrlError {
    DrlError::Parse {
        row,
        column,
        message: message.into(),
    }
}

fn csv_err(e: csv::Error) -> DrlError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DrlError::Io(io),
        other => DrlError::Parse {
            row: 0,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Parses CSV text. Rows and columns in errors are 1-based line and field numbers.
pub fn parse_csv(text: &str, name: &str, schema: CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let row_no = record.position().map_or(rows.len() + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if rows.is_empty() && width.is_none() && record[0].parse::<f64>().is_err() {
            // header line
            width = Some(record.len());
            continue;
        }
        let mut values = Vec::with_capacity(record.len());
        for (col_idx, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(row_no, col_idx + 1, format!("non-numeric cell {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(row_no, col_idx + 1, "non-finite value"));
            }
            values.push(v);
        }
        match width {
            Some(w) if w != values.len() => {
                return Err(parse_err(
                    row_no,
                    values.len().min(w) + 1,
                    format!("expected {w} columns, found {}", values.len()),
                ))
            }
            None => width = Some(values.len()),
            _ => {}
        }
        rows.push((row_no, values));
    }

    let width = width.unwrap_or(0);
    let dim = if schema.has_label {
        if width < 2 {
            return Err(parse_err(1, 1, "labeled rows need at least one feature and a label"));
        }
        width - 1
    } else {
        width
    };

    let mut samples = Vec::with_capacity(rows.len());
    let mut max_label = None::<usize>;
    for (row_no, mut values) in rows {
        let label = if schema.has_label {
            let raw = values.pop().expect("width checked");
            if raw < 0.0 || raw.fract() != 0.0 {
                return Err(parse_err(
                    row_no,
                    width,
                    format!("label {raw} is not a non-negative integer"),
                ));
            }
            let y = raw as usize;
            max_label = Some(max_label.map_or(y, |m| m.max(y)));
            Some(y)
        } else {
            None
        };
        samples.push(Sample::new(values, label, schema.domain));
    }
    let class_count = schema
        .class_count
        .unwrap_or_else(|| max_label.map_or(0, |m| m + 1));
    Dataset::new(name, class_count, dim, samples)
}

/// Writes a dataset with a header; the label column is emitted only for labeled datasets.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let labeled = dataset.is_labeled() && !dataset.is_empty();
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    if labeled {
        header.push("label".into());
    }
    writer.write_record(&header).map_err(csv_err)?;
    for s in dataset.samples() {
        let mut cells: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
        if let (true, Some(y)) = (labeled, s.label) {
            cells.push(y.to_string());
        }
        writer.write_record(&cells).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE_ROWS: &str = "0.5,1.0,0\n-1.0,2.0,1\n3.0,-0.25,1\n";

    fn schema(has_label: bool) -> CsvSchema {
        CsvSchema {
            has_label,
            domain: Domain::Source,
            class_count: None,
        }
    }

    #[test]
    fn labeled_rows() {
        let d = parse_csv(THREE_ROWS, "t", schema(true)).unwrap();
        assert_eq!((d.len(), d.dim(), d.class_count()), (3, 2, 2));
        assert!(d.is_labeled());
        assert_eq!(d.samples()[2].features, vec![3.0, -0.25]);
    }

    #[test]
    fn unlabeled_reinterpretation() {
        let d = parse_csv(THREE_ROWS, "t", schema(false)).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 3));
        assert!(!d.is_labeled());
    }

    #[test]
    fn header_is_skipped() {
        let text = format!("a,b,label\n{THREE_ROWS}");
        let d = parse_csv(&text, "t", schema(true)).unwrap();
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let err = parse_csv("1.0,abc,0\n", "t", schema(true)).unwrap_err();
        match err {
            DrlError::Parse { row, column, .. } => assert_eq!((row, column), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = parse_csv("1,2,0\n1,2\n", "t", schema(true)).unwrap_err();
        assert!(matches!(err, DrlError::Parse { row: 2, .. }));
    }

    #[test]
    fn write_then_load() {
        let d = parse_csv(THREE_ROWS, "t", schema(true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&d, &path).unwrap();
        let back = load_csv(&path, schema(true)).unwrap();
        assert_eq!(back.samples(), d.samples());
    }
}
