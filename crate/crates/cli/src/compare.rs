use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CliError;
use crate::output::{read, ModelReport};

#[derive(Debug, Deserialize)]
struct ReportFile {
    name: String,
    models: Vec<ModelReport>,
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn load(path: &Path) -> Result<ReportFile, CliError> {
    let text = read(path)?;
    let report: ReportFile = serde_json::from_str(&text).map_err(|e| CliError::Report {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if report.models.is_empty() {
        return Err(CliError::Report {
            path: path.to_path_buf(),
            message: "no evaluated models".into(),
        });
    }
    Ok(report)
}

/// One CSV row per evaluated model. Reports with several models get `name/model` rows.
/// Rows whose class count differs from the first row's carry a warning.
pub fn compare(paths: &[PathBuf]) -> Result<String, CliError> {
    if paths.len() < 2 {
        return Err(CliError::Usage(format!(
            "compare needs at least two reports, got {}",
            paths.len()
        )));
    }
    let mut out = String::from("name,accuracy,brier,ece,miscls_entropy,warning\n");
    let mut first_classes = None;
    for p in paths {
        let report = load(&report_path(p))?;
        let single = report.models.len() == 1;
        for m in &report.models {
            let name = if single {
                report.name.clone()
            } else {
                format!("{}/{}", report.name, m.name)
            };
            let expected = *first_classes.get_or_insert(m.class_count);
            let warning = if m.class_count == expected {
                String::new()
            } else {
                format!("class count {} differs from {expected}", m.class_count)
            };
            let r = &m.report;
            out.push_str(&format!(
                "{},{},{},{},{},{warning}\n",
                csv_field(&name),
                r.accuracy,
                r.brier,
                r.ece,
                r.miscls_entropy
            ));
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
