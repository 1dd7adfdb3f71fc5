use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::{ObservationalDataset, SyntheticGroundTruth};
use crate::error::{CmgpError, Result};

/// A parsed dataset file. `truth` is present iff the file carried `f0`/`f1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub dataset: ObservationalDataset,
    pub truth: Option<SyntheticGroundTruth>,
}

const RESERVED: [&str; 5] = ["id", "w", "y", "f0", "f1"];

/// Reads `id,x1..xd,w,y[,f0,f1]`. Lines starting with `#` are skipped; any
/// column other than the reserved ones is a feature, in header order.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, "", e))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, 0, "", e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |column: &str| CmgpError::MissingColumn {
        path: path.to_path_buf(),
        column: column.to_owned(),
    };

    let w_col = find("w").ok_or_else(|| missing("w"))?;
    let y_col = find("y").ok_or_else(|| missing("y"))?;
    let truth_cols = match (find("f0"), find("f1")) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        (Some(_), None) => return Err(missing("f1")),
        (None, Some(_)) => return Err(missing("f0")),
    };
    let feature_cols: Vec<usize> =
        (0..headers.len()).filter(|&c| !RESERVED.contains(&headers[c].as_str())).collect();
    if feature_cols.is_empty() {
        return Err(missing("x1"));
    }

    let d = feature_cols.len();
    let mut features = Vec::new();
    let mut treatments = Vec::new();
    let mut outcomes = Vec::new();
    let mut f0 = Vec::new();
    let mut f1 = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| csv_error(path, row, "", e))?;
        let cell = |col: usize| -> Result<f64> {
            let text = record.get(col).unwrap_or("");
            let value: f64 = text.parse().map_err(|_| CmgpError::Csv {
                path: path.to_path_buf(),
                row,
                column: headers[col].clone(),
                message: format!("`{text}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(CmgpError::Csv {
                    path: path.to_path_buf(),
                    row,
                    column: headers[col].clone(),
                    message: "value is not finite".into(),
                });
            }
            Ok(value)
        };
        for &c in &feature_cols {
            features.push(cell(c)?);
        }
        let w = cell(w_col)?;
        if w != 0.0 && w != 1.0 {
            return Err(CmgpError::Csv {
                path: path.to_path_buf(),
                row,
                column: "w".into(),
                message: format!("treatment must be 0 or 1, got {w}"),
            });
        }
        treatments.push(w as u8);
        outcomes.push(cell(y_col)?);
        if let Some((a, b)) = truth_cols {
            f0.push(cell(a)?);
            f1.push(cell(b)?);
        }
    }

    let n = treatments.len();
    if n == 0 {
        return Err(CmgpError::EmptyFile { path: path.to_path_buf() });
    }

    let names: Vec<String> = feature_cols.iter().map(|&c| headers[c].clone()).collect();
    let default_names = names.iter().enumerate().all(|(k, s)| *s == format!("x{}", k + 1));
    let dataset = ObservationalDataset::with_names(
        DMatrix::from_row_slice(n, d, &features),
        treatments,
        outcomes,
        if default_names { None } else { Some(names) },
    )?;
    let truth = match truth_cols {
        Some(_) => Some(SyntheticGroundTruth::from_surfaces(f0, f1)?),
        None => None,
    };
    Ok(LoadedDataset { dataset, truth })
}

fn csv_error(path: &Path, row: usize, column: &str, err: csv::Error) -> CmgpError {
    CmgpError::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_owned(),
        message: err.to_string(),
    }
}

/// Writes the dataset (and truth columns, when given) to `path`.
pub fn save_csv(
    dataset: &ObservationalDataset,
    truth: Option<&SyntheticGroundTruth>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut file = File::create(path)?;
    write_csv(&mut file, dataset, truth, None)?;
    file.flush()?;
    Ok(())
}

/// Serializes to any writer. `comment`, if given, becomes a leading `# ...`
/// line that `load_csv` skips.
///
/// Floats are written in Rust's shortest round-trip form, so parsing the text
/// back yields the identical `f64`.
pub fn write_csv<W: Write>(
    out: &mut W,
    dataset: &ObservationalDataset,
    truth: Option<&SyntheticGroundTruth>,
    comment: Option<&str>,
) -> Result<()> {
    if let Some(truth) = truth {
        if truth.len() != dataset.n() {
            return Err(CmgpError::InvalidInput(format!(
                "truth has {} rows, dataset has {}",
                truth.len(),
                dataset.n()
            )));
        }
    }
    if let Some(text) = comment {
        for line in text.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    let mut header = vec!["id".to_owned()];
    header.extend((0..dataset.d()).map(|k| dataset.feature_name(k)));
    header.push("w".into());
    header.push("y".into());
    if truth.is_some() {
        header.push("f0".into());
        header.push("f1".into());
    }
    writeln!(out, "{}", header.join(","))?;

    let mut line = String::new();
    for i in 0..dataset.n() {
        line.clear();
        line.push_str(&i.to_string());
        for k in 0..dataset.d() {
            line.push(',');
            line.push_str(&dataset.features()[(i, k)].to_string());
        }
        line.push(',');
        line.push_str(&dataset.treatments()[i].to_string());
        line.push(',');
        line.push_str(&dataset.outcomes()[i].to_string());
        if let Some(t) = truth {
            line.push(',');
            line.push_str(&t.f0[i].to_string());
            line.push(',');
            line.push_str(&t.f1[i].to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
