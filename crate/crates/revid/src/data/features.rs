//! The feature file format: one record per line,
//! `<id>\t<camera or ->\t<v0>,<v1>,...` with float64 text values.
//! Lines starting with `#` and blank lines are skipped. Floats are written
//! in Rust's shortest round-trip form, so save followed by load reproduces
//! every bit.

use super::{DataError, FeatureRecord};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Parses records from any line source, enforcing a consistent vector width.
pub fn parse_feature_records(reader: impl BufRead) -> Result<Vec<FeatureRecord>, DataError> {
    let mut records = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (id, camera, values) = match (fields.next(), fields.next(), fields.next(), fields.next())
        {
            (Some(id), Some(camera), Some(values), None) => (id, camera, values),
            _ => {
                return Err(DataError::Parse {
                    line: line_no,
                    reason: "expected exactly 3 tab-separated fields: id, camera, values".into(),
                })
            }
        };
        if id.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                reason: "identity field is empty".into(),
            });
        }
        let camera = match camera {
            "-" => None,
            "" => {
                return Err(DataError::Parse {
                    line: line_no,
                    reason: "camera field is empty; use '-' for untagged records".into(),
                })
            }
            tag => Some(tag.to_owned()),
        };
        let vector = values
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| DataError::Parse {
                    line: line_no,
                    reason: format!("'{tok}' is not a float"),
                })
            })
            .collect::<Result<Vec<f64>, DataError>>()?;
        if vector.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                reason: "feature vector is empty".into(),
            });
        }
        match width {
            None => width = Some(vector.len()),
            Some(w) if w != vector.len() => {
                return Err(DataError::WidthMismatch {
                    line: line_no,
                    expected: w,
                    got: vector.len(),
                })
            }
            _ => {}
        }
        records.push(FeatureRecord::new(id, camera, vector));
    }
    Ok(records)
}

/// Writes records in the line format; the inverse of [`parse_feature_records`].
pub fn write_feature_records(
    mut writer: impl Write,
    records: &[FeatureRecord],
) -> Result<(), DataError> {
    for record in records {
        let camera = record.camera.as_deref().unwrap_or("-");
        let values: Vec<String> = record.vector.iter().map(|v| format!("{v}")).collect();
        writeln!(writer, "{}\t{}\t{}", record.id, camera, values.join(","))?;
    }
    Ok(())
}

/// Loads a feature file from disk.
pub fn load_feature_records(path: &Path) -> Result<Vec<FeatureRecord>, DataError> {
    parse_feature_records(BufReader::new(File::open(path)?))
}

/// Saves a feature file to disk.
pub fn save_feature_records(path: &Path, records: &[FeatureRecord]) -> Result<(), DataError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_feature_records(&mut writer, records)?;
    writer.flush()?;
    Ok(())
}
