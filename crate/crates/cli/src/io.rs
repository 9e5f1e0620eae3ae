//! CSV ingestion and export.
//!
//! Cohort files are header-driven: `time`, `event` and `w` are required,
//! `entry_time` defaults to 0, `stratum` to a single stratum, and every column
//! named `z1`, `z2`, ... becomes an error-free covariate in index order. Other
//! columns are ignored. Reliability files hold one person per row and one
//! replicate per column, except `z` columns which again carry covariates;
//! blank cells mark missing replicates.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use thiserror::Error;
use threshcox::{build_cohort, Cohort, ReliabilityStudy};

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: missing required column '{column}'")]
    MissingColumn { path: String, column: &'static str },
    #[error("{path}, line {line}: {reason}")]
    Row { path: String, line: u64, reason: String },
    #[error("{path}: {reason}")]
    Content { path: String, reason: String },
}

fn open(path: &Path) -> Result<csv::Reader<File>, InputError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|source| InputError::Csv {
            path: path.display().to_string(),
            source,
        })
}

struct Columns {
    entry: Option<usize>,
    time: usize,
    event: usize,
    w: usize,
    z: Vec<usize>,
    stratum: Option<usize>,
}

impl Columns {
    fn from_header(header: &csv::StringRecord, path: &str) -> Result<Self, InputError> {
        let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
        let need = |name: &'static str| {
            find(name).ok_or(InputError::MissingColumn {
                path: path.into(),
                column: name,
            })
        };
        let mut z: Vec<(usize, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                let h = h.to_ascii_lowercase();
                h.strip_prefix('z')
                    .and_then(|k| k.parse::<usize>().ok())
                    .map(|k| (k, i))
            })
            .collect();
        z.sort_unstable();
        if let Some(gap) = z.iter().enumerate().find(|(j, (k, _))| *k != j + 1) {
            return Err(InputError::Content {
                path: path.into(),
                reason: format!("covariate columns must be z1..zp without gaps, found z{}", gap.1 .0),
            });
        }
        Ok(Self {
            entry: find("entry_time"),
            time: need("time")?,
            event: need("event")?,
            w: need("w")?,
            z: z.into_iter().map(|(_, i)| i).collect(),
            stratum: find("stratum"),
        })
    }
}

fn field(rec: &csv::StringRecord, i: usize) -> &str {
    rec.get(i).unwrap_or("")
}

fn number(rec: &csv::StringRecord, i: usize, name: &str) -> Result<f64, String> {
    let s = field(rec, i);
    let v: f64 = s.parse().map_err(|_| format!("{name} '{s}' is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{name} is not finite"))
    }
}

fn flag(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(format!("event '{s}' must be 0/1 or true/false")),
    }
}

/// Reads a cohort CSV; errors name the offending line.
pub fn read_cohort(path: &Path) -> Result<Cohort, InputError> {
    let shown = path.display().to_string();
    let mut rdr = open(path)?;
    let header = rdr
        .headers()
        .map_err(|source| InputError::Csv {
            path: shown.clone(),
            source,
        })?
        .clone();
    let cols = Columns::from_header(&header, &shown)?;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| InputError::Csv {
            path: shown.clone(),
            source,
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row_err = |reason: String| InputError::Row {
            path: shown.clone(),
            line,
            reason,
        };
        let entry_time = match cols.entry {
            Some(i) if !field(&rec, i).is_empty() => number(&rec, i, "entry_time").map_err(row_err)?,
            _ => 0.0,
        };
        let stratum = match cols.stratum {
            Some(i) if !field(&rec, i).is_empty() => {
                let s = field(&rec, i);
                Some(
                    s.parse::<i64>()
                        .map_err(|_| row_err(format!("stratum '{s}' is not an integer")))?,
                )
            }
            _ => None,
        };
        records.push(threshcox::SubjectRecord {
            entry_time,
            followup_time: number(&rec, cols.time, "time").map_err(row_err)?,
            event: flag(field(&rec, cols.event)).map_err(row_err)?,
            surrogate: number(&rec, cols.w, "w").map_err(row_err)?,
            covariates: cols
                .z
                .iter()
                .enumerate()
                .map(|(k, &i)| number(&rec, i, &format!("z{}", k + 1)))
                .collect::<Result<_, _>>()
                .map_err(row_err)?,
            stratum,
        });
        lines.push(line);
    }
    build_cohort(records).map_err(|e| match e {
        threshcox::Error::MalformedRecord { row, reason } => InputError::Row {
            path: shown.clone(),
            line: lines.get(row).copied().unwrap_or(0),
            reason,
        },
        other => InputError::Content {
            path: shown.clone(),
            reason: other.to_string(),
        },
    })
}

/// Reads a replicate study: one person per row, blank cells skipped. Columns
/// `z1..zp`, when present, are the person's error-free covariates.
pub fn read_reliability(path: &Path) -> Result<ReliabilityStudy, InputError> {
    let shown = path.display().to_string();
    let mut rdr = open(path)?;
    let header = rdr
        .headers()
        .map_err(|source| InputError::Csv {
            path: shown.clone(),
            source,
        })?
        .clone();
    let is_z = |h: &str| {
        let h = h.to_ascii_lowercase();
        h.strip_prefix('z').is_some_and(|k| k.parse::<usize>().is_ok())
    };
    let mut z_cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| is_z(h))
        .map(|(i, h)| (h[1..].parse().expect("checked"), i))
        .collect();
    z_cols.sort_unstable();
    let reading_cols: Vec<usize> = (0..header.len()).filter(|&i| !is_z(&header[i])).collect();
    let mut rows = Vec::new();
    let mut covariates = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| InputError::Csv {
            path: shown.clone(),
            source,
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row_err = |reason: String| InputError::Row {
            path: shown.clone(),
            line,
            reason,
        };
        let row: Vec<f64> = reading_cols
            .iter()
            .map(|&i| field(&rec, i))
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(s))
            .collect::<Result<_, _>>()
            .map_err(|s| row_err(format!("reading '{s}' is not a finite number")))?;
        if row.is_empty() {
            return Err(row_err("person has no readings".into()));
        }
        let z: Vec<f64> = z_cols
            .iter()
            .map(|&(k, i)| number(&rec, i, &format!("z{k}")))
            .collect::<Result<_, _>>()
            .map_err(row_err)?;
        rows.push(row);
        covariates.push(z);
    }
    if rows.is_empty() {
        return Err(InputError::Content {
            path: shown,
            reason: "no persons".into(),
        });
    }
    let mut study = ReliabilityStudy::new(rows);
    if !z_cols.is_empty() {
        study.covariates = Some(covariates);
    }
    Ok(study)
}

/// Writes a cohort in the format [`read_cohort`] accepts.
pub fn write_cohort(cohort: &Cohort, path: &Path) -> Result<(), InputError> {
    let shown = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|source| InputError::Csv {
        path: shown.clone(),
        source,
    })?;
    let p = cohort.covariate_dim();
    let mut header = vec!["entry_time".to_string(), "time".into(), "event".into(), "w".into()];
    header.extend((1..=p).map(|k| format!("z{k}")));
    header.push("stratum".into());
    w.write_record(&header).map_err(|source| InputError::Csv {
        path: shown.clone(),
        source,
    })?;
    for s in cohort.subjects() {
        let mut row = vec![
            s.entry_time.to_string(),
            s.followup_time.to_string(),
            u8::from(s.event).to_string(),
            s.surrogate.to_string(),
        ];
        row.extend(s.covariates.iter().map(f64::to_string));
        row.push(s.stratum.map(|k| k.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(|source| InputError::Csv {
            path: shown.clone(),
            source,
        })?;
    }
    w.flush().map_err(|source| InputError::Io { path: shown, source })
}

/// Writes a replicate study in the format [`read_reliability`] accepts.
pub fn write_reliability(study: &ReliabilityStudy, path: &Path) -> Result<(), InputError> {
    let shown = path.display().to_string();
    let csv_err = |source| InputError::Csv {
        path: shown.clone(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let m = study.measurements.iter().map(Vec::len).max().unwrap_or(0);
    let p = study.covariates.as_ref().and_then(|z| z.first()).map_or(0, Vec::len);
    let header: Vec<String> = (1..=m)
        .map(|k| format!("r{k}"))
        .chain((1..=p).map(|k| format!("z{k}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in study.measurements.iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(f64::to_string).collect();
        cells.resize(m, String::new());
        if let Some(z) = &study.covariates {
            cells.extend(z[i].iter().map(f64::to_string));
        }
        w.write_record(&cells).map_err(csv_err)?;
    }
    w.flush().map_err(|source| InputError::Io {
        path: shown.clone(),
        source,
    })
}

/// Writes text to a file, naming the file on failure.
pub fn write_text(path: &Path, text: &str) -> Result<(), InputError> {
    File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|source| InputError::Io {
            path: path.display().to_string(),
            source,
        })
}
