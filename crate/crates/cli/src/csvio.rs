//! CSV datasets and telemetry files.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which round-trips
//! every `f64` exactly and keeps output byte-deterministic.

use std::fmt::Write as _;
use std::path::Path;

use rifle_core::data::Dataset;
use rifle_core::trainer::TelemetryRecord;
use rifle_core::{Error, Tensor};

use crate::error::{CliError, CliResult};

pub const TELEMETRY_HEADER: &str = "epoch,step,eta,train_loss,train_top1,test_loss,test_top1,reset_event";
pub const GRADNORM_HEADER: &str = "epoch,layer,fro_norm";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One row per example: the label (integer for classification), then the
/// features. No header.
pub fn render_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    let targets = data.targets();
    let per_row = targets.cols();
    for i in 0..data.len() {
        if data.is_classification() {
            write!(out, "{}", targets.data()[i] as u64).unwrap();
        } else {
            let t = targets.row(i);
            debug_assert_eq!(t.len(), per_row);
            out.push_str(&fmt_f64(t[0]));
        }
        for &x in data.features().row(i) {
            out.push(',');
            out.push_str(&fmt_f64(x));
        }
        out.push('\n');
    }
    out
}

/// Loads a label-first CSV. With `num_classes` the first column must hold
/// class indices; without it the file is a scalar regression set.
pub fn read_dataset(path: &Path, num_classes: Option<usize>) -> CliResult<Dataset> {
    let shown = path.display().to_string();
    let parse_err = |line: u64, msg: String| {
        CliError::Core(Error::Parse {
            path: shown.clone(),
            line: line as usize,
            msg,
        })
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => CliError::Config(format!("{shown}: {other:?}")),
        })?;
    let mut width = None;
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(parse_err(line, "expected a label and at least one feature".into()));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", record.len())))
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("field {}: `{field}` is not a number", j + 1)))?;
            if j == 0 {
                if let Some(c) = num_classes {
                    if v.fract() != 0.0 || v < 0.0 || v >= c as f64 {
                        return Err(parse_err(line, format!("label `{field}` outside [0, {c})")));
                    }
                }
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(parse_err(1, "no rows".into()));
    };
    let n = targets.len();
    let x = Tensor::new(vec![n, w - 1], features)?;
    let data = match num_classes {
        Some(c) => Dataset::classification(x, Tensor::from_vec(targets), c)?,
        None => Dataset::regression(x, Tensor::new(vec![n, 1], targets)?)?,
    };
    Ok(data)
}

pub fn render_telemetry(records: &[TelemetryRecord]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            fmt_f64(r.eta),
            fmt_f64(r.train_loss),
            fmt_f64(r.train_top1),
            fmt_f64(r.test_loss),
            fmt_f64(r.test_top1),
            r.reset_event
        )
        .unwrap();
    }
    out
}

pub fn render_gradnorms(records: &[TelemetryRecord]) -> String {
    let mut out = String::from(GRADNORM_HEADER);
    out.push('\n');
    for r in records {
        for (layer, norm) in &r.grad_norms {
            writeln!(out, "{},{},{}", r.epoch, layer, fmt_f64(*norm)).unwrap();
        }
    }
    out
}

/// Writes via a temporary sibling file and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_has_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        for x in [0.1, 1.0 / 3.0, -7.25e-300, 6.02e23] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.1, -1.0 / 3.0, 2.5e-17, 4.0, 1e300, -0.0]).unwrap();
        let y = Tensor::from_vec(vec![2.0, 0.0, 1.0]);
        let ds = Dataset::classification(x, y, 3).unwrap();
        let path = dir.path().join("d.csv");
        write_atomic(&path, &render_dataset(&ds)).unwrap();
        let back = read_dataset(&path, Some(3)).unwrap();
        assert!(back.features().bitwise_eq(ds.features()));
        assert!(back.targets().bitwise_eq(ds.targets()));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,1.0,2.0\n1,3.0,oops\n").unwrap();
        let err = read_dataset(&path, Some(2)).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        std::fs::write(&path, "0,1.0,2.0\n1,3.0\n").unwrap();
        let err = read_dataset(&path, Some(2)).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("expected 3 fields"), "{err}");
        std::fs::write(&path, "0,1.0\n5,3.0\n").unwrap();
        assert!(read_dataset(&path, Some(2)).unwrap_err().to_string().contains(":2:"));
    }
}
