//! Data ingestion, run configuration and result files.

pub mod config;
pub mod dataset;
pub mod results;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{ConfigError, RunConfig};
pub use dataset::{dataset_to_string, parse_dataset, parse_dataset_str, write_dataset};
pub use results::{
    parse_params, parse_params_str, params_to_string, percentage_error, write_result, ParamRow, PercentageError,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{}, line {line}: {message}", path.display())]
    ParseFile { path: PathBuf, line: u64, message: String },
    #[error("{0}")]
    Format(String),
}

impl IoError {
    /// Attaches a file name to a line-numbered error.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            IoError::Parse { line, message } => IoError::ParseFile { path: path.to_path_buf(), line, message },
            other => other,
        }
    }
}

/// Shortest decimal that parses back to the same `f64`; exponent notation
/// outside `[1e-5, 1e16)`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-5..1e16).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so an
/// interrupted run never leaves a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io_err = |source| IoError::Io { path: path.to_path_buf(), source };
    let name = path.file_name().ok_or_else(|| IoError::Format(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float_format_examples() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(20.0), "20");
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(1e-300), "1e-300");
        assert_eq!(fmt_f64(-2.5e20), "-2.5e20");
    }

    proptest! {
        #[test]
        fn float_format_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt_f64(x);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
