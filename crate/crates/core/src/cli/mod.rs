//! The `lazystrike` command-line surface.
//!
//! Every command first prints a JSON line carrying its config digest, then its
//! report as JSON lines. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 numerical failure.

mod args;
mod commands;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::Path;

use clap::Parser;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use args::{Cli, Command};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Lib(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::Lib(Error::Json(e))
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Lib(Error::NonFinite(_) | Error::Diverged { .. }) => EXIT_NUMERIC,
            Self::Lib(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Lib(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

pub(crate) fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Hash of a command's effective parameters and the bytes of its inputs.
///
/// Output locations are excluded: they do not influence output contents.
#[derive(Debug, Default)]
pub struct DigestBuilder {
    params: BTreeMap<String, Value>,
    inputs: BTreeMap<String, String>,
}

impl DigestBuilder {
    pub fn param(&mut self, key: &str, value: impl serde::Serialize) -> CliResult<&mut Self> {
        self.params.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    /// Record an input file under a logical `key`, by content.
    pub fn input(&mut self, key: &str, path: &Path) -> CliResult<&mut Self> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(key.to_string(), hex(&Sha256::digest(&bytes)));
        Ok(self)
    }

    pub fn finish(&self, command: &str) -> String {
        let canonical = json!({ "command": command, "params": self.params, "inputs": self.inputs });
        hex(&Sha256::digest(canonical.to_string().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write one JSON value as a line.
pub(crate) fn emit(out: &mut dyn Write, value: &Value) -> CliResult<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Parse `argv` (including the program name), run the command, and return its exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    crate::exec::init_threads_from_env();
    match commands::dispatch(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {f}");
            if matches!(f, Failure::Usage(_)) {
                let _ = writeln!(stderr, "run with --help for usage");
            }
            f.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn no_args_is_usage() {
        let (code, out, err) = run_capture(&["lazystrike"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(out.is_empty());
        assert!(err.contains("Usage"));
    }

    #[test]
    fn unknown_subcommand_and_flag() {
        assert_eq!(run_capture(&["lazystrike", "frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["lazystrike", "pool", "--bogus"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_goes_to_stdout() {
        let (code, out, _) = run_capture(&["lazystrike", "--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("train"));
    }

    #[test]
    fn digest_depends_on_params_and_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a");
        std::fs::write(&f, b"x").unwrap();
        let mut a = DigestBuilder::default();
        a.param("k", 3).unwrap().input("features", &f).unwrap();
        let first = a.finish("pool");
        assert_eq!(first.len(), 64);
        assert_ne!(first, a.finish("score"));
        std::fs::write(&f, b"y").unwrap();
        a.input("features", &f).unwrap();
        assert_ne!(first, a.finish("pool"));
    }

    #[test]
    fn exit_codes_by_error() {
        assert_eq!(Failure::from(Error::BadMagic).exit_code(), EXIT_DATA);
        assert_eq!(Failure::from(Error::Diverged { epoch: 1, loss: f64::NAN }).exit_code(), EXIT_NUMERIC);
        assert_eq!(usage("x").exit_code(), EXIT_USAGE);
    }
}
