//! Report envelope and emission. Every successful run emits one JSON
//! document carrying the resolved configuration (seed included, thread
//! count deliberately excluded) and the result, so a rerun with the same
//! config is byte-identical. Errors become a machine-readable object on
//! stderr with an exit code of 1 for domain failures and 2 for usage or
//! I/O failures.

use std::io::Write;
use std::path::Path;

use rerand::error::Error;
use serde::Serialize;

pub const REPORT_SCHEMA: &str = "rerand/report/v1";

#[derive(Serialize)]
pub struct Report<C: Serialize, R: Serialize> {
    pub schema: &'static str,
    pub command: &'static str,
    pub config: C,
    pub result: R,
}

impl<C: Serialize, R: Serialize> Report<C, R> {
    pub fn new(command: &'static str, config: C, result: R) -> Self {
        Report {
            schema: REPORT_SCHEMA,
            command,
            config,
            result,
        }
    }

    pub fn emit(&self, out: Option<&Path>) -> Result<(), Error> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_text(out, &text)
    }
}

pub fn write_text(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub struct CliError {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: "usage",
            exit_code: 2,
            message: message.into(),
        }
    }

    /// Prints the error object to stderr and returns the exit code.
    pub fn report(&self) -> i32 {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: &'a str,
        }
        #[derive(Serialize)]
        struct ErrorReport<'a> {
            error: Body<'a>,
        }
        let doc = ErrorReport {
            error: Body {
                kind: self.kind,
                message: &self.message,
            },
        };
        eprintln!(
            "{}",
            serde_json::to_string_pretty(&doc).expect("static error shape")
        );
        self.exit_code
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        // A request can fail three ways: the bytes were unreadable (io),
        // the request itself was malformed (usage), or the mathematics of
        // well-formed data refused (domain). Only domain failures exit 1.
        let (kind, exit_code) = match &e {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ("io", 2),
            Error::InvalidData(_)
            | Error::InvalidPlan(_)
            | Error::InvalidCriterion(_)
            | Error::InvalidProbability { .. }
            | Error::InvalidThreshold { .. }
            | Error::InvalidDof
            | Error::DegenerateWeights
            | Error::TooLarge { .. } => ("usage", 2),
            _ => ("domain", 1),
        };
        CliError {
            kind,
            exit_code,
            message: e.to_string(),
        }
    }
}

/// Long-format CSV dump of labeled square matrices, one row per cell.
pub fn matrix_dump_csv(
    blocks: &[(&str, &rerand::matrix::Matrix)],
    labels: &[String],
    out: Option<&Path>,
) -> Result<(), Error> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["matrix", "row", "col", "value"])?;
    for (name, m) in blocks {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                writer.write_record([
                    name,
                    labels[i].as_str(),
                    labels[j].as_str(),
                    m.get(i, j).to_string().as_str(),
                ])?;
            }
        }
    }
    let bytes = writer.into_inner().map_err(|e| {
        Error::InvalidData(format!("csv buffer: {e}"))
    })?;
    let text = String::from_utf8(bytes).expect("csv writes utf-8");
    write_text(out, &text)
}
