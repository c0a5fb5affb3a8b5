//! Command-line driver for the sketchformer pipeline.
//!
//! Every subcommand is deterministic given `--seed`. Sketches are read and
//! written as QuickDraw ndjson, reports as CSV or single JSON objects. On
//! failure the process prints one JSON line to stderr,
//! `{"error": <kind>, "code": <exit status>, "message": ..}`, and exits with
//! the status of [`ExitKind`].

pub mod args;
mod data;
mod error;
mod infer;
mod io;
mod train;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use error::{CliError, CliResult, ExitKind};
pub use io::{read_sketches, Record};

use args::{Cli, Command};

/// Settings shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub seed: Option<u64>,
    pub data_root: Option<std::path::PathBuf>,
}

impl Context {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Resolves relative paths against the data root.
    pub fn path(&self, p: &std::path::Path) -> std::path::PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(std::io::stdout(), "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::usage(first.trim_start_matches("error: "));
            eprintln!("{}", err.to_json_line());
            return err.kind.code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) if err.broken_pipe => 0,
        Err(err) => {
            eprintln!("{}", err.to_json_line());
            err.kind.code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let ctx = Context {
        seed: cli.seed,
        data_root: cli.data_root,
    };
    match cli.command {
        Command::Ingest(a) => data::ingest(&ctx, a),
        Command::Synth(a) => data::synth(&ctx, a),
        Command::FitDict(a) => data::fit_dict(&ctx, a),
        Command::QuantizationReport(a) => data::quantization_report(&ctx, a),
        Command::Train(a) => train::train(&ctx, a),
        Command::TrainJoint(a) => train::train_joint(&ctx, a),
        Command::Encode(a) => infer::encode(&ctx, a),
        Command::Decode(a) => infer::decode(&ctx, a),
        Command::Reconstruct(a) => infer::reconstruct(&ctx, a),
        Command::Interpolate(a) => infer::interpolate(&ctx, a),
        Command::Perturb(a) => infer::perturb(&ctx, a),
        Command::Index(a) => infer::index(&ctx, a),
        Command::Retrieve(a) => infer::retrieve(&ctx, a),
        Command::EvalClassify(a) => infer::eval_classify(&ctx, a),
        Command::EvalRetrieval(a) => infer::eval_retrieval(&ctx, a),
        Command::Serve(a) => infer::serve(&ctx, a),
    }
}
