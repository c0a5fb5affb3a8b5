use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sketchformer::sketch::{parse_quickdraw, Sketch};

use crate::error::{io_error, CliError, CliResult};
use crate::Context;

/// One sketch from a QuickDraw ndjson file.
#[derive(Debug, Clone)]
pub struct Record {
    /// The record's `key_id`, or its 0-based line number among non-blank lines.
    pub id: String,
    pub word: Option<String>,
    pub sketch: Sketch,
}

pub fn read_lines(path: &Path) -> CliResult<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(path, e))?;
        if !line.trim().is_empty() {
            out.push((n + 1, line));
        }
    }
    Ok(out)
}

pub fn read_sketches(path: &Path) -> CliResult<Vec<Record>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, (line_no, line))| {
            let rec = parse_quickdraw(&line)
                .map_err(|e| CliError::from(e).context(format!("{}:{line_no}", path.display())))?;
            Ok(Record {
                id: rec.sketch.source_id.clone().unwrap_or_else(|| i.to_string()),
                word: rec.word,
                sketch: rec.sketch,
            })
        })
        .collect()
}

/// Finds a record by key_id, falling back to its line index.
pub fn find<'a>(records: &'a [Record], id: &str) -> CliResult<&'a Record> {
    if let Some(r) = records.iter().find(|r| r.id == id) {
        return Ok(r);
    }
    id.parse::<usize>()
        .ok()
        .and_then(|i| records.get(i))
        .ok_or_else(|| CliError::input(format!("no sketch with id {id}")))
}

/// Line-oriented output to a file or stdout.
pub struct Output {
    inner: Box<dyn Write>,
    path: Option<PathBuf>,
}

impl Output {
    pub fn open(ctx: &Context, path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Output {
                inner: Box::new(BufWriter::new(std::io::stdout().lock())),
                path: None,
            }),
            Some(p) => {
                let p = ctx.path(p);
                let f = File::create(&p).map_err(|e| io_error(&p, e))?;
                Ok(Output {
                    inner: Box::new(BufWriter::new(f)),
                    path: Some(p),
                })
            }
        }
    }

    fn fail(&self, e: std::io::Error) -> CliError {
        let pipe = self.path.is_none() && e.kind() == std::io::ErrorKind::BrokenPipe;
        let mut err = io_error(self.path.as_deref().unwrap_or(Path::new("<stdout>")), e);
        err.broken_pipe = pipe;
        err
    }

    pub fn line(&mut self, text: &str) -> CliResult<()> {
        writeln!(self.inner, "{text}").map_err(|e| self.fail(e))
    }

    pub fn json<T: Serialize>(&mut self, value: &T) -> CliResult<()> {
        let text = serde_json::to_string(value).expect("serializable output");
        self.line(&text)
    }

    pub fn writer(&mut self) -> &mut dyn Write {
        &mut self.inner
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.inner.flush().map_err(|e| self.fail(e))
    }
}

/// A response body tagged with the id of the sketch it belongs to.
#[derive(Debug, Serialize)]
pub struct Tagged<'a, B> {
    pub id: &'a str,
    #[serde(flatten)]
    pub body: B,
}

/// Prints one JSON summary object to stdout.
pub fn print_summary<T: Serialize>(value: &T) {
    let text = serde_json::to_string(value).expect("serializable summary");
    // a closed stdout only loses the summary; the command's files are written
    let _ = writeln!(std::io::stdout(), "{text}");
}
