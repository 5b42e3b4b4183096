//! Report envelope, error type and file helpers shared by the commands.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: sfns_core::Error },

    #[error(transparent)]
    Core(#[from] sfns_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn is_io(&self) -> bool {
        match self {
            CliError::File { source, .. } | CliError::Core(source) => source.is_io(),
            CliError::Io { .. } => true,
            CliError::Usage(_) => false,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches the file a library call was working on to its error.
pub fn at<T>(path: &Path, r: sfns_core::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    open(path)?.lines().collect::<io::Result<_>>().map_err(io_at(path))
}

/// Parses one JSON value per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| sfns_core::Error::Parse { line: i + 1, msg: e.to_string() });
        out.push(at(path, item)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)
            .map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.into() })?;
        w.write_all(b"\n").map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))
}

/// Command output. Everything except `meta` is a pure function of the
/// arguments, the input files and the seed.
#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: Value,
    pub result: Value,
    pub meta: Map<String, Value>,
}

impl Report {
    pub fn new(command: &str, seed: u64, threads: usize, config: &impl Serialize, result: &impl Serialize) -> Self {
        let mut meta = Map::new();
        meta.insert("timestamp".into(), Value::String(chrono::Utc::now().to_rfc3339()));
        meta.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        Self { command: command.to_string(), seed, threads, config: to_value(config), result: to_value(result), meta }
    }

    /// Moves a run-dependent field (a timing, say) from the result into
    /// `meta`.
    pub fn move_to_meta(mut self, key: &str) -> Self {
        if let Some(v) = self.result.as_object_mut().and_then(|r| r.remove(key)) {
            self.meta.insert(key.to_string(), v);
        }
        self
    }

    /// Pretty JSON to `out`, or to standard output.
    pub fn emit(&self, out: Option<&Path>) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("reports serialize");
        text.push('\n');
        match out {
            Some(path) => std::fs::write(path, text).map_err(io_at(path)),
            None => io::stdout()
                .write_all(text.as_bytes())
                .map_err(|source| CliError::Io { path: "<stdout>".into(), source }),
        }
    }
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("configs and results serialize")
}
