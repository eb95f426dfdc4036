//! Pieces shared by the subcommands: key=value configuration, the run
//! manifest, and the mapping from failures to exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tasksod::Error;

/// How a run failed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, unknown configuration keys, inconsistent settings.
    Usage(String),
    /// Unreadable, missing or malformed inputs.
    Data(String),
    /// Training diverged or a numerical check failed.
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Numerical(_) => "numerical",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }

    /// `error: code=<n> kind=<kind> message=<text>`, always one line.
    pub fn line(&self) -> String {
        let message: String = self
            .message()
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join("; ");
        format!("error: code={} kind={} message={}", self.code(), self.kind(), message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let text = e.to_string();
        match e {
            Error::Config(_) | Error::UnknownKey { .. } => Failure::Usage(text),
            Error::Divergence { .. } => Failure::Numerical(text),
            Error::Shape(_)
            | Error::Data(_)
            | Error::MissingFiles(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Csv { .. } => Failure::Data(text),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Configuration lines from an optional file followed by `--set` overrides,
/// in that order. Blank lines and `#` comments are dropped.
pub fn config_lines(file: Option<&Path>, overrides: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut raw = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        raw.extend(text.lines().map(str::to_string));
    }
    raw.extend(overrides.iter().cloned());
    let mut out = Vec::new();
    for line in &raw {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("expected key=value, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Fails on the first key, for subcommands that take no configuration.
pub fn no_config(lines: &[(String, String)], command: &str) -> CliResult<()> {
    match lines.first() {
        Some((k, _)) => Err(Failure::Usage(format!("{command} takes no configuration keys, got {k:?}"))),
        None => Ok(()),
    }
}

/// Run record written as `<out>/manifest.txt`: the command, its inputs, the
/// resolved configuration and the seed. Contains nothing time-dependent, so
/// identical runs produce identical manifests.
pub struct Manifest {
    text: String,
}

impl Manifest {
    pub fn new(command: &str, deterministic: bool) -> Self {
        let mut m = Manifest { text: String::new() };
        m.entry("command", command);
        m.entry("version", env!("CARGO_PKG_VERSION"));
        m.entry("deterministic", deterministic);
        m
    }

    pub fn entry(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        writeln!(self.text, "{key}={value}").expect("writing to a string");
        self
    }

    pub fn path(&mut self, key: &str, value: &Path) -> &mut Self {
        self.entry(key, value.display())
    }

    /// Appends `key=value` lines verbatim, e.g. a configuration echo.
    pub fn block(&mut self, echo: &str) -> &mut Self {
        self.text.push_str(echo);
        if !echo.is_empty() && !echo.ends_with('\n') {
            self.text.push('\n');
        }
        self
    }

    pub fn write(&self, out: &Path) -> CliResult<PathBuf> {
        tasksod::io::ensure_dir(out)?;
        let path = out.join("manifest.txt");
        std::fs::write(&path, &self.text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}
