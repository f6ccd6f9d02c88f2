use std::fmt;

/// Error type shared by every layer of the crate.
///
/// `Shape` and `Usage` are programming/contract violations surfaced with the
/// offending dimensions in the message; `Config` covers invalid run
/// configuration caught before any compute; `Io`/`Format` cover file
/// handling; `Stats` covers degenerate statistical inputs.
#[derive(Debug)]
pub enum Error {
    Shape(String),
    Config(String),
    Usage(String),
    Io(std::io::Error),
    Format(String),
    Checkpoint(String),
    Stats(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
    pub fn stats(msg: impl Into<String>) -> Self {
        Error::Stats(msg.into())
    }

    /// Short category tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Stats(_) => "stats",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m)
            | Error::Config(m)
            | Error::Usage(m)
            | Error::Format(m)
            | Error::Checkpoint(m)
            | Error::Stats(m) => write!(f, "{}: {}", self.kind(), m),
            Error::Io(e) => write!(f, "io: {}", e),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
