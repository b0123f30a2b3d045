use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// A CSV cell failed to parse; line and column are 1-based, the
    /// header counting as line 1.
    Parse {
        line: usize,
        column: usize,
        content: String,
    },
    RaggedRow {
        line: usize,
        expected: usize,
        got: usize,
    },
    EmptyDataset,
    Config(String),
    Core(vbnet::Error),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse { line, column, content } => {
                write!(f, "line {line}, column {column}: cannot parse '{content}' as a number")
            }
            CliError::RaggedRow { line, expected, got } => {
                write!(f, "line {line}: expected {expected} fields, found {got}")
            }
            CliError::EmptyDataset => write!(f, "dataset contains no data rows"),
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<vbnet::Error> for CliError {
    fn from(e: vbnet::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
