use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}", path.display())]
    Invalid {
        path: PathBuf,
        #[source]
        source: text2tree_core::Error,
    },
}

pub type Result<T> = std::result::Result<T, FormatError>;

impl FormatError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        FormatError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(path: &Path, source: text2tree_core::Error) -> Self {
        FormatError::Invalid {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| FormatError::io(path, e))
}

/// Non-blank lines that do not start with `#`, with 1-based line numbers.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Process exit status for a failure: 1 when the inputs are invalid, 2 when
/// a run fails for any other reason.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return match e {
                FormatError::Io { .. } => 2,
                FormatError::Parse { .. } => 1,
                FormatError::Invalid { source, .. } => core_exit_code(source),
            };
        }
        if let Some(e) = cause.downcast_ref::<text2tree_core::Error>() {
            return core_exit_code(e);
        }
        if cause.downcast_ref::<Validation>().is_some() {
            return 1;
        }
    }
    2
}

fn core_exit_code(err: &text2tree_core::Error) -> i32 {
    use text2tree_core::Error as E;
    match err {
        E::Shape(_)
        | E::ZeroNorm(_)
        | E::BatchTooSmall(_)
        | E::NotAPermutation(_)
        | E::EmptySequence(_)
        | E::NonFiniteLoss => 2,
        _ => 1,
    }
}

/// A check that ran and failed.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Validation(pub String);
