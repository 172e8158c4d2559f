use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] l0drop::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid arguments: {0}")]
    Usage(String),
}

pub type CliResult<T> = Result<T, CliError>;

/// Process exit statuses. Clap itself exits with 2 on malformed arguments.
pub mod exit {
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const NUMERIC: i32 = 5;
    pub const IO: i32 = 6;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use l0drop::Error as E;
        match self {
            CliError::Usage(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                E::Config(_) => exit::CONFIG,
                E::Data(_) | E::EmptyCorpus | E::Format(_) => exit::DATA,
                E::NonFinite(_) | E::Domain(_) | E::DegenerateMemory => exit::NUMERIC,
                E::Io(_) => exit::IO,
                E::Shape { .. } | E::Contract(_) => exit::INTERNAL,
            },
        }
    }
}

pub fn read(path: &std::path::Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &std::path::Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
