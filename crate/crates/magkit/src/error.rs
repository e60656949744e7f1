use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}{}: {detail}", line.map(|l| format!(" row {l}")).unwrap_or_default())]
    Parse { path: PathBuf, line: Option<usize>, detail: String },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("checkpoint does not match the config; mismatched fields: {}", .0.join(", "))]
    Incompatible(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] magkit_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn parse(path: impl Into<PathBuf>, line: Option<usize>, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.into(), line, detail: detail.into() }
}
