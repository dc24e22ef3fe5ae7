use std::path::{Path, PathBuf};

use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum BfdError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("archive not found: no manifest.json in {}", .0.display())]
    MissingArchive(PathBuf),
    #[error("missing file {} (tensor {tensor})", path.display())]
    MissingFile { path: PathBuf, tensor: String },
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor {tensor} is truncated: {file} holds {actual} bytes, needs {needed}")]
    Truncated {
        tensor: String,
        file: String,
        needed: u64,
        actual: u64,
    },
    #[error("unsupported archive format_version {0} (this build reads version 1)")]
    UnknownVersion(u64),
    #[error("tensor {0} is not declared in the archive")]
    NotFound(String),
    #[error("invalid tensor {tensor}: {message}")]
    Validation { tensor: String, message: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("stage dependency unmet: {0}")]
    Dependency(String),
    #[error(transparent)]
    Core(#[from] bfd_core::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, BfdError>;

impl BfdError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        BfdError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn validation(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        BfdError::Validation {
            tensor: tensor.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BfdError::Usage(_) => "usage",
            BfdError::MissingArchive(_) => "missing_archive",
            BfdError::MissingFile { .. } => "missing_file",
            BfdError::Io { .. } => "io",
            BfdError::Truncated { .. } => "truncated",
            BfdError::UnknownVersion(_) => "unknown_version",
            BfdError::NotFound(_) => "not_found",
            BfdError::Validation { .. } => "validation",
            BfdError::Manifest(_) => "manifest",
            BfdError::Dependency(_) => "dependency",
            BfdError::Core(e) => match e {
                bfd_core::Error::Argument(_) => "argument",
                bfd_core::Error::Data(_) => "data",
                bfd_core::Error::Dimension(_) => "dimension",
                bfd_core::Error::UndefinedRank => "undefined_rank",
                bfd_core::Error::DegenerateManifold => "degenerate_manifold",
                bfd_core::Error::Diverged { .. } => "diverged",
            },
            BfdError::Other(_) => "other",
        }
    }

    /// Process exit status: 2 usage, 3 missing input or IO, 4 unmet stage
    /// dependency, 5 invalid data, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            BfdError::Usage(_) | BfdError::Core(bfd_core::Error::Argument(_)) => 2,
            BfdError::MissingArchive(_) | BfdError::MissingFile { .. } | BfdError::Io { .. } => 3,
            BfdError::Dependency(_) => 4,
            BfdError::Truncated { .. }
            | BfdError::UnknownVersion(_)
            | BfdError::NotFound(_)
            | BfdError::Validation { .. }
            | BfdError::Manifest(_)
            | BfdError::Core(_) => 5,
            BfdError::Other(_) => 1,
        }
    }

    /// One-line JSON error record for stderr.
    pub fn record(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        let obj = v.as_object_mut().expect("object");
        match self {
            BfdError::MissingArchive(p) | BfdError::Io { path: p, .. } => {
                obj.insert("path".into(), json!(p.display().to_string()));
            }
            BfdError::MissingFile { path, tensor } => {
                obj.insert("path".into(), json!(path.display().to_string()));
                obj.insert("tensor".into(), json!(tensor));
            }
            BfdError::Truncated { tensor, .. }
            | BfdError::Validation { tensor, .. }
            | BfdError::NotFound(tensor) => {
                obj.insert("tensor".into(), json!(tensor));
            }
            _ => {}
        }
        v
    }
}
