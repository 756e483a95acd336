use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("task {task}: {source}")]
    Task {
        task: String,
        #[source]
        source: ucad_core::Error,
    },
    #[error(transparent)]
    Core(#[from] ucad_core::Error),
    #[error("feature file {path}: {source}")]
    Features {
        path: String,
        #[source]
        source: crate::features::FeatureFileError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn core_exit_code(e: &ucad_core::Error) -> i32 {
    use ucad_core::Error as E;
    match e {
        E::Diverged(_) | E::NonFinite(_) | E::DegenerateVector | E::UndefinedMetric(_) => 4,
        E::BadMagic { .. }
        | E::VersionMismatch { .. }
        | E::Truncated { .. }
        | E::Malformed(_)
        | E::Io(_)
        | E::DimensionMismatch(_)
        | E::EmptyBank
        | E::MissingEntry { .. } => 3,
        E::InvalidArgument(_) | E::UnknownToken(_) | E::DuplicateTask(_) => 2,
    }
}

impl PipelineError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn features(path: impl AsRef<std::path::Path>, source: crate::features::FeatureFileError) -> Self {
        Self::Features { path: path.as_ref().display().to_string(), source }
    }

    pub fn in_task(task: &str, source: ucad_core::Error) -> Self {
        Self::Task { task: task.to_string(), source }
    }

    /// Process exit status: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } | Self::Features { .. } => 3,
            Self::Task { source, .. } | Self::Core(source) => core_exit_code(source),
        }
    }
}
