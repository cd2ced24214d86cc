use thiserror::Error;

/// Errors raised anywhere in the analysis engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("type error in column `{column}` at row {row}: {detail}")]
    Type {
        column: String,
        row: usize,
        detail: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("aliasing error: metric `{0}` is also bound as a covariate")]
    Aliasing(String),

    #[error("rank deficient {matrix}: collinear columns [{}]", columns.join(", "))]
    RankDeficient { matrix: String, columns: Vec<String> },

    #[error("insufficient data: {rows} rows for {columns} columns")]
    InsufficientData { rows: usize, columns: usize },

    #[error("degenerate inference: {0}")]
    Degenerate(String),

    #[error("prior error: {0}")]
    Prior(String),

    #[error("context error: {0}")]
    Context(String),

    #[error("predicate error: {0}")]
    Predicate(String),

    #[error("empty segment: no rows satisfy `{0}`")]
    EmptySegment(String),

    #[error("graph cycle: {}", cycle.join(" -> "))]
    Cycle { cycle: Vec<String> },

    #[error("graph structure error: {0}")]
    Structure(String),

    #[error("projection spec error: {0}")]
    Spec(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_stage(self, stage: impl Into<String>) -> Error {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
