use thiserror::Error;

/// What went wrong while parsing a tree file. Carried with the line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeErrorKind {
    EmptyDocument,
    MalformedLine(String),
    RootExpected(String),
    MultipleRoots(String),
    DuplicateNode(String),
    DanglingParent(String),
    NonUniformDepth(String),
    NoClasses,
    BadDirective(String),
}

impl std::fmt::Display for TreeErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TreeErrorKind::EmptyDocument => write!(f, "empty document: no node lines"),
            TreeErrorKind::MalformedLine(s) => write!(f, "malformed node line: {s}"),
            TreeErrorKind::RootExpected(s) => {
                write!(f, "first node must be the level-0 root with parent '-', got: {s}")
            }
            TreeErrorKind::MultipleRoots(s) => write!(f, "second root declared: {s}"),
            TreeErrorKind::DuplicateNode(s) => write!(f, "duplicate node within its level: {s}"),
            TreeErrorKind::DanglingParent(s) => {
                write!(f, "parent not declared at the previous level: {s}")
            }
            TreeErrorKind::NonUniformDepth(s) => {
                write!(f, "non-uniform leaf depth: {s}")
            }
            TreeErrorKind::NoClasses => write!(f, "tree has a root but no class nodes"),
            TreeErrorKind::BadDirective(s) => write!(f, "bad directive: {s}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("tree file line {line}: {kind}")]
    Tree { line: usize, kind: TreeErrorKind },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("label {label} out of range for {limit} classes")]
    LabelRange { label: usize, limit: usize },

    #[error("index {index} out of range for {limit} leaves")]
    LeafRange { index: usize, limit: usize },

    #[error("non-finite gradient in '{0}'; optimizer step aborted")]
    NonFiniteGradient(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("training error: {0}")]
    Train(String),

    #[error("weight container error: {0}")]
    WeightFormat(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures of the I/O class (exit code 2 in the CLI contract).
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
