use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    // label tree
    #[error("edge list is empty")]
    EmptyEdges,
    #[error("target list is empty")]
    EmptyTargets,
    #[error("cycle detected through node `{0}`")]
    Cycle(String),
    #[error("node `{child}` has two parents: `{first}` and `{second}`")]
    DuplicateParent {
        child: String,
        first: String,
        second: String,
    },
    #[error("ROOT cannot have a parent (got `{0}`)")]
    RootHasParent(String),
    #[error("node `{0}` is not connected to ROOT")]
    Disconnected(String),
    #[error("target `{0}` is not a node of the tree")]
    UnknownTarget(String),
    #[error("duplicate target `{0}`")]
    DuplicateTarget(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("ROOT has no siblings")]
    SiblingsOfRoot,
    #[error("empty code segment in `{0}`")]
    EmptySegment(String),
    #[error("prefix lengths must be positive and strictly increasing")]
    PrefixLengths,
    #[error("empty code")]
    EmptyCode,

    // numerics
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty label set")]
    EmptyLabelSet,
    #[error("sample {0} has a zero-norm label representation")]
    ZeroNorm(usize),
    #[error("batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("pairing is not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("lambda_loss {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("missing label text for `{0}`")]
    MissingLabelText(String),
    #[error("token sequence {0} is empty")]
    EmptySequence(usize),
    #[error("non-finite loss")]
    NonFiniteLoss,

    // data
    #[error("dataset is invalid: {0}")]
    InvalidDataset(String),
    #[error("label `{0}` is not a classification target of the tree")]
    LabelNotTarget(String),
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("generator spec is invalid: {0}")]
    InvalidGeneratorSpec(String),
    #[error("configuration is invalid: {0}")]
    InvalidConfig(String),
}
