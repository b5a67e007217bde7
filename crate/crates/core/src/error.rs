use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("triple ({head}, {rel}, {tail}) is out of range for {num_entities} entities / {num_relations} relations")]
    TripleOutOfRange {
        head: u32,
        rel: u32,
        tail: u32,
        num_entities: usize,
        num_relations: usize,
    },
    #[error("graph has no triples")]
    EmptyTripleSet,
    #[error("entity id {entity} is out of range for graph with {num_entities} entities")]
    EntityOutOfRange { entity: u32, num_entities: usize },
    #[error("alignment pair ({e1}, {e2}) references an invalid entity")]
    InvalidAlignmentPair { e1: u32, e2: u32 },
    #[error("entity {entity} on side {side} appears in more than one alignment pair")]
    DuplicateAlignmentEntity { entity: u32, side: u8 },
    #[error("train/valid/test alignment splits overlap at entity {entity} on side {side}")]
    OverlappingSplits { entity: u32, side: u8 },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values in {module} at layer {layer} ({detail})")]
    NonFinite {
        module: &'static str,
        layer: usize,
        detail: String,
    },
    #[error("empty candidate set for query {query}")]
    EmptyCandidates { query: u32 },
    #[error("true target {target} missing from candidate set of query {query}")]
    TargetNotInCandidates { query: u32, target: u32 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("gradient check failed for group {group}: max relative error {max_rel_err:e} exceeds tolerance {tolerance:e}")]
    GradCheckFailed {
        group: String,
        max_rel_err: f64,
        tolerance: f64,
    },
    #[error("{path}:{line}: malformed line: {detail}")]
    MalformedLine {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
    #[error("synthetic graph rejected: {zero_degree} of {num_entities} entities have degree zero")]
    DegenerateSynthGraph {
        zero_degree: usize,
        num_entities: usize,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
