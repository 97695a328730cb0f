use std::fmt;

use trajsim::distance::DistanceError;
use trajsim::gnn::GnnError;
use trajsim::graph::GraphError;
use trajsim::ingest::IngestError;
use trajsim::io::FormatError;
use trajsim::pipeline::PipelineError;
use trajsim::search::SearchError;

/// A failed command, classified by the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    BadInput(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::BadInput(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::BadInput(m) => write!(f, "bad input: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => Failure::Io(e.to_string()),
            IngestError::Csv { ref source, .. } if source.is_io_error() => Failure::Io(e.to_string()),
            _ => Failure::BadInput(e.to_string()),
        }
    }
}

impl From<DistanceError> for Failure {
    fn from(e: DistanceError) -> Self {
        match e {
            DistanceError::NonFinite(..) => Failure::Numeric(e.to_string()),
            DistanceError::Pool(_) => Failure::Io(e.to_string()),
            _ => Failure::BadInput(e.to_string()),
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        Failure::BadInput(e.to_string())
    }
}

impl From<GnnError> for Failure {
    fn from(e: GnnError) -> Self {
        match e {
            GnnError::NonFinite { .. } | GnnError::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::BadInput(e.to_string()),
        }
    }
}

impl From<SearchError> for Failure {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::BadInput(e.to_string()),
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::BadInput(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Ingest(e) => e.into(),
            PipelineError::Distance(e) => e.into(),
            PipelineError::Graph(e) => e.into(),
            PipelineError::Gnn(e) => e.into(),
            PipelineError::Search(e) => e.into(),
            PipelineError::NothingLeft(_) => Failure::BadInput(e.to_string()),
        }
    }
}
