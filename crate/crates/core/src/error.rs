use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed scan: {0}")]
    MalformedScan(String),
    #[error("malformed label file: {0}")]
    MalformedLabels(String),
    #[error("raw label id {0} is not in the label map")]
    UnknownLabel(u16),
    #[error("invalid label map: {0}")]
    BadLabelMap(String),
    #[error("requested {requested} samples but only {available} are available")]
    PoolTooLarge { requested: usize, available: usize },
    #[error("cannot access {path}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("point {0} lies at the sensor origin")]
    DegeneratePoint(usize),
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("source image has no instance plane")]
    MissingInstances,
    #[error("the unlabeled pool is empty")]
    EmptyPool,
    #[error("missing predictions: {0}")]
    MissingPredictions(PathBuf),
    #[error("malformed tensor: {0}")]
    MalformedTensor(String),
    #[error("labeled set carries no supervised pixels")]
    NoSupervision,
    #[error("class id {id} out of range for {classes} classes")]
    BadClassId { id: u16, classes: usize },
    #[error("metric undefined: every class has an empty union")]
    UndefinedMetric,
    #[error("mIoU level {0} is not reached by the curve")]
    LevelUnreachable(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pool invariant violated: {0}")]
    PoolInvariant(String),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}
