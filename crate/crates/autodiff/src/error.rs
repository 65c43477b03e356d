use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("matrix rows have different lengths")]
    RaggedRows,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("partial_detach ratio must lie in [0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
