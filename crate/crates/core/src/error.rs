use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsiError {
    #[error("mesh too coarse: spacing {spacing:.6} m exceeds the maximum {max_spacing:.6} m; need at least {min_cells:?} interior cells")]
    MeshTooCoarse {
        spacing: f64,
        max_spacing: f64,
        min_cells: [usize; 3],
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("region {index} lies outside the domain extent")]
    RegionOutsideExtent { index: usize },

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("position {position:?} lies inside the PML or outside the grid")]
    OutsideInterior { position: [f64; 3] },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: BestIterate,
    },

    #[error("scattering matrix row {row} failed: {source}")]
    RowBuild {
        row: usize,
        #[source]
        source: Box<CsiError>,
    },

    #[error("source {index} failed: {source}")]
    SourceSolve {
        index: usize,
        #[source]
        source: Box<CsiError>,
    },

    #[error("empty partition: {0}")]
    EmptyPartition(String),

    #[error("data unreachable: residual {residual:.3e} above target with zero dual norm")]
    Unreachable { residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad matrix file: {0}")]
    BadFile(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CsiError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Best iterate carried by a non-converged solve.
#[derive(Clone, PartialEq)]
pub struct BestIterate(pub Vec<num_complex::Complex64>);

impl std::fmt::Debug for BestIterate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BestIterate(len = {})", self.0.len())
    }
}

impl CsiError {
    pub fn at_stage(self, stage: &'static str) -> Self {
        CsiError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CsiError>;
