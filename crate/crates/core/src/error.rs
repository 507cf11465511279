use thiserror::Error;

/// Errors raised by the deblurring pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel exceeds image support ({kernel}x{kernel} kernel on {width}x{height} image)")]
    KernelExceedsImage { kernel: usize, width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty image")]
    EmptyImage,
    #[error("invalid image buffer: {0}")]
    InvalidImage(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient resolution for kernel size {kernel_size}: coarsest level would be {width}x{height}")]
    InsufficientResolution { kernel_size: usize, width: usize, height: usize },
    #[error("degenerate output size {width}x{height}")]
    DegenerateOutput { width: usize, height: usize },
    #[error("anchor ({x}, {y}) out of bounds")]
    AnchorOutOfBounds { x: usize, y: usize },
    #[error("kernel solve diverged")]
    KernelSolveDiverged,
    #[error("degenerate data term: sharp image has no gradient energy")]
    DegenerateDataTerm,
    #[error("empty kernel estimate")]
    EmptyKernel,
    #[error("ADMM diverged")]
    AdmmDiverged,
    #[error("non-uniform solve did not converge")]
    NonUniformNotConverged,
    #[error("at level {level}: {source}")]
    AtLevel {
        level: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_level(self, level: usize) -> Self {
        Error::AtLevel { level, source: Box::new(self) }
    }

    /// True for errors caused by invalid user input rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::AtLevel { source, .. } => source.is_input_error(),
            Error::KernelSolveDiverged
            | Error::DegenerateDataTerm
            | Error::EmptyKernel
            | Error::AdmmDiverged
            | Error::NonUniformNotConverged => false,
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
