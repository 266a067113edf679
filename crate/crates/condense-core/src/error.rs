//! Crate-wide error type.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, kernels, network parsing, and the executors.
#[derive(Debug)]
pub enum Error {
    /// Channel index outside the tensor's channel count.
    ChannelOutOfRange { channel: usize, channels: usize },
    /// A block rectangle does not fit inside the tensor plane.
    RegionOutOfBounds {
        origin_y: usize,
        origin_x: usize,
        block_h: usize,
        block_w: usize,
        height: usize,
        width: usize,
    },
    /// Element bit width outside {2, 8, 32}.
    UnsupportedBits(u32),
    /// Narrowing rule incompatible with the target tensor's bit width.
    InvalidNarrowing { bits: u32, rule: &'static str },
    /// Block shape does not match what the operation expects.
    BlockShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    /// Activation quantizer received a NaN or infinite input.
    NonFiniteInput { value: f64 },
    /// Quantizer or pooling parameter out of its valid range.
    InvalidParameter { what: &'static str, value: f64 },
    /// A filter bank channel is identically zero, so no positive binarization
    /// scale exists; store the layer at full precision instead.
    ZeroScaleFilter { channel: usize },
    /// Input channel count does not match the layer parameters.
    ChannelMismatch { expected: usize, got: usize },
    /// Kernel extent is even or larger than the supported 7x7 maximum.
    UnsupportedKernel { kernel: usize },
    /// Channel count is not divisible by the cross-channel pooling factor.
    ChannelsNotDivisible { channels: usize, alpha: usize },
    /// Pooling trace does not match the gradient shape it is applied to.
    TraceMismatch { detail: String },
    /// Operation is not defined for the layer's weight scheme.
    UnsupportedMode { op: &'static str, detail: &'static str },
    /// Network text could not be parsed; line numbers are 1-based.
    Parse { line: usize, message: String },
    /// A binary file header or payload is malformed.
    Format { message: String },
    /// Weight data does not match the network topology; `layer` is the index
    /// of the first offending convolution layer.
    LayerShapeMismatch { layer: usize, message: String },
    /// Input tensor does not match the network's input specification.
    InputMismatch { message: String },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ChannelOutOfRange { channel, channels } => {
                write!(f, "channel {channel} out of range (tensor has {channels} channels)")
            }
            Error::RegionOutOfBounds { origin_y, origin_x, block_h, block_w, height, width } => {
                write!(
                    f,
                    "block {block_h}x{block_w} at ({origin_y},{origin_x}) exceeds {height}x{width} plane"
                )
            }
            Error::UnsupportedBits(bits) => {
                write!(f, "unsupported element bit width {bits} (expected 2, 8, or 32)")
            }
            Error::InvalidNarrowing { bits, rule } => {
                write!(f, "narrowing rule `{rule}` is not valid for {bits}-bit elements")
            }
            Error::BlockShapeMismatch { expected, got } => {
                write!(f, "block shape mismatch: expected {}x{}, got {}x{}", expected.0, expected.1, got.0, got.1)
            }
            Error::NonFiniteInput { value } => write!(f, "non-finite input {value}"),
            Error::InvalidParameter { what, value } => {
                write!(f, "invalid {what}: {value}")
            }
            Error::ZeroScaleFilter { channel } => {
                write!(
                    f,
                    "output channel {channel} has an all-zero filter; binarization scale would be 0, keep this layer at full precision"
                )
            }
            Error::ChannelMismatch { expected, got } => {
                write!(f, "input channel mismatch: layer expects {expected}, tensor has {got}")
            }
            Error::UnsupportedKernel { kernel } => {
                write!(f, "unsupported kernel extent {kernel} (must be odd and at most 7)")
            }
            Error::ChannelsNotDivisible { channels, alpha } => {
                write!(f, "{channels} channels not divisible by cross-channel window {alpha}")
            }
            Error::TraceMismatch { detail } => write!(f, "pooling trace mismatch: {detail}"),
            Error::UnsupportedMode { op, detail } => write!(f, "{op} is not supported: {detail}"),
            Error::Parse { line, message } => write!(f, "line {line}: {message}"),
            Error::Format { message } => write!(f, "malformed file: {message}"),
            Error::LayerShapeMismatch { layer, message } => {
                write!(f, "conv layer {layer}: {message}")
            }
            Error::InputMismatch { message } => write!(f, "input mismatch: {message}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
