use crate::tensor::Shape;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: Shape, got: Shape },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("input channels {got} do not match layer input channels {expected}")]
    Channels { expected: usize, got: usize },
    #[error("spatial size {h}x{w} too small for kernel {kernel} with padding {padding}")]
    TooSmall {
        h: usize,
        w: usize,
        kernel: usize,
        padding: usize,
    },
    #[error("parameter buffer length {got} does not match expected {expected}")]
    ParamLength { expected: usize, got: usize },
}
