//! Minimal CPU tensor engine: dense arrays, 3D convolution, reverse-mode
//! autodiff and AdamW. Single-threaded and bitwise deterministic.

pub mod checkpoint;
pub mod conv;
pub mod params;
pub mod tape;
pub mod tensor;

pub use conv::ConvGeom;
pub use params::{collect_grads, AdamW, Bound, Conv, Linear, ParamId, ParamSet};
pub use tape::{softmax_channels, Grads, Tape, Var};
pub use tensor::{Array, Real};
