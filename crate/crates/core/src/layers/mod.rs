//! Network operators: tile-backed weight layers and digital glue.

pub mod backend;
pub mod conv;
pub mod digital;
pub mod fc;
pub mod zscore;

pub use backend::{AnalogMatrix, FloatMatrix, MatrixBackend, MvmStats};
pub use conv::{col2im, im2col, Conv2d, ConvGeometry};
pub use digital::{argmax_rows, softmax_xent, Flatten, MaxPool, Relu};
pub use fc::FullyConnected;
pub use zscore::{NormMode, ZScoreNorm};
