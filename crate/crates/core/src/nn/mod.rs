//! Parameter storage, transformer layers and the optimizer.

mod layers;
mod optim;
mod params;

pub use layers::{Block, BlockDims, Linear, RmsNorm, Transformer};
pub use optim::{AdamW, AdamWConfig};
pub use params::{sum_gradients, Bound, ParamId, ParamStore};
