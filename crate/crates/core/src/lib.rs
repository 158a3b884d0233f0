//! Patch-token decoder for RGB plus depth/thermal saliency prediction.
//!
//! Tokens are patch-folded before spatial attention and mixed with a
//! channel-attention view; every kernel records multiply-adds and attention
//! memory through [`instrument`] so closed-form costs can be checked against
//! executed work.

pub mod attention;
pub mod blocks;
pub mod cost;
pub mod error;
pub mod instrument;
pub mod io;
pub mod ptre;
pub mod rng;
pub mod tensor;
pub mod tipp;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
