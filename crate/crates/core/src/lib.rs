//! Multi-granularity Vision Fastformer U-Net for binary lesion segmentation.

pub mod attention;
pub mod autograd;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
