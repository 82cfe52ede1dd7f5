pub mod autodiff;
pub mod conv;
pub mod detection;
pub mod error;
pub mod fft;
pub mod fusion;
pub mod nn;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, ModalityPair, Shape, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/fft.md")]
    pub struct Fft;
    #[doc = include_str!("../../../book/src/convolution.md")]
    pub struct Convolution;
    #[doc = include_str!("../../../book/src/fusion.md")]
    pub struct Fusion;
    #[doc = include_str!("../../../book/src/detection.md")]
    pub struct Detection;
}
