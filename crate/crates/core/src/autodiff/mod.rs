//! Tape-based reverse-mode differentiation and a central-difference checker.
//!
//! ```
//! use fredft::autodiff::Tape;
//! use fredft::tensor::{Shape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0; 4]);
//! ```

mod gradcheck;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_random, kink_free_points, project, projection_weights, GradCheckConfig, GradReport};
pub use tape::{attention_forward, attention_weights, ComplexVar, FftPart, Grads, Tape, Var};

#[cfg(test)]
mod tests;
