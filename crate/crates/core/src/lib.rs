//! Self-supervised prompt learning on a frozen dual encoder.
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration loading
//! and the command line live in the `vlprompt` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod projectors;
pub mod promptlearner;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
