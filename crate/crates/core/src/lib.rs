//! Multi-resolution regional descriptors with unsupervised regional
//! attention, and an exact retrieval/evaluation engine for trademark search.
//!
//! Pipeline per image: [`backbone`] feature maps at several input sizes,
//! [`region`] grid, [`pooling`], [`whitening`], [`attention`] weights,
//! summed by [`aggregate`]. [`retrieval`] ranks galleries and scores them.

pub mod aggregate;
pub mod attention;
pub mod backbone;
pub mod error;
pub mod pipeline;
pub mod pooling;
pub mod region;
pub mod retrieval;
pub mod synthetic;
pub mod tensor_io;
pub mod whitening;

pub use error::{Error, Result};
