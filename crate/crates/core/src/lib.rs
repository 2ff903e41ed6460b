//! Joint image/tag embedding: a feature projector and a word-vector table
//! trained together with sampled objectives, then used to tag images and to
//! retrieve images from text queries in one vector space.

pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod embeddings;
pub mod losses;
pub mod model;
pub mod error;
pub mod eval;
pub mod par;
pub mod sampler;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
