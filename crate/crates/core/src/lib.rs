//! Three-stream atomistic encoder.
//!
//! A composition stream (element tokens with count-weighted attention), a
//! species-blind structural stream (power-spectrum descriptors plus invariant
//! message passing) and an interaction stream (species-aware message passing)
//! are concatenated per atom and read by energy, force, denoising and masking
//! heads. The crate also carries the self-supervised objectives, training
//! loops, retrieval/probing tools and a numerical verification suite for the
//! energy–force coupling identities.

pub mod analysis;
pub mod autodiff;
pub mod basis;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod ssl;
pub mod structure;
pub mod synth;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Stream, StreamEmbeddings};
pub use structure::{build_graph, compress_composition, AtomicStructure, Composition, NeighborGraph};
