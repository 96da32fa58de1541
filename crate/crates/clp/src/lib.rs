//! Self-supervised representation learning for facial action units.
//!
//! The toolkit pretrains a frame encoder on unlabeled video with two
//! complementary signals and then measures the learned representation with a
//! frozen-encoder linear probe:
//!
//! * **Temporal ordering** ([`tcl`]): within a strided window of frames,
//!   weighted triplet losses demand that frames closer to the window's ends
//!   stay closer in embedding space, in both time directions.
//! * **Cross-identity reconstruction** ([`cir`]): a query frame's embedding
//!   is rebuilt as a soft combination over a FIFO memory of other videos'
//!   embeddings (produced by a momentum-updated target encoder) and the
//!   reconstruction is pulled toward the query's own key against negatives
//!   drawn from the same memory.
//!
//! [`synth`] generates a small fully labeled corpus with known latent
//! structure so the whole pipeline runs end to end without external data;
//! [`probe`] implements the per-label linear evaluation; [`trainer`] ties
//! the losses together with checkpointing that resumes bit-exactly.

pub mod cir;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod image;
pub mod nn;
pub mod probe;
pub mod report;
pub mod run;
pub mod synth;
pub mod tcl;
pub mod trainer;

pub use config::Config;
pub use error::{ClpError, Result};
