//! Event-level video/text feature processing over precomputed embeddings.
//!
//! - [`cluster`]: Ward clustering of frames into contiguous pseudo-events
//! - [`retrieval`]: cosine top-k sentence retrieval per pseudo-event
//! - [`fusion`]: query-guided attention fusion with an analytic backward pass
//! - [`matching`]: Hungarian matching and the set-prediction loss
//! - [`evaluation`]: precision/recall/F1 at temporal IoU thresholds
//! - [`pipeline`] and [`synthetic`]: orchestration and seeded test data
//!
//! Features travel as `TSEM` files, see [`tensorio`].

pub mod cluster;
pub mod error;
pub mod evaluation;
pub mod events_io;
pub mod fusion;
pub mod matching;
pub mod par;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;
pub mod tensorio;

pub use error::{Error, Result};
pub use par::Execution;
pub use tensorio::FeatureMatrix;
