//! Grouped contrastive learning at desk scale.
//!
//! * [`numerics`]: vector primitives and the seeded random stream.
//! * [`loss`]: pairwise- and centroid-oriented grouped losses, InfoNCE, with
//!   analytic gradients; [`gradcheck`] verifies them numerically.
//! * [`encoder`]: hashed-trigram text features and the two linear towers.
//! * [`forge`]: builds the concept DAG from a captioned corpus.
//! * [`trainer`]: minibatch SGD over groups, checkpoints and resume.
//! * [`eval`]: per-level caption-to-image retrieval and model comparison.

pub mod encoder;
pub mod eval;
pub mod forge;
pub mod gradcheck;
pub mod loss;
pub mod numerics;
pub mod trainer;
