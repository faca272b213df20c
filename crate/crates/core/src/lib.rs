//! Open-set crowdsourcing engine.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`synth`] builds reproducible multi-source / target domain scenarios.
//! 2. [`adapt`] runs two rounds of adversarial partial domain adaptation on top of
//!    the dense networks in [`nn`], scoring every source class by how likely it is to
//!    exist in the target domain and dropping source domains that share nothing with it.
//! 3. [`open_set`] machine-labels target samples with a weighted class-center rule,
//!    splitting them into labeled and unknown pools.
//! 4. [`crowd`] simulates online workers, routes tasks by worker pool and infers
//!    truth with EM. A weighted-majority-voting baseline lives alongside it.
//!
//! [`pipeline`] wires the stages together and backs the `opencrowd` binary.

pub mod adapt;
pub mod crowd;
mod error;
pub mod nn;
pub mod open_set;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator for one named sub-stream of a run.
///
/// Each stage draws from its own ChaCha stream so adding draws in one stage never
/// perturbs another.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
