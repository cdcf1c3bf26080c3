//! Masked trajectory modeling at desk scale.
//!
//! One bidirectional encoder-decoder transformer is trained to reconstruct
//! randomly masked `(rtg, state, action)` trajectory segments. Choosing a
//! different mask at inference time turns the same network into a forward
//! dynamics model, an inverse dynamics model, a behaviour-cloning policy or a
//! return-conditioned policy, and its encoder can feed an offline TD3 learner.
//!
//! Module map:
//!
//! * [`envs`]: synthetic environments, scripted data collection, normalized score
//! * [`trajdata`]: trajectories, returns-to-go, normalization, segments, MTMD files
//! * [`masking`]: random, random-autoregressive and capability masks
//! * [`model`]: the masked trajectory model
//! * [`training`]: loss, AdamW, schedule, MTMC checkpoints, the training loop
//! * [`capabilities`]: FD/ID prediction, BC/RCBC/two-stage acting, rollouts
//! * [`reprrl`]: state embeddings and offline TD3

pub mod capabilities;
pub mod envs;
pub mod error;
pub mod masking;
pub mod model;
pub mod reprrl;
pub mod training;
pub mod trajdata;

pub use error::{MtmError, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` of `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
