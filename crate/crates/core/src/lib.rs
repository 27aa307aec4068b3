//! Evaluation toolkit for census disclosure-avoidance mechanisms.
//!
//! The crate builds a synthetic confidential population, releases block-level
//! tables through either household swapping or a geometric-noise mechanism,
//! and measures what each release does to
//!
//! * race inference (BISG error rates and disclosure risk), and
//! * redistricting utility (district population deviations).
//!
//! Stages are plain functions over immutable inputs. Randomness always comes
//! from [`rng::stream`], so every output is a pure function of its inputs and
//! seed, independent of the thread count. With the default `parallel` feature
//! the hot loops run on rayon; without it the same code runs sequentially.

pub mod bisg;
pub mod dp_das;
pub mod error;
pub mod par;
pub mod pipeline;
pub mod policy_eval;
pub mod race;
pub mod reference;
pub mod risk;
pub mod rng;
pub mod swap;
pub mod synth_pop;
pub mod tabulate;

pub use error::{Error, Result};
pub use race::{Race, RaceVec, N_RACES};
