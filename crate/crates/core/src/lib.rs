//! Preference-pair construction from controlled visual-quality deltas.
//!
//! The crate covers the whole batch pipeline:
//!
//! * [`corpus`]: QA instances, views and response records, plus their
//!   line-delimited JSON manifests.
//! * [`degrade`]: deterministic degradation operators (bilinear downscaling,
//!   Gaussian noise, motion blur).
//! * [`policy`]: response generation through a remote chat-completions
//!   service, a deterministic synthetic policy, or a replay cache.
//! * [`grade`]: answer extraction and exact/tolerance matching.
//! * [`pairs`]: quality-sensitivity classification and preference pair
//!   builders, with DPO-style JSONL export.
//! * [`dpocore`]: a toy context-conditioned policy with the HQ-conditioned
//!   DPO objective, an SFT baseline, analytic gradients and a trainer.
//! * [`analysis`]: resolution sweeps, category distributions, response
//!   length statistics and run comparisons.
//! * [`synthbench`]: a synthetic rendered-table corpus whose answerability
//!   under degradation is known in closed form.
//! * [`config`]: the plain-text key/value format used for run configs and
//!   corpus specs.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod degrade;
pub mod dpocore;
pub mod grade;
pub mod jsonl;
pub mod pairs;
pub mod policy;
pub mod synthbench;

pub use corpus::{DecodeParams, QaInstance, ResponseRecord, ViewSpec};
pub use degrade::Image;
pub use dpocore::{DpoBatch, ToyPolicy};
pub use grade::MetricSpec;
pub use pairs::{Category, PairMode, PreferencePair};
