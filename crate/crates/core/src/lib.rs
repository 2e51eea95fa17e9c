//! Token-level reward guided direct preference optimization on exactly
//! enumerable tabular policies.
//!
//! * [`data`]: vocabularies, sequences, preference pairs, synthetic corpora.
//! * [`policy`]: tabular softmax policies with analytic gradients.
//! * [`rewards`]: DPO-induced token rewards and the weight functions `f_w`, `f_l`.
//! * [`losses`]: the weighted preference logit and DPO, SimPO, R-DPO, D²PO, TDPO.
//! * [`theory`]: closed forms and brute-force checks of the underlying identities.
//! * [`train`]: deterministic training loop, two-stage pipeline and metrics.

pub mod data;
pub mod error;
pub mod losses;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod theory;
pub mod train;

pub use error::{LabError, Result};
