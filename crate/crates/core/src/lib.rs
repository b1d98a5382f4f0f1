//! Replay-heavy policy optimization with Gaussian trust weighting of
//! importance ratios in log space.
//!
//! The crate is organised around a few interchangeable strategy families,
//! each behind a trait and selected by name at runtime:
//!
//! * [`surrogate`]: actor-side ratio handling (`gipo`, `ppo_clip`, `sapo`, `no_clip`),
//!   together with the closed-form bound calculators.
//! * [`targets`]: advantage / value-target construction (`gae`, `vtrace`).
//! * [`runtime::env`]: toy environments for the actor-learner pipeline.
//!
//! [`mdp`] evaluates estimators exactly on enumerable MDPs. [`runtime`] runs the
//! actor-learner loop on top of the staleness bookkeeping in [`replay`] and
//! [`diagnostics`].

pub mod diagnostics;
pub mod error;
pub mod mdp;
pub mod policy;
pub mod registry;
pub mod replay;
pub mod runtime;
pub mod stats;
pub mod surrogate;
pub mod targets;
pub mod verify;

pub use error::{Error, Result};
