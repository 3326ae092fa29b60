//! Laboratory for studying when invariant risk minimization is circumvented by
//! strongly spurious, domain-predictive features.
//!
//! The crate is organised bottom-up:
//!
//! * [`spec`] describes the discrete causal model of a multi-environment dataset
//!   (label prior per environment, colour table per label and environment).
//! * [`oracle`] computes exact Bayes posteriors and the accuracies of the
//!   deterministic majority-vote classifiers built on each feature family.
//! * [`sampler`] draws finite, seeded datasets from a spec.
//! * [`penalty`] and [`cdm`] hold the risk, invariance and conditional
//!   distribution matching objectives together with their gradients.
//! * [`nn`] and [`train`] implement a small feed-forward model trained with
//!   manual reverse-mode differentiation.
//! * [`diagnostics`] probes learned representations for domain leakage.
//! * [`experiments`] wires everything into reproducible sweeps that write CSV.

pub mod cdm;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod oracle;
pub mod penalty;
pub mod rng;
pub mod sampler;
pub mod spec;
pub mod train;

pub use error::{Error, Result};
pub use spec::{Color, DatasetSpec, EnvRole, EnvironmentSpec, InterpolationParams, Label};
