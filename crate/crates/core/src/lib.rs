//! Generative counterfactual evaluators for prescriptive process monitoring.

pub mod bundle;
pub mod diffcore;
pub mod encode;
pub mod evalpipe;
pub mod eventlog;
pub mod experiment;
pub mod gradcheck;
pub mod heads;
pub mod learners;
pub mod nn;
pub mod rng;
pub mod simulate;
pub mod stattests;
pub mod train;
