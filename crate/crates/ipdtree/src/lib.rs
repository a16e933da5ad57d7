//! Subgroup discovery for pooled randomized-trial data.
//!
//! The library identifies patient subgroups with differential treatment
//! effects from individual-participant data pooled across several randomized
//! trials. The core engine is model-based recursive partitioning: a small
//! parametric outcome model is fit in each tree node, per-observation score
//! contributions are tested for instability along candidate splitting
//! variables, and the node is split where the evidence is strongest. Around
//! that engine sit several strategies for handling between-trial
//! heterogeneity — stratified trial intercepts inside the node model, random
//! intercepts or random treatment effects estimated by an alternating
//! tree/mixed-model loop, and fixed trial intercepts estimated jointly with
//! the tree.
//!
//! Module map:
//! - [`dataset`]: typed columns, CSV ingestion, row subsetting.
//! - [`linreg`]: ordinary least squares with score contributions and Wald
//!   inference.
//! - [`mixed`]: profiled-REML linear mixed models with trial-level random
//!   intercepts and/or random treatment slopes.
//! - [`stability`]: parameter-instability tests and Bonferroni variable
//!   selection.
//! - [`mobtree`]: the recursive-partitioning engine.
//! - [`glmmtree`]: alternating tree/global-model estimation.
//! - [`methods`]: named method bindings and pooled-analysis models.
//! - [`synthgen`]: deterministic synthetic data generator with scenario
//!   library.
//! - [`rng`]: counter-based random number generation backing the generator.

pub mod dataset;
pub mod glmmtree;
pub mod linreg;
pub mod methods;
pub mod mixed;
pub mod mobtree;
pub mod rng;
pub mod stability;
pub mod synthgen;
