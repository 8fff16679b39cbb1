//! retrologic: template-based single-step retrosynthesis.
//!
//! Given a product molecule, the engine enumerates candidate reactant sets
//! by applying extracted rewrite rules (retrosynthesis templates) and ranks
//! them with an energy-based conditional model over graph embeddings. The
//! crate is organized along the pipeline:
//!
//! - [`chem`]: molecular graphs, line-notation parsing/writing, canonical
//!   keys, isomorphism oracle
//! - [`pattern`]: subgraph patterns and match enumeration
//! - [`template`]: rule extraction from atom-mapped reactions and rule
//!   application
//! - [`embed`]: structure2vec graph embeddings with exact analytic gradients
//! - [`gln`]: the energy model and its restricted-support distributions
//! - [`train`]: maximum-likelihood training with exact or sampled gradients
//! - [`infer`]: beam-search prediction and top-k exact-match evaluation
//! - [`data`]: dataset ingestion, support caches, corpus statistics
//! - [`cli`]: the `retrologic` command-line surface

pub mod chem;
pub mod cli;
pub mod data;
pub mod embed;
pub mod gln;
pub mod infer;
pub mod pattern;
pub mod template;
pub mod train;
