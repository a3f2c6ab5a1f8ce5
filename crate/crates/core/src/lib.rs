//! Monte Carlo evaluation of in-context learning.
//!
//! For each trial a support set of K training exemplars is drawn, P random
//! orderings of it are scanned prefix by prefix, and eval-set accuracy is
//! recorded after every added exemplar. The analytics turn those records
//! into per-k learning curves and per-exemplar Z-scores; the oracle computes
//! the exact expectation by enumeration for small K.

pub mod analytics;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod fixtures;
pub mod oracle;
pub mod prompting;
pub mod scorer;
pub mod seeding;
