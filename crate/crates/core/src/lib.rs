//! Leakage-aware evaluation of conversational recommender systems with
//! simulated users.
//!
//! A run pairs each annotated seed conversation with a CRS agent and a user
//! simulator, records full transcripts, then audits them for target titles
//! leaking through the seed history or the simulator's replies before
//! computing Recall@k under each exclusion scenario.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod crslink;
pub mod engine;
pub mod intent;
pub mod lmcore;
pub mod metrics;
pub mod simulator;
pub mod textaudit;
