//! Caption-vocabulary laboratory: a small feature-conditioned caption
//! generator, self-critical RL training that narrows its output vocabulary,
//! and classifier-only fine-tuning (plain cross-entropy or a bias-product
//! loss against a frozen copy) that widens it again.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod finetune;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rl;

pub use error::{Error, Result};
