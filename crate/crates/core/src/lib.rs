//! Conversational information gain over multi-party transcripts.

pub mod annotation;
pub mod context;
pub mod error;
pub mod gateway;
pub mod memory;
pub mod pipeline;
pub mod prompts;
pub mod proxies;
pub mod rating;
pub mod segmentation;
pub mod stats;
pub mod text;
pub mod transcript;

pub use error::{Error, Result};
