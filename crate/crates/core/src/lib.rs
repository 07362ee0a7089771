//! A self-evolving agent harness: skill matching and injection, a ReAct
//! runtime with context compression, and an offline loop that turns finished
//! sessions into profile, memory and skill updates.

pub mod cli;
pub mod config;
pub mod context;
pub mod defaults;
pub mod error;
pub mod evolution;
pub mod fsio;
pub mod matcher;
pub mod message;
pub mod provider;
pub mod replay;
pub mod runtime;
pub mod service;
pub mod session_log;
pub mod skills;
pub mod soak;
pub mod tools;
pub mod workspace;

pub use error::{Error, ProviderError, Result};
