//! Context-aware generative item search.
//!
//! The pipeline turns synthetic e-commerce search logs into a generative
//! retriever:
//!
//! 1. [`corpus`] generates catalogs and search sessions and serializes
//!    user and item context into canonical JSON text.
//! 2. [`embedder`] and [`sidcodec`] map every item to a unique four-token
//!    semantic ID via residual K-Means plus a deduplication code, and build
//!    the prefix trie used for constrained decoding.
//! 3. [`policy`] is a compact autoregressive model over text, reasoning
//!    markers and SID tokens, with exact log-probabilities and gradients.
//! 4. [`rewards`] and [`rgrpo`] implement the reasoning/outcome rewards and
//!    the rank-aware group-relative policy optimizer.
//! 5. [`evolve`] runs alignment pre-training and the alternating RL/SFT
//!    self-evolution loop; [`evalkit`] measures HR@N and NDCG@N.
//! 6. [`config`] and [`cli`] wire the stages into a reproducible command
//!    pipeline.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod evolve;
pub mod policy;
pub mod rewards;
pub mod rgrpo;
pub mod rng;
pub mod sidcodec;

pub use error::{Error, Result};
