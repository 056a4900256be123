//! Stock-series pre-training laboratory: market data preparation, a small
//! transformer encoder with task heads, pre-training and fine-tuning loops,
//! a top-k backtester and a geometric Brownian motion simulation lab.

pub mod backtest;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod finetune;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod runlog;
pub mod simlab;

pub use error::{Result, SsptError};

/// Derives an independent seed for a sub-stream (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
