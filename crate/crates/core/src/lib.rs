//! Desk-scale simulator of ensemble knowledge distillation over federated
//! clients: teachers train on Dirichlet-partitioned private data, exchange
//! temperature-softened labels on a shared public set, and a lightweight
//! student learns from the aggregate, with a FedAvg baseline and byte-level
//! communication accounting alongside.

pub mod checkpoint;
pub mod comms;
pub mod config;
pub mod datasets;
pub mod error;
pub mod fedavg;
pub mod fkd;
pub mod nn;
pub mod partition;
pub mod pgm;
pub mod preprocess;
pub mod report;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;

/// Splits a master seed into an independent stream seed for a named
/// sub-task. Keeps serial and parallel schedules on identical RNG streams.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then splitmix64 finalization.
    let mut h = 0xcbf29ce484222325u64;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = master
        .wrapping_add(h)
        .wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
