//! Packet-level traffic classification.
//!
//! Raw captures are turned into fixed-length byte vectors ([`preprocess`]),
//! grouped into labeled, balanced datasets ([`dataset`]) and fed to a small
//! deterministic neural-network engine ([`nn`]) that trains a stacked
//! autoencoder or a 1D convolutional network ([`models`]). [`eval`] turns
//! predictions into per-class metrics, confusion matrices and Ward
//! clusterings of those matrices.

pub mod checksum;
pub mod dataset;
pub mod eval;
pub mod models;
pub mod nn;
pub mod pcap;
pub mod preprocess;
pub mod testing;
