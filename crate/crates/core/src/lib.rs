//! Bit-exact simulator of a memristor crossbar accelerator with selective
//! 1's-complement weight protection.
//!
//! Weights are bit-sliced over `G` crossbar groups per PE. Chosen
//! (block, column) pairs are stored as 1's complements; decoders behind
//! the ADCs undo the transform when given the right keys. Without them an
//! adversary reading the conductances recovers a broken network.
//!
//! - [`tensor`], [`model`]: integer tensors, quantizer, reference VMM, im2col
//! - [`crossbar`]: PE/crossbar programming, segment VMM, shift&add
//! - [`secure_map`]: keys, complement encoding, padding, mapping and de-mapping
//! - [`decoder`]: bias-subtract and sign-flip decoders
//! - [`engine`]: reference and crossbar inference
//! - [`adversary`]: extraction and the random-key / divide-and-conquer attacks
//! - [`report`]: security strength and key-storage accounting
//! - [`formats`]: on-disk JSON formats

pub mod adversary;
pub mod crossbar;
pub mod dataset;
pub mod decoder;
pub mod engine;
pub mod error;
pub mod formats;
pub mod model;
pub mod report;
pub mod secure_map;
pub mod tensor;

pub use crossbar::{CrossbarConfig, CrossbarTile, Scheme};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use model::{Activation, LayerKind, LayerSpec, NetworkModel};
pub use secure_map::{KeyStore, MappedModel, Protection};
pub use tensor::QuantTensor;
