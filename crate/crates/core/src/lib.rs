//! Hypergraph-enhanced recommendation, `no_std` core.
//!
//! Everything in this crate is pure computation over in-memory values:
//! dense and CSR matrices, a small reverse-mode tape, the user/item
//! hypergraph operators, LightGCN propagation, the pretraining objective,
//! graph-prefix construction, a frozen toy decoder with key/value prefix
//! injection, and leave-last-out ranking metrics. File formats, TSV
//! ingestion and the command line live in the `hyperrec` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod encoders;
pub mod error;
pub mod eval;
pub mod graphprefix;
pub mod hypergraph;
pub mod ingest;
pub(crate) mod math;
pub mod numerics;
pub mod pretrain;
pub mod toyllm;

pub use error::{Error, Result};
pub use numerics::{DenseMat, SparseCsr};
