//! Detection of cluster-wide task slowdowns.
//!
//! The pipeline turns raw task events into per-slot duration histograms
//! ([`data`]), reconstructs each slot from periodic context with a stack of
//! gated attention layers ([`attention`]), lets a learned transport operator
//! absorb harmless fluctuations ([`transport`]), trains with slot-level trust
//! weights ([`picky`], [`train`]) and flags slots whose expected duration
//! exceeds the reconstruction ([`score`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod data;
pub mod diff;
pub mod io;
pub mod model;
pub mod picky;
pub mod score;
pub mod synth;
pub mod theorem;
pub mod train;
pub mod transport;
