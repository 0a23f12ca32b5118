//! The model behind a network boundary.
//!
//! A length-prefixed binary protocol (see `docs/protocol.md`) carries
//! inference, stats and describe requests. [`serve`] runs a threaded TCP
//! server around a [`ToyModel`](crate::model::ToyModel); [`RemoteEvalApi`]
//! is the matching client and plugs into the optimizer like the in-process
//! API. Both sides keep a [`TrafficLedger`] of the bytes they move.

mod client;
pub mod codec;
mod ledger;
mod server;

pub use client::RemoteEvalApi;
pub use codec::{CodecError, InferenceRequest, InferenceResponse, Message, PayloadSizes};
pub use ledger::{TrafficLedger, TrafficTotals};
pub use server::{serve, ServerConfig, ServerHandle};
