//! HTTP retrieval service, a blocking client that plugs into the episode
//! driver as an [`Executor`](kgenv_core::protocol::Executor), and a remote
//! completion-endpoint policy.

pub mod client;
pub mod policy;
pub mod server;
pub mod wire;

pub use client::{ClientError, KgClient, RemoteExecutor, RemoteGraphs};
pub use policy::{RemotePolicy, SamplingParams};
pub use server::{Backend, BackendError, ServerConfig, ServerHandle};
pub use wire::{RetrieveRequest, RetrieveResponse};
