//! Knowledge-graph question answering environment.
//!
//! An agent answers questions over a knowledge graph by issuing one-hop
//! retrieval actions across a bounded number of dialogue turns. This crate
//! holds the graph store, the retrieval actions, the dialogue grammar, the
//! rollout driver, verifiable rewards, group-relative credit assignment and
//! batch evaluation.

pub mod credit;
pub mod dataset;
pub mod eval;
pub mod graph;
pub mod jsonl;
pub mod protocol;
pub mod retrieval;
pub mod reward;
pub mod rollout;
pub mod synth;

pub use dataset::{load_qa_dataset, DatasetLoader, QASample};
pub use graph::{load_triples, KnowledgeGraph, ReasoningPath, Triple, TripleFormat};
