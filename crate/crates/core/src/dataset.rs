//! QA dataset loading.
//!
//! One JSON object per line:
//!
//! ```text
//! {"sample_id": "s1", "question": "...", "anchor_entities": ["Chicago"],
//!  "gold_answers": ["Springfield"],
//!  "triples": [{"head": "...", "relation": "...", "tail": "..."}],   // inline graph, or
//!  "graph": "shared.tsv",                                             // a graph reference
//!  "gold_paths": [{"nodes": [...], "edges": [...]}]}                  // optional
//! ```
//!
//! Rows that reference the same graph share one loaded value.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{load_triples, KnowledgeGraph, ReasoningPath, Triple, TripleFormat};
use crate::protocol::normalize;

#[derive(Debug, Clone)]
pub struct QASample {
    pub sample_id: String,
    pub question: String,
    pub anchor_entities: Vec<String>,
    /// Deduplicated under answer normalization, first spelling kept.
    pub gold_answers: Vec<String>,
    pub graph: Arc<KnowledgeGraph>,
    pub gold_paths: Vec<ReasoningPath>,
}

impl QASample {
    /// Normalized gold answer set used by every metric.
    pub fn gold_set(&self) -> BTreeSet<String> {
        self.gold_answers.iter().map(|a| normalize(a)).collect()
    }

    pub fn to_row(&self) -> QaRow {
        QaRow {
            sample_id: self.sample_id.clone(),
            question: self.question.clone(),
            anchor_entities: self.anchor_entities.clone(),
            gold_answers: self.gold_answers.clone(),
            triples: Some(self.graph.triples().iter().cloned().collect()),
            graph: None,
            gold_paths: self.gold_paths.clone(),
        }
    }
}

/// Wire form of one dataset line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaRow {
    pub sample_id: String,
    pub question: String,
    pub anchor_entities: Vec<String>,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triples: Option<Vec<Triple>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_paths: Vec<ReasoningPath>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line {line}{}: {reason}", sample_id.as_ref().map(|s| format!(" (sample {s})")).unwrap_or_default())]
pub struct SampleRejection {
    pub line: usize,
    pub sample_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct DatasetLoad {
    pub samples: Vec<QASample>,
    pub rejected: Vec<SampleRejection>,
}

impl DatasetLoad {
    /// Fails on the first rejection; for callers that need the whole file valid.
    pub fn into_strict(self) -> Result<Vec<QASample>, SampleRejection> {
        match self.rejected.into_iter().next() {
            Some(r) => Err(r),
            None => Ok(self.samples),
        }
    }
}

#[derive(Debug, Default)]
pub struct DatasetLoader {
    base_dir: Option<PathBuf>,
    graphs: HashMap<String, Arc<KnowledgeGraph>>,
}

impl DatasetLoader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Directory against which relative graph references resolve.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    /// Makes `name` resolvable as a graph reference without touching the filesystem.
    pub fn register_graph(&mut self, name: impl Into<String>, graph: Arc<KnowledgeGraph>) {
        self.graphs.insert(name.into(), graph);
    }

    pub fn load<R: BufRead>(&mut self, source: R) -> DatasetLoad {
        let mut out = DatasetLoad::default();
        let mut seen_ids = HashSet::new();
        for (idx, line) in source.lines().enumerate() {
            let line_no = idx + 1;
            let reject = |sample_id: Option<String>, reason: String| SampleRejection { line: line_no, sample_id, reason };
            let text = match line {
                Ok(t) => t,
                Err(e) => {
                    out.rejected.push(reject(None, e.to_string()));
                    continue;
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            let row: QaRow = match serde_json::from_str(&text) {
                Ok(r) => r,
                Err(e) => {
                    let id = serde_json::from_str::<serde_json::Value>(&text)
                        .ok()
                        .and_then(|v| v.get("sample_id").and_then(|s| s.as_str()).map(str::to_owned));
                    out.rejected.push(reject(id, e.to_string()));
                    continue;
                }
            };
            let id = row.sample_id.clone();
            if !seen_ids.insert(id.clone()) {
                out.rejected.push(reject(Some(id), "duplicate sample_id".into()));
                continue;
            }
            match self.materialize(row) {
                Ok(sample) => out.samples.push(sample),
                Err(reason) => out.rejected.push(reject(Some(id), reason)),
            }
        }
        out
    }

    /// Like [`load`](Self::load) for rows that are already decoded; `line`
    /// in rejections is the 1-based row index.
    pub fn load_rows(&mut self, rows: impl IntoIterator<Item = QaRow>) -> DatasetLoad {
        let mut out = DatasetLoad::default();
        let mut seen_ids = HashSet::new();
        for (idx, row) in rows.into_iter().enumerate() {
            let id = row.sample_id.clone();
            let reject = |reason: String| SampleRejection { line: idx + 1, sample_id: Some(id.clone()), reason };
            if !seen_ids.insert(id.clone()) {
                out.rejected.push(reject("duplicate sample_id".into()));
                continue;
            }
            match self.materialize(row) {
                Ok(sample) => out.samples.push(sample),
                Err(reason) => out.rejected.push(reject(reason)),
            }
        }
        out
    }

    fn materialize(&mut self, row: QaRow) -> Result<QASample, String> {
        if row.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        let graph = match (row.triples, row.graph) {
            (Some(_), Some(_)) => return Err("both inline triples and a graph reference given".into()),
            (None, None) => return Err("missing field `triples` or `graph`".into()),
            (Some(triples), None) => Arc::new(KnowledgeGraph::from_triples(triples).map_err(|e| e.to_string())?),
            (None, Some(reference)) => self.resolve(&reference)?,
        };
        if row.anchor_entities.is_empty() {
            return Err("anchor_entities is empty".into());
        }
        for anchor in &row.anchor_entities {
            if !graph.contains_entity(anchor) {
                return Err(format!("anchor entity {anchor:?} is not in the sample graph"));
            }
        }
        let mut seen = HashSet::new();
        let gold_answers: Vec<String> = row
            .gold_answers
            .into_iter()
            .filter(|a| {
                let n = normalize(a);
                !n.is_empty() && seen.insert(n)
            })
            .collect();
        if gold_answers.is_empty() {
            return Err("gold_answers is empty".into());
        }
        for (i, path) in row.gold_paths.iter().enumerate() {
            path.validate(&graph).map_err(|e| format!("gold path {i}: {e}"))?;
        }
        Ok(QASample {
            sample_id: row.sample_id,
            question: row.question,
            anchor_entities: row.anchor_entities,
            gold_answers,
            graph,
            gold_paths: row.gold_paths,
        })
    }

    fn resolve(&mut self, reference: &str) -> Result<Arc<KnowledgeGraph>, String> {
        if let Some(g) = self.graphs.get(reference) {
            return Ok(Arc::clone(g));
        }
        let path = match &self.base_dir {
            Some(dir) => dir.join(reference),
            None => PathBuf::from(reference),
        };
        let graph = Arc::new(load_graph_file(&path).map_err(|e| format!("graph {reference:?}: {e}"))?);
        self.graphs.insert(reference.to_owned(), Arc::clone(&graph));
        Ok(graph)
    }
}

/// Loads a triple file; `.jsonl` selects the JSON-lines format, anything else is TSV.
pub fn load_graph_file(path: &Path) -> Result<KnowledgeGraph, Box<dyn std::error::Error + Send + Sync>> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => TripleFormat::Jsonl,
        _ => TripleFormat::Tsv,
    };
    let file = File::open(path)?;
    Ok(load_triples(BufReader::new(file), format)?)
}

/// Loads a dataset with inline graphs or registered references only.
pub fn load_qa_dataset<R: BufRead>(source: R) -> DatasetLoad {
    DatasetLoader::new().load(source)
}
