//! Directed labeled triple store with head and tail adjacency indexes.
//!
//! Labels are compared byte-exact. The store is immutable once built; all
//! collections are ordered so iteration (and anything rendered from it) is
//! deterministic.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: empty {field} field")]
    EmptyField { line: usize, field: &'static str },
    #[error("input is not valid UTF-8 at line {line}")]
    Encoding { line: usize },
    #[error("io error: {0}")]
    Io(String),
    #[error("triple has an empty {0} label")]
    EmptyLabel(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripleFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for TripleFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown triple format {other:?} (expected tsv or jsonl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self { head: head.into(), relation: relation.into(), tail: tail.into() }
    }
}

type Adjacency = BTreeMap<String, BTreeMap<String, BTreeSet<String>>>;

/// An immutable knowledge graph.
///
/// `head_index` maps an entity to its outgoing `(relation, tail)` pairs and
/// `tail_index` maps an entity to its incoming `(relation, head)` pairs, both
/// grouped by relation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: BTreeSet<String>,
    relations: BTreeSet<String>,
    triples: BTreeSet<Triple>,
    head_index: Adjacency,
    tail_index: Adjacency,
}

impl KnowledgeGraph {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a graph from triples. Duplicates collapse; self-loops are kept.
    pub fn from_triples<I>(triples: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = Triple>,
    {
        let mut graph = Self::default();
        for triple in triples {
            if triple.head.is_empty() {
                return Err(GraphError::EmptyLabel("head"));
            }
            if triple.relation.is_empty() {
                return Err(GraphError::EmptyLabel("relation"));
            }
            if triple.tail.is_empty() {
                return Err(GraphError::EmptyLabel("tail"));
            }
            graph.insert(triple);
        }
        Ok(graph)
    }

    fn insert(&mut self, triple: Triple) {
        if self.triples.contains(&triple) {
            return;
        }
        self.entities.insert(triple.head.clone());
        self.entities.insert(triple.tail.clone());
        self.relations.insert(triple.relation.clone());
        self.head_index
            .entry(triple.head.clone())
            .or_default()
            .entry(triple.relation.clone())
            .or_default()
            .insert(triple.tail.clone());
        self.tail_index
            .entry(triple.tail.clone())
            .or_default()
            .entry(triple.relation.clone())
            .or_default()
            .insert(triple.head.clone());
        self.triples.insert(triple);
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains_entity(&self, entity: &str) -> bool {
        self.entities.contains(entity)
    }

    pub fn contains_relation(&self, relation: &str) -> bool {
        self.relations.contains(relation)
    }

    pub fn contains_triple(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.head_index
            .get(head)
            .and_then(|by_rel| by_rel.get(relation))
            .is_some_and(|tails| tails.contains(tail))
    }

    /// Outgoing edges of `head`, grouped by relation.
    pub fn outgoing(&self, head: &str) -> Option<&BTreeMap<String, BTreeSet<String>>> {
        self.head_index.get(head)
    }

    /// Incoming edges of `tail`, grouped by relation.
    pub fn incoming(&self, tail: &str) -> Option<&BTreeMap<String, BTreeSet<String>>> {
        self.tail_index.get(tail)
    }

    /// Rebuilds the triple set from `head_index` alone.
    pub fn triples_from_head_index(&self) -> BTreeSet<Triple> {
        self.head_index
            .iter()
            .flat_map(|(h, by_rel)| {
                by_rel.iter().flat_map(move |(r, tails)| tails.iter().map(move |t| Triple::new(h, r, t)))
            })
            .collect()
    }

    /// Rebuilds the triple set from `tail_index` alone.
    pub fn triples_from_tail_index(&self) -> BTreeSet<Triple> {
        self.tail_index
            .iter()
            .flat_map(|(t, by_rel)| {
                by_rel.iter().flat_map(move |(r, heads)| heads.iter().map(move |h| Triple::new(h, r, t)))
            })
            .collect()
    }

    /// Returns the subgraph induced by every entity within undirected
    /// distance `radius` of a seed. Seeds absent from the graph are skipped.
    pub fn extract_subgraph<'a, I>(&self, seeds: I, radius: usize) -> KnowledgeGraph
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for seed in seeds {
            if let Some(label) = self.entities.get(seed) {
                if dist.insert(label.as_str(), 0).is_none() {
                    queue.push_back(label.as_str());
                }
            }
        }
        while let Some(node) = queue.pop_front() {
            let d = dist[node];
            if d == radius {
                continue;
            }
            let out = self.head_index.get(node).into_iter().flat_map(|m| m.values()).flatten();
            let inc = self.tail_index.get(node).into_iter().flat_map(|m| m.values()).flatten();
            for next in out.chain(inc) {
                if !dist.contains_key(next.as_str()) {
                    dist.insert(next.as_str(), d + 1);
                    queue.push_back(next.as_str());
                }
            }
        }

        let mut sub = KnowledgeGraph::default();
        for entity in dist.keys() {
            let Some(by_rel) = self.head_index.get(*entity) else { continue };
            for (rel, tails) in by_rel {
                for tail in tails {
                    if dist.contains_key(tail.as_str()) {
                        sub.insert(Triple::new(*entity, rel.as_str(), tail.as_str()));
                    }
                }
            }
        }
        sub
    }

    /// Writes all triples in sorted order.
    pub fn write_triples<W: Write>(&self, mut out: W, format: TripleFormat) -> std::io::Result<()> {
        for t in &self.triples {
            match format {
                TripleFormat::Tsv => writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail)?,
                TripleFormat::Jsonl => {
                    serde_json::to_writer(&mut out, t)?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    /// Returns a copy of the graph with every label passed through the given maps.
    pub fn relabel<E, R>(&self, mut entity: E, mut relation: R) -> KnowledgeGraph
    where
        E: FnMut(&str) -> String,
        R: FnMut(&str) -> String,
    {
        let mut out = KnowledgeGraph::default();
        for t in &self.triples {
            out.insert(Triple::new(entity(&t.head), relation(&t.relation), entity(&t.tail)));
        }
        out
    }
}

/// Reads triples from a byte stream. Empty input yields the empty graph.
pub fn load_triples<R: BufRead>(source: R, format: TripleFormat) -> Result<KnowledgeGraph, GraphError> {
    let mut triples = Vec::new();
    for (idx, line) in source.split(b'\n').enumerate() {
        let line_no = idx + 1;
        let bytes = line.map_err(|e| GraphError::Io(e.to_string()))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| GraphError::Encoding { line: line_no })?;
        let text = text.strip_suffix('\r').unwrap_or(text);
        if text.trim().is_empty() {
            continue;
        }
        let triple = match format {
            TripleFormat::Tsv => parse_tsv_row(text, line_no)?,
            TripleFormat::Jsonl => parse_jsonl_row(text, line_no)?,
        };
        triples.push(triple);
    }
    KnowledgeGraph::from_triples(triples)
}

fn parse_tsv_row(text: &str, line: usize) -> Result<Triple, GraphError> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != 3 {
        return Err(GraphError::MalformedRow {
            line,
            reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    check_fields(line, fields[0], fields[1], fields[2])?;
    Ok(Triple::new(fields[0], fields[1], fields[2]))
}

fn parse_jsonl_row(text: &str, line: usize) -> Result<Triple, GraphError> {
    #[derive(Deserialize)]
    struct Row {
        head: String,
        relation: String,
        tail: String,
    }
    let row: Row = serde_json::from_str(text)
        .map_err(|e| GraphError::MalformedRow { line, reason: e.to_string() })?;
    check_fields(line, &row.head, &row.relation, &row.tail)?;
    Ok(Triple::new(row.head, row.relation, row.tail))
}

fn check_fields(line: usize, head: &str, relation: &str, tail: &str) -> Result<(), GraphError> {
    for (field, value) in [("head", head), ("relation", relation), ("tail", tail)] {
        if value.is_empty() {
            return Err(GraphError::EmptyField { line, field });
        }
    }
    Ok(())
}

/// A chain `e0 -r1-> e1 -r2-> ... -rl-> el`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub nodes: Vec<String>,
    pub edges: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("path has {nodes} nodes but {edges} edges")]
    Shape { nodes: usize, edges: usize },
    #[error("hop {hop} ({head}, {relation}, {tail}) is not a triple of the graph")]
    MissingTriple { hop: usize, head: String, relation: String, tail: String },
    #[error("path start {0:?} is not an entity of the graph")]
    MissingStart(String),
}

impl ReasoningPath {
    pub fn single(entity: impl Into<String>) -> Self {
        Self { nodes: vec![entity.into()], edges: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn start(&self) -> &str {
        &self.nodes[0]
    }

    pub fn end(&self) -> &str {
        self.nodes.last().expect("validated path has at least one node")
    }

    pub fn hops(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.edges
            .iter()
            .enumerate()
            .map(|(i, r)| (self.nodes[i].as_str(), r.as_str(), self.nodes[i + 1].as_str()))
    }

    pub fn validate(&self, graph: &KnowledgeGraph) -> Result<(), PathError> {
        if self.nodes.len() != self.edges.len() + 1 {
            return Err(PathError::Shape { nodes: self.nodes.len(), edges: self.edges.len() });
        }
        if !graph.contains_entity(self.start()) {
            return Err(PathError::MissingStart(self.start().to_owned()));
        }
        for (hop, (h, r, t)) in self.hops().enumerate() {
            if !graph.contains_triple(h, r, t) {
                return Err(PathError::MissingTriple {
                    hop: hop + 1,
                    head: h.to_owned(),
                    relation: r.to_owned(),
                    tail: t.to_owned(),
                });
            }
        }
        Ok(())
    }

    /// Shortest directed path from any of `starts` to any of `goals`.
    pub fn shortest<'a>(
        graph: &KnowledgeGraph,
        starts: impl IntoIterator<Item = &'a str>,
        goals: &BTreeSet<&str>,
    ) -> Option<ReasoningPath> {
        let mut parent: BTreeMap<&str, Option<(&str, &str)>> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for s in starts {
            if let Some(label) = graph.entities.get(s) {
                if parent.insert(label.as_str(), None).is_none() {
                    queue.push_back(label.as_str());
                }
            }
        }
        while let Some(node) = queue.pop_front() {
            if goals.contains(node) {
                let mut nodes = vec![node.to_owned()];
                let mut edges = Vec::new();
                let mut cur = node;
                while let Some(Some((prev, rel))) = parent.get(cur) {
                    nodes.push((*prev).to_owned());
                    edges.push((*rel).to_owned());
                    cur = prev;
                }
                nodes.reverse();
                edges.reverse();
                return Some(ReasoningPath { nodes, edges });
            }
            if let Some(by_rel) = graph.head_index.get(node) {
                for (rel, tails) in by_rel {
                    for tail in tails {
                        if !parent.contains_key(tail.as_str()) {
                            parent.insert(tail.as_str(), Some((node, rel.as_str())));
                            queue.push_back(tail.as_str());
                        }
                    }
                }
            }
        }
        None
    }
}
