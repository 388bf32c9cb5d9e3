//! Random graphs, paths, QA fixtures and label bijections for tests and
//! benchmarks. Everything is driven by a caller-supplied RNG.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::QASample;
use crate::graph::{KnowledgeGraph, ReasoningPath, Triple};
use crate::retrieval::{ActionCall, ActionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphShape {
    pub nodes: usize,
    pub edges: usize,
    pub relations: usize,
    /// Relation names of the form `domain.type.property`.
    pub dotted_relations: bool,
}

impl Default for GraphShape {
    fn default() -> Self {
        Self { nodes: 40, edges: 120, relations: 8, dotted_relations: false }
    }
}

pub fn entity_label(i: usize) -> String {
    format!("e{i}")
}

pub fn relation_label(i: usize, dotted: bool) -> String {
    if dotted {
        format!("d{}.t{}.p{i}", i % 3, i % 5)
    } else {
        format!("r{i}")
    }
}

/// A random directed multigraph. Self-loops are allowed and only nodes
/// touched by some edge appear.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, shape: GraphShape) -> KnowledgeGraph {
    assert!(shape.nodes > 0 && shape.relations > 0, "graph shape needs nodes and relations");
    let triples = (0..shape.edges.max(1)).map(|_| {
        Triple::new(
            entity_label(rng.gen_range(0..shape.nodes)),
            relation_label(rng.gen_range(0..shape.relations), shape.dotted_relations),
            entity_label(rng.gen_range(0..shape.nodes)),
        )
    });
    KnowledgeGraph::from_triples(triples).expect("generated labels are non-empty")
}

/// A random directed walk of up to `max_len` hops from a random entity.
/// The walk stops early at a node without outgoing edges.
pub fn random_path<R: Rng + ?Sized>(rng: &mut R, graph: &KnowledgeGraph, max_len: usize) -> Option<ReasoningPath> {
    let entities: Vec<&String> = graph.entities().iter().collect();
    let start = (*entities.choose(rng)?).clone();
    let target = rng.gen_range(0..=max_len);
    let mut path = ReasoningPath::single(start);
    while path.len() < target {
        let Some(out) = graph.outgoing(path.end()) else { break };
        let edges: Vec<(&String, &String)> = out.iter().flat_map(|(r, ts)| ts.iter().map(move |t| (r, t))).collect();
        let Some((r, t)) = edges.choose(rng) else { break };
        path.edges.push((*r).clone());
        path.nodes.push((*t).clone());
    }
    Some(path)
}

/// `count` single-answer samples, each on its own random graph, whose gold
/// answer is the end of a random walk of 1..=`max_path_len` hops.
pub fn synthetic_dataset<R: Rng + ?Sized>(rng: &mut R, count: usize, shape: GraphShape, max_path_len: usize) -> Vec<QASample> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let graph = random_graph(rng, shape);
        let Some(path) = random_path(rng, &graph, max_path_len) else { continue };
        if path.is_empty() {
            continue;
        }
        let hops: Vec<&str> = path.edges.iter().map(String::as_str).collect();
        out.push(QASample {
            sample_id: format!("synth-{}", out.len()),
            question: format!("Which entity is reached from {} by following {}", path.start(), hops.join(" then ")),
            anchor_entities: vec![path.start().to_owned()],
            gold_answers: vec![path.end().to_owned()],
            graph: Arc::new(graph),
            gold_paths: vec![path],
        });
    }
    out
}

/// A random one-to-one renaming of every entity and relation label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBijection {
    pub entities: BTreeMap<String, String>,
    pub relations: BTreeMap<String, String>,
}

impl LabelBijection {
    /// Fresh labels contain no whitespace or punctuation, so whitespace token
    /// counts and answer normalization are unaffected by the renaming.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, graph: &KnowledgeGraph) -> Self {
        fn permuted<R: Rng + ?Sized>(rng: &mut R, keys: impl ExactSizeIterator<Item = String>, prefix: &str) -> BTreeMap<String, String> {
            let mut ids: Vec<usize> = (0..keys.len()).collect();
            ids.shuffle(rng);
            keys.zip(ids).map(|(k, i)| (k, format!("{prefix}{i:04}"))).collect()
        }
        let entities = permuted(rng, graph.entities().iter().cloned(), "node");
        let relations = permuted(rng, graph.relations().iter().cloned(), "link");
        Self { entities, relations }
    }

    pub fn entity<'a>(&'a self, label: &'a str) -> &'a str {
        self.entities.get(label).map_or(label, String::as_str)
    }

    pub fn relation<'a>(&'a self, label: &'a str) -> &'a str {
        self.relations.get(label).map_or(label, String::as_str)
    }

    /// Maps any label, trying entities first. Entity and relation namespaces
    /// from [`random`](Self::random) never collide.
    pub fn label<'a>(&'a self, label: &'a str) -> &'a str {
        self.entities.get(label).or_else(|| self.relations.get(label)).map_or(label, String::as_str)
    }

    pub fn graph(&self, graph: &KnowledgeGraph) -> KnowledgeGraph {
        graph.relabel(|e| self.entity(e).to_owned(), |r| self.relation(r).to_owned())
    }

    pub fn path(&self, path: &ReasoningPath) -> ReasoningPath {
        ReasoningPath {
            nodes: path.nodes.iter().map(|n| self.entity(n).to_owned()).collect(),
            edges: path.edges.iter().map(|r| self.relation(r).to_owned()).collect(),
        }
    }

    /// Renames call arguments by position: entity first, relation second.
    pub fn call(&self, call: &ActionCall) -> ActionCall {
        let known = ActionKind::from_name(&call.name).is_some();
        let args = call
            .args
            .iter()
            .enumerate()
            .map(|(i, a)| match (known, i) {
                (true, 0) => self.entity(a).to_owned(),
                (true, 1) => self.relation(a).to_owned(),
                _ => self.label(a).to_owned(),
            })
            .collect();
        ActionCall { name: call.name.clone(), args }
    }

    pub fn sample(&self, sample: &QASample) -> QASample {
        QASample {
            sample_id: sample.sample_id.clone(),
            question: sample.question.clone(),
            anchor_entities: sample.anchor_entities.iter().map(|e| self.entity(e).to_owned()).collect(),
            gold_answers: sample.gold_answers.iter().map(|e| self.entity(e).to_owned()).collect(),
            graph: Arc::new(self.graph(&sample.graph)),
            gold_paths: sample.gold_paths.iter().map(|p| self.path(p)).collect(),
        }
    }
}
