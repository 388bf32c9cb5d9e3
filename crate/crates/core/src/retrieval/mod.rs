//! The four schema-agnostic one-hop retrieval actions, their error
//! catalogue, and observation rendering.

mod error;
mod hierarchy;

pub use error::{ErrorKind, KgError};
pub use hierarchy::{format_relations_hierarchical, parse_relations_hierarchical};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{KnowledgeGraph, PathError, ReasoningPath};

/// Default maximum number of labels rendered in one observation.
pub const DEFAULT_RESULT_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    GetTailRelations,
    GetHeadRelations,
    GetTailEntities,
    GetHeadEntities,
}

impl ActionKind {
    pub const ALL: [ActionKind; 4] =
        [Self::GetTailRelations, Self::GetHeadRelations, Self::GetTailEntities, Self::GetHeadEntities];

    pub fn name(self) -> &'static str {
        match self {
            Self::GetTailRelations => "get_tail_relations",
            Self::GetHeadRelations => "get_head_relations",
            Self::GetTailEntities => "get_tail_entities",
            Self::GetHeadEntities => "get_head_entities",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Named argument slots, in call order.
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            Self::GetTailRelations | Self::GetHeadRelations => &["entity_id"],
            Self::GetTailEntities | Self::GetHeadEntities => &["entity_id", "relation_name"],
        }
    }

    pub fn arity(self) -> usize {
        self.fields().len()
    }

    pub fn returns_relations(self) -> bool {
        matches!(self, Self::GetTailRelations | Self::GetHeadRelations)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A query as written by the agent: an action name and its raw arguments.
/// Nothing about it has been validated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCall {
    pub name: String,
    pub args: Vec<String>,
}

impl ActionCall {
    pub fn new<S: Into<String>>(name: impl Into<String>, args: impl IntoIterator<Item = S>) -> Self {
        Self { name: name.into(), args: args.into_iter().map(Into::into).collect() }
    }

    /// Structural validation: known name, right arity, no empty arguments.
    pub fn resolve(&self) -> Result<RetrievalAction, KgError> {
        let kind = ActionKind::from_name(&self.name).ok_or_else(|| KgError::invalid_action(&self.name))?;
        if self.args.len() > kind.arity() {
            return Err(KgError::wrong_argument_count(kind));
        }
        let missing: Vec<&str> = kind
            .fields()
            .iter()
            .enumerate()
            .filter(|(i, _)| self.args.get(*i).is_none_or(|a| a.is_empty()))
            .map(|(_, f)| *f)
            .collect();
        if !missing.is_empty() {
            return Err(KgError::missing_fields(kind.name(), &missing));
        }
        let entity = self.args[0].clone();
        Ok(match kind {
            ActionKind::GetTailRelations => RetrievalAction::TailRelations { entity },
            ActionKind::GetHeadRelations => RetrievalAction::HeadRelations { entity },
            ActionKind::GetTailEntities => RetrievalAction::TailEntities { entity, relation: self.args[1].clone() },
            ActionKind::GetHeadEntities => RetrievalAction::HeadEntities { entity, relation: self.args[1].clone() },
        })
    }

    /// Renders the call in the syntax accepted inside `<kg-query>`.
    pub fn render(&self) -> String {
        let args: Vec<String> = self.args.iter().map(|a| quote(a)).collect();
        format!("{}({})", self.name, args.join(", "))
    }
}

fn quote(arg: &str) -> String {
    let mut out = String::with_capacity(arg.len() + 2);
    out.push('"');
    for c in arg.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// A structurally valid retrieval action. Entity-returning actions take
/// their arguments as `(entity, relation)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RetrievalAction {
    TailRelations { entity: String },
    HeadRelations { entity: String },
    TailEntities { entity: String, relation: String },
    HeadEntities { entity: String, relation: String },
}

impl RetrievalAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            Self::TailRelations { .. } => ActionKind::GetTailRelations,
            Self::HeadRelations { .. } => ActionKind::GetHeadRelations,
            Self::TailEntities { .. } => ActionKind::GetTailEntities,
            Self::HeadEntities { .. } => ActionKind::GetHeadEntities,
        }
    }

    pub fn to_call(&self) -> ActionCall {
        let name = self.kind().name();
        match self {
            Self::TailRelations { entity } | Self::HeadRelations { entity } => ActionCall::new(name, [entity]),
            Self::TailEntities { entity, relation } | Self::HeadEntities { entity, relation } => {
                ActionCall::new(name, [entity, relation])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatMode {
    #[default]
    Flat,
    Hierarchical,
}

impl std::str::FromStr for FormatMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(Self::Flat),
            "hierarchical" => Ok(Self::Hierarchical),
            other => Err(format!("unknown format mode {other:?} (expected flat or hierarchical)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOptions {
    pub format: FormatMode,
    pub result_cap: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { format: FormatMode::Flat, result_cap: DEFAULT_RESULT_CAP }
    }
}

impl ExecOptions {
    pub fn with_format(format: FormatMode) -> Self {
        Self { format, ..Self::default() }
    }
}

/// Server response to one action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Observation {
    Ok {
        /// Rendered labels, sorted; never empty.
        labels: Vec<String>,
        /// Labels cut by the result cap.
        #[serde(default)]
        omitted: usize,
        text: String,
    },
    Error {
        kind: ErrorKind,
        text: String,
    },
}

impl Observation {
    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok { .. })
    }

    pub fn text(&self) -> &str {
        match self {
            Self::Ok { text, .. } | Self::Error { text, .. } => text,
        }
    }

    pub fn labels(&self) -> &[String] {
        match self {
            Self::Ok { labels, .. } => labels,
            Self::Error { .. } => &[],
        }
    }

    pub fn error_kind(&self) -> Option<ErrorKind> {
        match self {
            Self::Ok { .. } => None,
            Self::Error { kind, .. } => Some(*kind),
        }
    }

    pub fn from_error(err: KgError) -> Self {
        Self::Error { kind: err.kind, text: err.message }
    }
}

/// Relations `r` with some triple `(entity, r, _)`.
pub fn get_tail_relations<'g>(graph: &'g KnowledgeGraph, entity: &str) -> Result<Vec<&'g str>, KgError> {
    if !graph.contains_entity(entity) {
        return Err(KgError::entity_not_found(entity));
    }
    let rels: Vec<&str> = graph.outgoing(entity).into_iter().flat_map(|m| m.keys()).map(String::as_str).collect();
    if rels.is_empty() {
        return Err(KgError::no_relations(Direction::Tail, entity));
    }
    Ok(rels)
}

/// Relations `r` with some triple `(_, r, entity)`.
pub fn get_head_relations<'g>(graph: &'g KnowledgeGraph, entity: &str) -> Result<Vec<&'g str>, KgError> {
    if !graph.contains_entity(entity) {
        return Err(KgError::entity_not_found(entity));
    }
    let rels: Vec<&str> = graph.incoming(entity).into_iter().flat_map(|m| m.keys()).map(String::as_str).collect();
    if rels.is_empty() {
        return Err(KgError::no_relations(Direction::Head, entity));
    }
    Ok(rels)
}

/// Tails of triples `(head, relation, _)`.
pub fn get_tail_entities<'g>(graph: &'g KnowledgeGraph, head: &str, relation: &str) -> Result<Vec<&'g str>, KgError> {
    check_entity_relation(graph, head, relation)?;
    let tails: Vec<&str> = graph
        .outgoing(head)
        .and_then(|m| m.get(relation))
        .into_iter()
        .flatten()
        .map(String::as_str)
        .collect();
    if tails.is_empty() {
        return Err(KgError::no_entities(Direction::Tail, relation, head));
    }
    Ok(tails)
}

/// Heads of triples `(_, relation, tail)`.
pub fn get_head_entities<'g>(graph: &'g KnowledgeGraph, relation: &str, tail: &str) -> Result<Vec<&'g str>, KgError> {
    check_entity_relation(graph, tail, relation)?;
    let heads: Vec<&str> = graph
        .incoming(tail)
        .and_then(|m| m.get(relation))
        .into_iter()
        .flatten()
        .map(String::as_str)
        .collect();
    if heads.is_empty() {
        return Err(KgError::no_entities(Direction::Head, relation, tail));
    }
    Ok(heads)
}

fn check_entity_relation(graph: &KnowledgeGraph, entity: &str, relation: &str) -> Result<(), KgError> {
    if !graph.contains_entity(entity) {
        return Err(KgError::entity_not_found(entity));
    }
    if !graph.contains_relation(relation) {
        return Err(KgError::relation_not_found(relation));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Tail,
    Head,
}

impl Direction {
    fn word(self) -> &'static str {
        match self {
            Self::Tail => "tail",
            Self::Head => "head",
        }
    }
}

/// Validates and runs a raw call.
pub fn execute(graph: &KnowledgeGraph, call: &ActionCall, opts: ExecOptions) -> Observation {
    match call.resolve() {
        Ok(action) => execute_action(graph, &action, opts),
        Err(e) => Observation::from_error(e),
    }
}

pub fn execute_action(graph: &KnowledgeGraph, action: &RetrievalAction, opts: ExecOptions) -> Observation {
    let (result, header) = match action {
        RetrievalAction::TailRelations { entity } => {
            (get_tail_relations(graph, entity), format!("Tail relations for entity \"{entity}\""))
        }
        RetrievalAction::HeadRelations { entity } => {
            (get_head_relations(graph, entity), format!("Head relations for entity \"{entity}\""))
        }
        RetrievalAction::TailEntities { entity, relation } => (
            get_tail_entities(graph, entity, relation),
            format!("Tail entities for relation \"{relation}\" with head \"{entity}\""),
        ),
        RetrievalAction::HeadEntities { entity, relation } => (
            get_head_entities(graph, relation, entity),
            format!("Head entities for relation \"{relation}\" with tail \"{entity}\""),
        ),
    };
    let labels = match result {
        Ok(l) => l,
        Err(e) => return Observation::from_error(e),
    };
    let total = labels.len();
    let shown: Vec<String> = labels.into_iter().take(opts.result_cap.max(1)).map(str::to_owned).collect();
    let omitted = total - shown.len();
    let hierarchical = opts.format == FormatMode::Hierarchical && action.kind().returns_relations();
    let mut text = if hierarchical {
        format!("{header}:\n{}", format_relations_hierarchical(&shown))
    } else {
        format!("{header}: {}", shown.join(", "))
    };
    if omitted > 0 {
        text.push_str(if hierarchical { "\n" } else { ", " });
        text.push_str(&format!("…({omitted} more)"));
    }
    Observation::Ok { labels: shown, omitted, text }
}

/// Actions that walk `path` hop by hop: `get_tail_entities(e_{i-1}, r_i)`.
pub fn realize_path(graph: &KnowledgeGraph, path: &ReasoningPath) -> Result<Vec<RetrievalAction>, PathError> {
    path.validate(graph)?;
    Ok(path
        .hops()
        .map(|(h, r, _)| RetrievalAction::TailEntities { entity: h.to_owned(), relation: r.to_owned() })
        .collect())
}

#[cfg(test)]
mod tests;
