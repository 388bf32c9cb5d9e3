use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ActionKind, Direction};

/// Catalogue entries. Several entries share a wire code; `title` tells them apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidAction,
    MissingRequiredFields,
    WrongArgumentCount,
    SampleMissing,
    EntityNotInKg,
    InvalidRelation,
    NoRelationsFound,
    NoEntitiesFound,
    /// Not part of the published catalogue; reported under `KG_SERVER_ERROR`.
    Timeout,
}

impl ErrorKind {
    /// The eight published catalogue entries, in catalogue order.
    pub const CATALOGUE: [ErrorKind; 8] = [
        Self::InvalidAction,
        Self::MissingRequiredFields,
        Self::WrongArgumentCount,
        Self::SampleMissing,
        Self::EntityNotInKg,
        Self::InvalidRelation,
        Self::NoRelationsFound,
        Self::NoEntitiesFound,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Self::InvalidAction | Self::Timeout => "KG_SERVER_ERROR",
            Self::MissingRequiredFields | Self::WrongArgumentCount => "KG_FORMAT_ERROR",
            Self::SampleMissing => "KG_SAMPLE_NOT_FOUND",
            Self::EntityNotInKg => "KG_ENTITY_NOT_FOUND",
            Self::InvalidRelation => "KG_RELATION_NOT_FOUND",
            Self::NoRelationsFound | Self::NoEntitiesFound => "KG_NO_RESULTS",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::InvalidAction => "Invalid Action",
            Self::MissingRequiredFields => "Missing Required Fields",
            Self::WrongArgumentCount => "Wrong Argument Count",
            Self::SampleMissing => "Sample Missing",
            Self::EntityNotInKg => "Entity Not in KG",
            Self::InvalidRelation => "Invalid Relation",
            Self::NoRelationsFound => "No Relations Found",
            Self::NoEntitiesFound => "No Entities Found",
            Self::Timeout => "Request Timeout",
        }
    }

    /// `CODE: Title`, the key used in reports.
    pub fn label(self) -> String {
        format!("{}: {}", self.code(), self.title())
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code(), self.title())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct KgError {
    pub kind: ErrorKind,
    pub message: String,
}

impl KgError {
    fn new(kind: ErrorKind, message: String) -> Self {
        Self { kind, message }
    }

    pub fn invalid_action(name: &str) -> Self {
        let names = [
            ActionKind::GetHeadRelations,
            ActionKind::GetTailRelations,
            ActionKind::GetHeadEntities,
            ActionKind::GetTailEntities,
        ]
        .map(ActionKind::name)
        .join(", ");
        Self::new(ErrorKind::InvalidAction, format!("Action \"{name}\" not available (use: {names})"))
    }

    pub fn missing_fields(action: &str, fields: &[&str]) -> Self {
        Self::new(
            ErrorKind::MissingRequiredFields,
            format!("Missing required fields for {action}: {}", fields.join(", ")),
        )
    }

    pub fn wrong_argument_count(kind: ActionKind) -> Self {
        let message = if kind.returns_relations() {
            format!("{kind} accepts only one entity argument")
        } else {
            format!("{kind} accepts only two arguments (entity, relation)")
        };
        Self::new(ErrorKind::WrongArgumentCount, message)
    }

    pub fn sample_not_found(sample_id: &str) -> Self {
        Self::new(ErrorKind::SampleMissing, format!("Sample \"{sample_id}\" not found in KG"))
    }

    pub fn entity_not_found(entity: &str) -> Self {
        Self::new(ErrorKind::EntityNotInKg, format!("Entity \"{entity}\" not found in KG"))
    }

    pub fn relation_not_found(relation: &str) -> Self {
        Self::new(ErrorKind::InvalidRelation, format!("Relation \"{relation}\" not found in KG"))
    }

    pub(super) fn no_relations(dir: Direction, entity: &str) -> Self {
        Self::new(
            ErrorKind::NoRelationsFound,
            format!("No {} relations found for entity \"{entity}\" in knowledge graph", dir.word()),
        )
    }

    pub(super) fn no_entities(dir: Direction, relation: &str, entity: &str) -> Self {
        let role = match dir {
            Direction::Tail => "head",
            Direction::Head => "tail",
        };
        Self::new(
            ErrorKind::NoEntitiesFound,
            format!(
                "No {} entities found for relation \"{relation}\" with {role} \"{entity}\" in knowledge graph",
                dir.word()
            ),
        )
    }

    pub fn timeout(millis: u64) -> Self {
        Self::new(ErrorKind::Timeout, format!("Request timed out after {millis} ms"))
    }
}
