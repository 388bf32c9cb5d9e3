use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::KnowledgeGraph;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '‘' | '’' | '“' | '”' | '«' | '»' | '…' | '–' | '—' | '·')
}

/// Case-fold, collapse internal whitespace, strip leading/trailing punctuation.
///
/// Every comparison between predicted, gold and retrieved labels goes through
/// this function.
pub fn normalize(s: &str) -> String {
    let trimmed = s.trim_matches(|c: char| c.is_whitespace() || is_punct(c));
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEntity {
    /// Trimmed surface form as written by the agent.
    pub text: String,
    pub normalized: String,
    pub resolved_in_kg: bool,
}

/// Predicted answer set, deduplicated under [`normalize`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub raw_text: String,
    pub entities: Vec<AnswerEntity>,
}

impl AnswerSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn normalized(&self) -> BTreeSet<String> {
        self.entities.iter().map(|e| e.normalized.clone()).collect()
    }

    /// Normalized form of the first listed entity.
    pub fn first(&self) -> Option<&str> {
        self.entities.first().map(|e| e.normalized.as_str())
    }
}

/// Splits on commas and newlines, trims whitespace and quotes, normalizes,
/// deduplicates, and resolves each entity against `graph` when given.
pub fn extract_answer_set(answer_text: &str, graph: Option<&KnowledgeGraph>) -> AnswerSet {
    let resolvable: Option<BTreeSet<String>> =
        graph.map(|g| g.entities().iter().map(|e| normalize(e)).collect());
    let mut seen = BTreeSet::new();
    let mut entities = Vec::new();
    for piece in answer_text.split([',', '\n']) {
        let text = piece.trim().trim_matches(|c| matches!(c, '"' | '\'' | '‘' | '’' | '“' | '”')).trim();
        let normalized = normalize(text);
        if normalized.is_empty() || !seen.insert(normalized.clone()) {
            continue;
        }
        let resolved_in_kg = resolvable.as_ref().is_some_and(|r| r.contains(&normalized));
        entities.push(AnswerEntity { text: text.to_owned(), normalized, resolved_in_kg });
    }
    AnswerSet { raw_text: answer_text.to_owned(), entities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Triple;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("  Springfield  "), "springfield");
        assert_eq!(normalize("\"New   York\tCity.\""), "new york city");
        assert_eq!(normalize("Goal II: Living the Dream"), "goal ii: living the dream");
        assert_eq!(normalize("St. Louis"), "st. louis");
        assert_eq!(normalize("..."), "");
    }

    #[test]
    fn beckham_children_resolve() {
        let children = ["Brooklyn Joseph Beckham", "Cruz David Beckham", "Harper Seven Beckham", "Romeo James Beckham"];
        let g = KnowledgeGraph::from_triples(
            children.iter().map(|c| Triple::new("Victoria Beckham", "people.person.children", *c)),
        )
        .unwrap();
        let set = extract_answer_set(&children.join(", "), Some(&g));
        assert_eq!(set.len(), 4);
        assert!(set.entities.iter().all(|e| e.resolved_in_kg));
    }

    #[test]
    fn dedup_and_empty() {
        let set = extract_answer_set("  Springfield ,, springfield", None);
        assert_eq!(set.normalized(), BTreeSet::from(["springfield".to_string()]));
        assert!(extract_answer_set("", None).is_empty());
        assert!(extract_answer_set(" , \n ,", None).is_empty());
    }

    #[test]
    fn unresolved_entities_are_flagged() {
        let g = KnowledgeGraph::from_triples([Triple::new("a", "r", "Springfield")]).unwrap();
        let set = extract_answer_set("springfield\n'Shelbyville'", Some(&g));
        assert_eq!(set.entities[0].text, "springfield");
        assert!(set.entities[0].resolved_in_kg);
        assert_eq!(set.entities[1].text, "Shelbyville");
        assert!(!set.entities[1].resolved_in_kg);
    }
}
