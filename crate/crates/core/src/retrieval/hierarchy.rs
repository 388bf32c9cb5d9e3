//! Tree rendering of dotted `domain.type.property` relation names.
//!
//! ```text
//! location
//!   country: first_level_divisions
//!   location: containedby, contains
//! capital, founded
//! ```
//!
//! Names split on the first two dots; anything past them stays in the
//! property. Names without three non-empty segments go to one trailing
//! comma-joined line. Every level is sorted lexicographically.
//! Round-trip through [`parse_relations_hierarchical`] holds for names
//! without commas, newlines, or leading spaces.

use std::collections::{BTreeMap, BTreeSet};

const INDENT: &str = "  ";

fn split(relation: &str) -> Option<(&str, &str, &str)> {
    let mut parts = relation.splitn(3, '.');
    let (d, t, p) = (parts.next()?, parts.next()?, parts.next()?);
    if d.is_empty() || t.is_empty() || p.is_empty() || d.starts_with(' ') {
        return None;
    }
    Some((d, t, p))
}

pub fn format_relations_hierarchical<S: AsRef<str>>(relations: &[S]) -> String {
    let mut tree: BTreeMap<&str, BTreeMap<&str, BTreeSet<&str>>> = BTreeMap::new();
    let mut flat: BTreeSet<&str> = BTreeSet::new();
    for rel in relations {
        let rel = rel.as_ref();
        match split(rel) {
            Some((d, t, p)) => {
                tree.entry(d).or_default().entry(t).or_default().insert(p);
            }
            None => {
                flat.insert(rel);
            }
        }
    }
    let mut lines = Vec::new();
    for (domain, types) in &tree {
        lines.push((*domain).to_owned());
        for (ty, props) in types {
            lines.push(format!("{INDENT}{ty}: {}", props.iter().copied().collect::<Vec<_>>().join(", ")));
        }
    }
    if !flat.is_empty() {
        lines.push(flat.into_iter().collect::<Vec<_>>().join(", "));
    }
    lines.join("\n")
}

/// Inverse of [`format_relations_hierarchical`]; returns sorted dotted names.
pub fn parse_relations_hierarchical(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    let mut out = BTreeSet::new();
    let mut domain: Option<&str> = None;
    for (i, line) in lines.iter().enumerate() {
        if let Some(child) = line.strip_prefix(INDENT) {
            let Some(d) = domain else { continue };
            let Some((ty, props)) = child.split_once(": ") else { continue };
            for p in props.split(", ") {
                out.insert(format!("{d}.{ty}.{p}"));
            }
        } else if lines.get(i + 1).is_some_and(|next| next.starts_with(INDENT)) {
            domain = Some(line);
        } else {
            domain = None;
            out.extend(line.split(", ").map(str::to_owned));
        }
    }
    out.into_iter().collect()
}
