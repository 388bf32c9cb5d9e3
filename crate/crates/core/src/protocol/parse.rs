//! Exact-tag message parser.
//!
//! A message is format-valid iff it has exactly one `<think>` block, exactly
//! one action block (`<kg-query>` or `<answer>`), the think block comes
//! first, every block is closed, no other tags appear at top level, and a
//! kg-query holds a parsable call. Parsing never fails: problems become
//! [`Violation`]s so the agent can be told what went wrong.

use serde::{Deserialize, Serialize};

use crate::retrieval::ActionCall;

const THINK: &str = "think";
const QUERY: &str = "kg-query";
const ANSWER: &str = "answer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    MissingThink,
    MultipleThink,
    MissingAction,
    MultipleActions,
    ActionBeforeThink,
    UnclosedTag,
    UnexpectedTag,
    MalformedQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TurnAction {
    Query { call: ActionCall },
    Answer { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTurn {
    pub think_text: Option<String>,
    pub action: Option<TurnAction>,
    pub format_valid: bool,
    pub violations: Vec<Violation>,
}

impl ParsedTurn {
    pub fn answer_text(&self) -> Option<&str> {
        match &self.action {
            Some(TurnAction::Answer { text }) => Some(text),
            _ => None,
        }
    }

    pub fn query(&self) -> Option<&ActionCall> {
        match &self.action {
            Some(TurnAction::Query { call }) => Some(call),
            _ => None,
        }
    }

    pub fn is_answer(&self) -> bool {
        self.answer_text().is_some()
    }
}

struct Block<'a> {
    tag: &'static str,
    content: &'a str,
}

/// Matches `<name>` or `</name>` at the start of `s`.
pub(crate) fn tag_at(s: &str) -> Option<(bool, &str, usize)> {
    let rest = s.strip_prefix('<')?;
    let (closing, rest) = match rest.strip_prefix('/') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let mut chars = rest.char_indices();
    let (_, first) = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    for (i, c) in chars {
        if c == '>' {
            let consumed = 1 + usize::from(closing) + i + 1;
            return Some((closing, &rest[..i], consumed));
        }
        if !(c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return None;
        }
    }
    None
}

fn known(name: &str) -> Option<&'static str> {
    [THINK, QUERY, ANSWER].into_iter().find(|k| *k == name)
}

pub fn parse_message(text: &str) -> ParsedTurn {
    let mut blocks: Vec<Block> = Vec::new();
    let mut violations = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('<') {
        let at = pos + off;
        let Some((closing, name, consumed)) = tag_at(&text[at..]) else {
            pos = at + 1;
            continue;
        };
        match known(name) {
            Some(tag) if !closing => {
                let body_start = at + consumed;
                let close = format!("</{tag}>");
                match text[body_start..].find(&close) {
                    Some(len) => {
                        blocks.push(Block { tag, content: &text[body_start..body_start + len] });
                        pos = body_start + len + close.len();
                    }
                    None => {
                        violations.push(Violation::UnclosedTag);
                        break;
                    }
                }
            }
            _ => {
                push_once(&mut violations, Violation::UnexpectedTag);
                pos = at + consumed;
            }
        }
    }

    let thinks: Vec<usize> = (0..blocks.len()).filter(|&i| blocks[i].tag == THINK).collect();
    let actions: Vec<usize> = (0..blocks.len()).filter(|&i| blocks[i].tag != THINK).collect();
    match thinks.len() {
        0 => violations.push(Violation::MissingThink),
        1 => {}
        _ => violations.push(Violation::MultipleThink),
    }
    match actions.len() {
        0 => violations.push(Violation::MissingAction),
        1 => {}
        _ => violations.push(Violation::MultipleActions),
    }
    if let (Some(&t), Some(&a)) = (thinks.first(), actions.first()) {
        if a < t {
            violations.push(Violation::ActionBeforeThink);
        }
    }

    // An answer block wins over queries: termination is irreversible.
    let answer = actions.iter().find(|&&i| blocks[i].tag == ANSWER);
    let query = actions.iter().find(|&&i| blocks[i].tag == QUERY);
    let action = match (answer, query) {
        (Some(&i), _) => Some(TurnAction::Answer { text: blocks[i].content.trim().to_owned() }),
        (None, Some(&i)) => {
            let content = blocks[i].content.trim();
            let call = parse_call(content).unwrap_or_else(|| {
                violations.push(Violation::MalformedQuery);
                ActionCall { name: content.to_owned(), args: Vec::new() }
            });
            Some(TurnAction::Query { call })
        }
        (None, None) => None,
    };

    ParsedTurn {
        think_text: thinks.first().map(|&i| blocks[i].content.trim().to_owned()),
        action,
        format_valid: violations.is_empty(),
        violations,
    }
}

fn push_once(v: &mut Vec<Violation>, x: Violation) {
    if !v.contains(&x) {
        v.push(x);
    }
}

/// `name(arg, "arg", 'arg')`; quoted arguments honor backslash escapes,
/// bare arguments are trimmed and may not contain commas.
pub fn parse_call(content: &str) -> Option<ActionCall> {
    let content = content.trim();
    let open = content.find('(')?;
    let name = content[..open].trim_end();
    let mut name_chars = name.chars();
    let first = name_chars.next()?;
    if !(first.is_ascii_alphabetic() || first == '_')
        || !name_chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
    {
        return None;
    }
    let close = content.rfind(')')?;
    if close < open || !content[close + 1..].trim().is_empty() {
        return None;
    }
    let args = parse_args(&content[open + 1..close])?;
    Some(ActionCall { name: name.to_owned(), args })
}

fn parse_args(inner: &str) -> Option<Vec<String>> {
    if inner.trim().is_empty() {
        return Some(Vec::new());
    }
    let mut args = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.next_if(|c| c.is_whitespace()).is_some() {}
        let arg = match chars.peek() {
            Some(&q) if q == '"' || q == '\'' => {
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next()? {
                        '\\' => s.push(chars.next()?),
                        c if c == q => break,
                        c => s.push(c),
                    }
                }
                while chars.next_if(|c| c.is_whitespace()).is_some() {}
                s
            }
            _ => {
                let mut s = String::new();
                while let Some(c) = chars.next_if(|c| *c != ',') {
                    s.push(c);
                }
                let s = s.trim().to_owned();
                if s.is_empty() {
                    return None;
                }
                s
            }
        };
        args.push(arg);
        match chars.next() {
            None => return Some(args),
            Some(',') => continue,
            Some(_) => return None,
        }
    }
}
