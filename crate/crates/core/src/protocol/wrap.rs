use crate::retrieval::Observation;

use super::parse::tag_at;

/// Wraps an observation for the dialogue context. Error text goes inside an
/// `<error>` element within the information block. Unclosed tags in the
/// payload are closed in place; closers with no opener are escaped.
pub fn wrap_observation(obs: &Observation) -> String {
    match obs {
        Observation::Ok { text, .. } => format!("<information>{}</information>", balance(text)),
        Observation::Error { text, .. } => format!("<information><error>{}</error></information>", balance(text)),
    }
}

fn balance(payload: &str) -> String {
    let mut out = String::with_capacity(payload.len() + 16);
    let mut open: Vec<&str> = Vec::new();
    let mut pos = 0;
    while let Some(off) = payload[pos..].find('<') {
        let at = pos + off;
        out.push_str(&payload[pos..at]);
        match tag_at(&payload[at..]) {
            Some((false, name, consumed)) => {
                open.push(name);
                out.push_str(&payload[at..at + consumed]);
                pos = at + consumed;
            }
            Some((true, name, consumed)) => {
                if let Some(depth) = open.iter().rposition(|n| *n == name) {
                    for inner in open.drain(depth + 1..).rev() {
                        out.push_str(&format!("</{inner}>"));
                    }
                    open.pop();
                    out.push_str(&payload[at..at + consumed]);
                } else {
                    out.push_str("&lt;");
                    out.push_str(&payload[at + 1..at + consumed]);
                }
                pos = at + consumed;
            }
            None => {
                out.push('<');
                pos = at + 1;
            }
        }
    }
    out.push_str(&payload[pos..]);
    for name in open.into_iter().rev() {
        out.push_str(&format!("</{name}>"));
    }
    out
}

#[cfg(test)]
pub(crate) fn is_tag_balanced(text: &str) -> bool {
    let mut stack: Vec<&str> = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('<') {
        let at = pos + off;
        match tag_at(&text[at..]) {
            Some((false, name, n)) => {
                stack.push(name);
                pos = at + n;
            }
            Some((true, name, n)) => {
                if stack.pop() != Some(name) {
                    return false;
                }
                pos = at + n;
            }
            None => pos = at + 1,
        }
    }
    stack.is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{ErrorKind, KgError};
    use proptest::prelude::*;

    fn ok(text: &str) -> Observation {
        Observation::Ok { labels: vec!["x".into()], omitted: 0, text: text.into() }
    }

    #[test]
    fn ok_and_error_payloads() {
        assert_eq!(
            wrap_observation(&ok("Tail entities for relation \"capital\" with head \"Illinois\": Springfield")),
            "<information>Tail entities for relation \"capital\" with head \"Illinois\": Springfield</information>"
        );
        let err = Observation::from_error(KgError::relation_not_found("location.capital"));
        assert_eq!(err.error_kind(), Some(ErrorKind::InvalidRelation));
        assert_eq!(
            wrap_observation(&err),
            "<information><error>Relation \"location.capital\" not found in KG</error></information>"
        );
    }

    #[test]
    fn stray_opening_tag_gets_closed() {
        let w = wrap_observation(&ok("abc <information> def"));
        assert_eq!(w, "<information>abc <information> def</information></information>");
        assert!(is_tag_balanced(&w));
    }

    #[test]
    fn stray_closing_tag_is_escaped() {
        let w = wrap_observation(&ok("x</information>y"));
        assert_eq!(w, "<information>x&lt;/information>y</information>");
        assert!(is_tag_balanced(&w));
    }

    #[test]
    fn interleaved_tags_close_inner_first() {
        let w = wrap_observation(&ok("<a><b>text</a>"));
        assert_eq!(w, "<information><a><b>text</b></a></information>");
    }

    proptest! {
        #[test]
        fn always_balanced(s in ".{0,200}") {
            prop_assert!(is_tag_balanced(&wrap_observation(&ok(&s))));
        }

        #[test]
        fn balanced_on_tag_soup(parts in prop::collection::vec(prop::sample::select(vec![
            "<information>", "</information>", "<error>", "</error>", "<a>", "</a>", "<", ">", "/", "x",
        ]), 0..50)) {
            let s: String = parts.concat();
            prop_assert!(is_tag_balanced(&wrap_observation(&ok(&s))));
            let e = Observation::Error { kind: ErrorKind::InvalidAction, text: s };
            prop_assert!(is_tag_balanced(&wrap_observation(&e)));
        }
    }
}
