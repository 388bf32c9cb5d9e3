use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::graph::{load_triples, Triple, TripleFormat};

fn fixture() -> KnowledgeGraph {
    let tsv = "Chicago\tlocated_in_state\tIllinois\nIllinois\tcapital\tSpringfield\n";
    load_triples(tsv.as_bytes(), TripleFormat::Tsv).unwrap()
}

// Brute-force scans over the raw triple set; independent of the indexes.
fn scan_tail_relations(g: &KnowledgeGraph, e: &str) -> BTreeSet<String> {
    g.triples().iter().filter(|t| t.head == e).map(|t| t.relation.clone()).collect()
}
fn scan_head_relations(g: &KnowledgeGraph, e: &str) -> BTreeSet<String> {
    g.triples().iter().filter(|t| t.tail == e).map(|t| t.relation.clone()).collect()
}
fn scan_tail_entities(g: &KnowledgeGraph, e: &str, r: &str) -> BTreeSet<String> {
    g.triples().iter().filter(|t| t.head == e && t.relation == r).map(|t| t.tail.clone()).collect()
}
fn scan_head_entities(g: &KnowledgeGraph, r: &str, e: &str) -> BTreeSet<String> {
    g.triples().iter().filter(|t| t.tail == e && t.relation == r).map(|t| t.head.clone()).collect()
}

fn owned(v: Vec<&str>) -> BTreeSet<String> {
    v.into_iter().map(str::to_owned).collect()
}

#[test]
fn tail_relations_examples() {
    let g = fixture();
    assert_eq!(get_tail_relations(&g, "Chicago").unwrap(), vec!["located_in_state"]);
    assert!(scan_tail_relations(&g, "Springfield").is_empty());
    let err = get_tail_relations(&g, "Springfield").unwrap_err();
    assert_eq!(err.kind, ErrorKind::NoRelationsFound);
    let err = get_tail_relations(&g, "Barack Obamaa").unwrap_err();
    assert_eq!(err.to_string(), "Entity \"Barack Obamaa\" not found in KG");
}

#[test]
fn head_relations_examples() {
    let g = fixture();
    assert_eq!(get_head_relations(&g, "Illinois").unwrap(), vec!["located_in_state"]);
    assert_eq!(get_head_relations(&g, "Chicago").unwrap_err().kind, ErrorKind::NoRelationsFound);
    assert_eq!(get_head_relations(&g, "Nowhere").unwrap_err().kind, ErrorKind::EntityNotInKg);
}

#[test]
fn tail_entities_examples() {
    let g = fixture();
    assert_eq!(get_tail_entities(&g, "Illinois", "capital").unwrap(), vec!["Springfield"]);
    let err = get_tail_entities(&g, "Chicago", "capital").unwrap_err();
    assert_eq!(err.kind, ErrorKind::NoEntitiesFound);
    assert!(err.message.contains("with head \"Chicago\""), "{err}");
    let err = get_tail_entities(&g, "Chicago", "location.capital").unwrap_err();
    assert_eq!(err.kind, ErrorKind::InvalidRelation);
}

#[test]
fn head_entities_examples() {
    let g = fixture();
    assert_eq!(get_head_entities(&g, "located_in_state", "Illinois").unwrap(), vec!["Chicago"]);
    assert_eq!(get_head_entities(&g, "capital", "Chicago").unwrap_err().kind, ErrorKind::NoEntitiesFound);
    assert_eq!(get_head_entities(&g, "founded_by", "Chicago").unwrap_err().kind, ErrorKind::InvalidRelation);
}

#[test]
fn entity_checked_before_relation() {
    let g = fixture();
    let err = get_tail_entities(&g, "Nowhere", "nothing").unwrap_err();
    assert_eq!(err.kind, ErrorKind::EntityNotInKg);
}

#[test]
fn execute_examples() {
    let g = fixture();
    let obs = execute(&g, &ActionCall::new("get_entity_info", ["Chicago"]), ExecOptions::default());
    assert_eq!(
        obs.text(),
        "Action \"get_entity_info\" not available (use: get_head_relations, get_tail_relations, get_head_entities, get_tail_entities)"
    );
    let obs = execute(&g, &ActionCall::new("get_tail_relations", ["Chicago", "x"]), ExecOptions::default());
    assert_eq!(obs.text(), "get_tail_relations accepts only one entity argument");
    assert_eq!(obs.error_kind(), Some(ErrorKind::WrongArgumentCount));
    let obs = execute(&g, &ActionCall::new("get_tail_entities", ["Illinois", "capital"]), ExecOptions::default());
    assert_eq!(obs.text(), "Tail entities for relation \"capital\" with head \"Illinois\": Springfield");
    assert_eq!(obs.labels(), ["Springfield"]);
}

#[test]
fn missing_fields() {
    let g = fixture();
    let obs = execute(&g, &ActionCall::new("get_tail_entities", ["Chicago"]), ExecOptions::default());
    assert_eq!(obs.text(), "Missing required fields for get_tail_entities: relation_name");
    let obs = execute(&g, &ActionCall::new::<&str>("get_head_entities", []), ExecOptions::default());
    assert_eq!(obs.text(), "Missing required fields for get_head_entities: entity_id, relation_name");
    let obs = execute(&g, &ActionCall::new("get_tail_relations", [""]), ExecOptions::default());
    assert_eq!(obs.error_kind(), Some(ErrorKind::MissingRequiredFields));
}

#[test]
fn rendering_of_each_action() {
    let g = fixture();
    let opts = ExecOptions::default();
    let run = |name: &str, args: &[&str]| execute(&g, &ActionCall::new(name, args.iter().copied()), opts);
    assert_eq!(run("get_tail_relations", &["Chicago"]).text(), "Tail relations for entity \"Chicago\": located_in_state");
    assert_eq!(run("get_head_relations", &["Springfield"]).text(), "Head relations for entity \"Springfield\": capital");
    assert_eq!(
        run("get_head_entities", &["Illinois", "located_in_state"]).text(),
        "Head entities for relation \"located_in_state\" with tail \"Illinois\": Chicago"
    );
    assert_eq!(
        run("get_head_entities", &["Chicago", "capital"]).text(),
        "No head entities found for relation \"capital\" with tail \"Chicago\" in knowledge graph"
    );
    assert_eq!(
        run("get_head_relations", &["Chicago"]).text(),
        "No head relations found for entity \"Chicago\" in knowledge graph"
    );
}

#[test]
fn hierarchical_mode_only_changes_relation_rendering() {
    let g = KnowledgeGraph::from_triples([
        Triple::new("m.09c7w0", "location.location.contains", "a"),
        Triple::new("m.09c7w0", "people.person.nationality", "b"),
        Triple::new("m.09c7w0", "location.location.containedby", "c"),
    ])
    .unwrap();
    let hier = ExecOptions::with_format(FormatMode::Hierarchical);
    let obs = execute(&g, &ActionCall::new("get_tail_relations", ["m.09c7w0"]), hier);
    assert_eq!(
        obs.text(),
        "Tail relations for entity \"m.09c7w0\":\nlocation\n  location: containedby, contains\npeople\n  person: nationality"
    );
    let flat = execute(&g, &ActionCall::new("get_tail_relations", ["m.09c7w0"]), ExecOptions::default());
    assert_eq!(obs.labels(), flat.labels());
    let ents = execute(&g, &ActionCall::new("get_tail_entities", ["m.09c7w0", "location.location.contains"]), hier);
    assert_eq!(ents.text(), "Tail entities for relation \"location.location.contains\" with head \"m.09c7w0\": a");
}

#[test]
fn result_cap_truncates_with_suffix() {
    let g = KnowledgeGraph::from_triples((0..5).map(|i| Triple::new("hub", "r", format!("n{i}")))).unwrap();
    let opts = ExecOptions { format: FormatMode::Flat, result_cap: 3 };
    let obs = execute(&g, &ActionCall::new("get_tail_entities", ["hub", "r"]), opts);
    assert_eq!(obs.text(), "Tail entities for relation \"r\" with head \"hub\": n0, n1, n2, …(2 more)");
    assert!(matches!(obs, Observation::Ok { omitted: 2, .. }));
}

#[test]
fn realize_fixture_path() {
    let g = fixture();
    let path = ReasoningPath {
        nodes: vec!["Chicago".into(), "Illinois".into(), "Springfield".into()],
        edges: vec!["located_in_state".into(), "capital".into()],
    };
    let actions = realize_path(&g, &path).unwrap();
    assert_eq!(
        actions,
        vec![
            RetrievalAction::TailEntities { entity: "Chicago".into(), relation: "located_in_state".into() },
            RetrievalAction::TailEntities { entity: "Illinois".into(), relation: "capital".into() },
        ]
    );
    let last = execute_action(&g, &actions[1], ExecOptions::default());
    assert!(last.labels().contains(&"Springfield".to_string()));
    assert!(realize_path(&g, &ReasoningPath::single("Chicago")).unwrap().is_empty());
    let bad = ReasoningPath { nodes: vec!["Chicago".into(), "Springfield".into()], edges: vec!["capital".into()] };
    assert!(realize_path(&g, &bad).is_err());
}

#[test]
fn call_render_parses_back_through_quotes() {
    let call = ActionCall::new("get_tail_entities", ["say \"hi\"", "r"]);
    assert_eq!(call.render(), r#"get_tail_entities("say \"hi\"", "r")"#);
}

// Minimality: starting from the knowledge of a single entity, the closure
// of the action set reaches every triple of a connected graph, and removing
// any one action loses some triple on a two-node graph.
fn discoverable(g: &KnowledgeGraph, start: &str, allowed: &[ActionKind]) -> BTreeSet<Triple> {
    let mut entities: BTreeSet<String> = [start.to_owned()].into();
    let mut relations: BTreeSet<String> = BTreeSet::new();
    let mut found = BTreeSet::new();
    loop {
        let before = (entities.len(), relations.len(), found.len());
        for e in entities.clone() {
            for kind in allowed {
                match kind {
                    ActionKind::GetTailRelations => {
                        relations.extend(get_tail_relations(g, &e).unwrap_or_default().into_iter().map(str::to_owned))
                    }
                    ActionKind::GetHeadRelations => {
                        relations.extend(get_head_relations(g, &e).unwrap_or_default().into_iter().map(str::to_owned))
                    }
                    ActionKind::GetTailEntities => {
                        for r in relations.clone() {
                            for t in get_tail_entities(g, &e, &r).unwrap_or_default() {
                                found.insert(Triple::new(&e, &r, t));
                                entities.insert(t.to_owned());
                            }
                        }
                    }
                    ActionKind::GetHeadEntities => {
                        for r in relations.clone() {
                            for h in get_head_entities(g, &r, &e).unwrap_or_default() {
                                found.insert(Triple::new(h, &r, &e));
                                entities.insert(h.to_owned());
                            }
                        }
                    }
                }
            }
        }
        if before == (entities.len(), relations.len(), found.len()) {
            return found;
        }
    }
}

#[test]
fn removing_any_action_loses_reachability() {
    let g = KnowledgeGraph::from_triples([Triple::new("a", "r", "b")]).unwrap();
    let all = ActionKind::ALL;
    assert_eq!(discoverable(&g, "a", &all).len(), 1);
    assert_eq!(discoverable(&g, "b", &all).len(), 1);
    for removed in all {
        let rest: Vec<ActionKind> = all.into_iter().filter(|k| *k != removed).collect();
        let start = if matches!(removed, ActionKind::GetTailRelations | ActionKind::GetTailEntities) { "a" } else { "b" };
        assert!(discoverable(&g, start, &rest).is_empty(), "{removed} is redundant");
    }
}

fn arb_graph() -> impl Strategy<Value = KnowledgeGraph> {
    prop::collection::vec((0..12u8, 0..4u8, 0..12u8), 1..40).prop_map(|edges| {
        KnowledgeGraph::from_triples(
            edges.into_iter().map(|(h, r, t)| Triple::new(format!("e{h}"), format!("r{r}"), format!("e{t}"))),
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn operations_match_brute_force(g in arb_graph(), e in 0..13u8, r in 0..5u8) {
        let (e, r) = (format!("e{e}"), format!("r{r}"));
        let tr = get_tail_relations(&g, &e).map(owned).unwrap_or_default();
        prop_assert_eq!(tr, scan_tail_relations(&g, &e));
        let hr = get_head_relations(&g, &e).map(owned).unwrap_or_default();
        prop_assert_eq!(hr, scan_head_relations(&g, &e));
        let te = get_tail_entities(&g, &e, &r).map(owned).unwrap_or_default();
        prop_assert_eq!(te, scan_tail_entities(&g, &e, &r));
        let he = get_head_entities(&g, &r, &e).map(owned).unwrap_or_default();
        prop_assert_eq!(he, scan_head_entities(&g, &r, &e));
    }

    #[test]
    fn duality(g in arb_graph()) {
        for e in g.entities() {
            for r in g.relations() {
                for t in get_tail_entities(&g, e, r).unwrap_or_default() {
                    prop_assert!(get_head_entities(&g, r, t).unwrap().contains(&e.as_str()));
                }
                let has_tail = get_tail_entities(&g, e, r).is_ok();
                let listed = get_tail_relations(&g, e).unwrap_or_default().contains(&r.as_str());
                prop_assert_eq!(has_tail, listed);
            }
        }
    }

    #[test]
    fn completeness_on_random_walks(g in arb_graph(), seed in any::<u64>(), len in 0..6usize) {
        // random walk along outgoing edges
        let start = g.entities().iter().nth(seed as usize % g.entities().len()).unwrap().clone();
        let mut path = ReasoningPath::single(start);
        let mut s = seed;
        for _ in 0..len {
            let Some(out) = g.outgoing(path.end()) else { break };
            let edges: Vec<(&String, &String)> = out.iter().flat_map(|(r, ts)| ts.iter().map(move |t| (r, t))).collect();
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let (r, t) = edges[(s >> 33) as usize % edges.len()];
            path.edges.push(r.clone());
            path.nodes.push(t.clone());
        }
        let actions = realize_path(&g, &path).unwrap();
        prop_assert!(actions.len() <= path.len() + 1);
        for (i, a) in actions.iter().enumerate() {
            let obs = execute_action(&g, a, ExecOptions::default());
            prop_assert!(obs.labels().contains(&path.nodes[i + 1]));
        }
    }

    #[test]
    fn schema_free_across_vocabularies(g in arb_graph(), calls in prop::collection::vec((0..4usize, 0..13u8, 0..5u8), 1..10)) {
        // Same triples, different label vocabulary for the relations.
        let dotted = |r: &str| format!("common.topic.{r}");
        let g2 = g.relabel(str::to_owned, dotted);
        for (k, e, r) in calls {
            let kind = ActionKind::ALL[k];
            let (e, r) = (format!("e{e}"), format!("r{r}"));
            let args: Vec<String> = if kind.returns_relations() { vec![e.clone()] } else { vec![e.clone(), r.clone()] };
            let args2: Vec<String> = if kind.returns_relations() { vec![e] } else { vec![args[0].clone(), dotted(&r)] };
            let o1 = execute(&g, &ActionCall::new(kind.name(), args), ExecOptions::default());
            let o2 = execute(&g2, &ActionCall::new(kind.name(), args2), ExecOptions::default());
            prop_assert_eq!(o1.error_kind(), o2.error_kind());
            let mapped: BTreeSet<String> = o1.labels().iter()
                .map(|l| if kind.returns_relations() { dotted(l) } else { l.clone() })
                .collect();
            let got: BTreeSet<String> = o2.labels().iter().cloned().collect();
            prop_assert_eq!(mapped, got);
        }
    }
}
