use kgenv_core::synth::{random_graph, random_path, GraphShape};
use kgenv_core::{load_triples, TripleFormat};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shape() -> impl Strategy<Value = GraphShape> {
    (1usize..60, 1usize..300, 1usize..12, any::<bool>())
        .prop_map(|(nodes, edges, relations, dotted_relations)| GraphShape { nodes, edges, relations, dotted_relations })
}

proptest! {
    #[test]
    fn serialization_round_trips(seed: u64, shape in shape()) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), shape);
        for format in [TripleFormat::Tsv, TripleFormat::Jsonl] {
            let mut buf = Vec::new();
            g.write_triples(&mut buf, format).unwrap();
            let back = load_triples(buf.as_slice(), format).unwrap();
            prop_assert_eq!(back.triples(), g.triples());
        }
    }

    #[test]
    fn subgraph_grows_with_radius(seed: u64, shape in shape(), radius in 0usize..4, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, shape);
        let seeds: Vec<String> = g.entities().iter().step_by(g.entities().len().div_ceil(k)).cloned().collect();
        let small = g.extract_subgraph(seeds.iter().map(String::as_str), radius);
        let large = g.extract_subgraph(seeds.iter().map(String::as_str), radius + 1);
        prop_assert!(small.triples().is_subset(large.triples()));
        prop_assert!(large.triples().is_subset(g.triples()));
    }

    #[test]
    fn subgraph_keeps_paths_from_the_seed(seed: u64, shape in shape(), max_len in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, shape);
        let path = random_path(&mut rng, &g, max_len).unwrap();
        let sub = g.extract_subgraph([path.start()], path.len());
        for (h, r, t) in path.hops() {
            prop_assert!(sub.contains_triple(h, r, t), "{h} {r} {t} lost");
        }
        if !path.is_empty() {
            path.validate(&sub).unwrap();
        }
    }
}

#[test]
fn large_graph_round_trips() {
    let shape = GraphShape { nodes: 3000, edges: 10_000, relations: 50, dotted_relations: true };
    let g = random_graph(&mut ChaCha8Rng::seed_from_u64(11), shape);
    assert!(g.len() > 9_900);
    let mut buf = Vec::new();
    g.write_triples(&mut buf, TripleFormat::Tsv).unwrap();
    assert_eq!(load_triples(buf.as_slice(), TripleFormat::Tsv).unwrap().triples(), g.triples());
}
