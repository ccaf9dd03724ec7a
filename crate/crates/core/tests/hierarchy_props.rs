//! Edge-list parsing, round trips, and parent queries against a brute-force oracle.

use std::collections::BTreeSet;
use std::path::Path;

use ccrt::hierarchy::{Entity, Hierarchy, ParentMode};
use ccrt::Error;
use proptest::prelude::*;

/// A random forest over `n0..n{len}`: node `i > 0` gets a parent among
/// `0..i` or none (`parents[i-1] == None`).
fn arb_forest(max: usize) -> impl Strategy<Value = Vec<Option<usize>>> {
    (2..=max).prop_flat_map(|n| {
        (1..n)
            .map(|i| prop::option::weighted(0.9, 0..i))
            .collect::<Vec<_>>()
            .prop_map(|mut v| {
                v.insert(0, None);
                v
            })
    })
}

fn label(i: usize) -> String {
    format!("n{i}")
}

fn edge_text(parents: &[Option<usize>], order: &[usize]) -> String {
    let mut s = String::from("# generated\n\n");
    for &i in order {
        if let Some(p) = parents[i] {
            s.push_str(&format!("{}\t{}\n", label(i), label(p)));
        }
    }
    s
}

fn ancestors(parents: &[Option<usize>], i: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cur = parents[i];
    while let Some(p) = cur {
        out.push(p);
        cur = parents[p];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fifty_node_forests_round_trip(parents in arb_forest(50), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..parents.len()).collect();
        // deterministic shuffle of line order
        order.sort_by_key(|i| (*i as u64).wrapping_mul(seed | 1).rotate_left(17));
        let h = Hierarchy::parse(&edge_text(&parents, &order), Path::new("forest.tsv")).unwrap();

        let expected: BTreeSet<(String, String)> = parents
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (label(i), label(p))))
            .collect();
        let got: BTreeSet<(String, String)> = h.edges().into_iter().collect();
        prop_assert_eq!(&got, &expected);
        prop_assert_eq!(h.edge_count(), expected.len());

        let again = Hierarchy::parse(&h.to_edge_list(), Path::new("again.tsv")).unwrap();
        prop_assert_eq!(again.edges(), h.edges());
        prop_assert_eq!(again.to_edge_list(), h.to_edge_list());
    }

    #[test]
    fn parent_queries_match_brute_force(parents in arb_forest(50)) {
        let order: Vec<usize> = (0..parents.len()).collect();
        let h = Hierarchy::parse(&edge_text(&parents, &order), Path::new("forest.tsv")).unwrap();
        let entity = |i: usize| h.node_of(&label(i)).map(|_| Entity::initial(label(i), &h).unwrap());
        let present: Vec<usize> = (0..parents.len()).filter(|i| h.node_of(&label(*i)).is_some()).collect();
        for &a in &present {
            for &b in &present {
                let (ea, eb) = (entity(a).unwrap(), entity(b).unwrap());
                let direct = match (parents[a], parents[b]) {
                    (Some(x), Some(y)) if x == y => Some(label(x)),
                    _ => None,
                };
                let got = h.shared_parent(&ea, &eb).map(|n| h.label(n).to_string());
                prop_assert_eq!(&got, &direct, "shared_parent({}, {})", a, b);
                prop_assert_eq!(h.shared_parent(&eb, &ea), h.shared_parent(&ea, &eb));

                let bs = ancestors(&parents, b);
                let lca = ancestors(&parents, a).into_iter().find(|x| bs.contains(x)).map(label);
                let got = h.common_parent(&ea, &eb, ParentMode::LowestCommonAncestor).map(|n| h.label(n).to_string());
                prop_assert_eq!(&got, &lca, "lca({}, {})", a, b);
                prop_assert_eq!(h.lowest_common_ancestor(&eb, &ea), h.lowest_common_ancestor(&ea, &eb));
            }
        }
    }
}

fn line_of(err: Error) -> usize {
    match err {
        Error::Format { line, .. } => line,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn malformed_input_reports_the_line() {
    let p = Path::new("bad.tsv");
    assert_eq!(line_of(Hierarchy::parse("a\tb\nc d\n", p).unwrap_err()), 2);
    assert_eq!(line_of(Hierarchy::parse("a\tb\n\na\tc\n", p).unwrap_err()), 3);
    assert_eq!(line_of(Hierarchy::parse("a\ta\n", p).unwrap_err()), 1);
    assert!(line_of(Hierarchy::parse("x\ty\na\tb\nb\tc\nc\ta\n", p).unwrap_err()) >= 2);
    assert_eq!(line_of(Hierarchy::parse("a\t\n", p).unwrap_err()), 1);
}

#[test]
fn duplicate_edges_are_tolerated() {
    let h = Hierarchy::parse("a\tb\na\tb\n", Path::new("dup.tsv")).unwrap();
    assert_eq!(h.edge_count(), 1);
}

#[test]
fn entities_outside_the_hierarchy_have_no_parent() {
    let h = Hierarchy::parse("a\tp\nb\tp\n", Path::new("h.tsv")).unwrap();
    let a = Entity::initial("a", &h).unwrap();
    let stray = Entity::initial("kitty", &h).unwrap();
    assert!(stray.node().is_none());
    assert_eq!(h.shared_parent(&a, &stray), None);
    assert_eq!(h.lowest_common_ancestor(&stray, &a), None);
}
