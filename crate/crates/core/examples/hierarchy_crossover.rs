//! Entity hierarchy queries and the two crossover rules.
//!
//! `cargo run --example hierarchy_crossover`

use ccrt::calibration::{crossover, Individual};
use ccrt::hierarchy::{Entity, ParentMode};
use ccrt::scenario::sample_hierarchy;

fn main() -> ccrt::Result<()> {
    let h = sample_hierarchy();
    println!("sample hierarchy: {} nodes, {} edges, {} leaves", h.len(), h.edge_count(), h.leaves().len());

    let single = |label: &str| -> ccrt::Result<Individual> { Individual::new(vec![Entity::initial(label, &h)?], 0) };
    for (a, b) in [("post exchange", "slop chest"), ("cat", "shark"), ("toucan", "junco")] {
        let (x, y) = (single(a)?, single(b)?);
        let direct = crossover(&x, &y, &h, ParentMode::Direct);
        let lca = crossover(&x, &y, &h, ParentMode::LowestCommonAncestor);
        println!("{a:>14} x {b:<12} -> direct {:?}, lca {:?}", direct.labels(), lca.labels());
    }

    let two = Individual::new(vec![Entity::initial("post exchange", &h)?, Entity::initial("bagel", &h)?], 1)?;
    let child = crossover(&two, &single("slop chest")?, &h, ParentMode::Direct);
    println!("[post exchange, bagel] x [slop chest] -> {:?} (generation {})", child.labels(), child.generation);
    Ok(())
}
