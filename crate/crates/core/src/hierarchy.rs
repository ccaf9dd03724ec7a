//! Entity hierarchy (ImageNet/WordNet style) used by crossover.
//!
//! The on-disk format is a UTF-8 edge list, one `child<TAB>parent` per line.
//! Blank lines and lines starting with `#` are ignored. Each node has at most
//! one parent, so the hierarchy is a forest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Where an entity came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntitySource {
    Initial,
    Crossover,
    Mutation,
    Fuzzing,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    label: String,
    node: Option<NodeId>,
    source: EntitySource,
}

impl Entity {
    /// An entity outside any hierarchy.
    pub fn new(label: impl Into<String>, source: EntitySource) -> Result<Self> {
        let label = label.into().trim().to_string();
        if label.is_empty() {
            return Err(Error::Input("entity label must be non-empty".into()));
        }
        Ok(Self {
            label,
            node: None,
            source,
        })
    }

    /// An initial entity, attached to its hierarchy node when the label is known.
    pub fn initial(label: impl Into<String>, hierarchy: &Hierarchy) -> Result<Self> {
        let mut e = Self::new(label, EntitySource::Initial)?;
        e.node = hierarchy.node_of(&e.label);
        Ok(e)
    }

    pub(crate) fn at_node(hierarchy: &Hierarchy, node: NodeId, source: EntitySource) -> Self {
        Self {
            label: hierarchy.label(node).to_string(),
            node: Some(node),
            source,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn source(&self) -> EntitySource {
        self.source
    }
}

/// How crossover decides that two entities share a parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParentMode {
    /// Both entities have the same direct parent.
    #[default]
    Direct,
    /// Lowest common ancestor, at any depth.
    LowestCommonAncestor,
}

#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    labels: Vec<String>,
    index: HashMap<String, NodeId>,
    parent: Vec<Option<NodeId>>,
}

impl Hierarchy {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.parent.iter().filter(|p| p.is_some()).count()
    }

    pub fn node_of(&self, label: &str) -> Option<NodeId> {
        self.index.get(label).copied()
    }

    pub fn label(&self, node: NodeId) -> &str {
        &self.labels[node.0]
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node.0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.labels.len()).map(NodeId)
    }

    /// Nodes with no children, in file order of first appearance.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut has_child = vec![false; self.len()];
        for p in self.parent.iter().flatten() {
            has_child[p.0] = true;
        }
        self.nodes().filter(|n| !has_child[n.0]).collect()
    }

    /// `(child, parent)` label pairs, sorted.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .nodes()
            .filter_map(|n| self.parent(n).map(|p| (self.label(n).to_string(), self.label(p).to_string())))
            .collect();
        out.sort();
        out
    }

    /// Edge-list text accepted by [`Hierarchy::parse`].
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (c, p) in self.edges() {
            let _ = writeln!(s, "{c}\t{p}");
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut h = Hierarchy::default();
        let mut edge_line: HashMap<NodeId, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fmt_err = |msg: String| Error::Format {
                path: origin.to_path_buf(),
                line: lineno,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(fmt_err(format!("expected `child<TAB>parent`, got {} field(s)", fields.len())));
            }
            let (child, parent) = (fields[0].trim(), fields[1].trim());
            if child.is_empty() || parent.is_empty() {
                return Err(fmt_err("empty label".into()));
            }
            if child == parent {
                return Err(fmt_err(format!("cycle: `{child}` is its own parent")));
            }
            let c = h.intern(child);
            let p = h.intern(parent);
            match h.parent[c.0] {
                Some(existing) if existing == p => continue,
                Some(existing) => {
                    return Err(fmt_err(format!(
                        "`{child}` already has parent `{}`; only forests are supported",
                        h.label(existing)
                    )))
                }
                None => {
                    h.parent[c.0] = Some(p);
                    edge_line.insert(c, lineno);
                }
            }
        }
        if let Some(node) = h.find_cycle() {
            return Err(Error::Format {
                path: origin.to_path_buf(),
                line: edge_line.get(&node).copied().unwrap_or(0),
                msg: format!("cycle through `{}`", h.label(node)),
            });
        }
        Ok(h)
    }

    fn intern(&mut self, label: &str) -> NodeId {
        if let Some(id) = self.index.get(label) {
            return *id;
        }
        let id = NodeId(self.labels.len());
        self.labels.push(label.to_string());
        self.parent.push(None);
        self.index.insert(label.to_string(), id);
        id
    }

    fn find_cycle(&self) -> Option<NodeId> {
        // 0 = unvisited, 1 = on current path, 2 = known acyclic
        let mut state = vec![0u8; self.len()];
        for start in self.nodes() {
            let mut path = Vec::new();
            let mut cur = Some(start);
            while let Some(n) = cur {
                match state[n.0] {
                    2 => break,
                    1 => return Some(n),
                    _ => {
                        state[n.0] = 1;
                        path.push(n);
                        cur = self.parent(n);
                    }
                }
            }
            for n in path {
                state[n.0] = 2;
            }
        }
        None
    }

    fn ancestors(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.parent(node);
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent(p);
        }
        out
    }

    /// Direct parent shared by both entities, if any.
    pub fn shared_parent(&self, a: &Entity, b: &Entity) -> Option<NodeId> {
        let pa = self.parent(self.resolve(a)?)?;
        let pb = self.parent(self.resolve(b)?)?;
        (pa == pb).then_some(pa)
    }

    /// Deepest proper ancestor common to both entities.
    pub fn lowest_common_ancestor(&self, a: &Entity, b: &Entity) -> Option<NodeId> {
        let na = self.resolve(a)?;
        let nb = self.resolve(b)?;
        let bs = self.ancestors(nb);
        self.ancestors(na).into_iter().find(|x| bs.contains(x))
    }

    pub fn common_parent(&self, a: &Entity, b: &Entity, mode: ParentMode) -> Option<NodeId> {
        match mode {
            ParentMode::Direct => self.shared_parent(a, b),
            ParentMode::LowestCommonAncestor => self.lowest_common_ancestor(a, b),
        }
    }

    fn resolve(&self, e: &Entity) -> Option<NodeId> {
        let n = e.node?;
        (n.0 < self.len() && self.labels[n.0] == e.label).then_some(n)
    }
}

pub fn load_hierarchy(path: impl AsRef<Path>) -> Result<Hierarchy> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Hierarchy::parse(&text, path)
}
