//! Agent morphology as a rooted tree of nodes.
//!
//! Node 0 of a chain is the root (body) and nodes `1..=n` are the joints,
//! one per link. Message passing runs over undirected edges, with both
//! directions materialized by [`MorphologyGraph::directed_edges`].

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MorphologyError {
    #[error("a chain needs at least one link, got {0}")]
    InvalidLinkCount(usize),
    #[error("node index {index} out of range for {count} nodes")]
    NodeOutOfRange { index: usize, count: usize },
    #[error("({0}, {1}) is not an edge")]
    NotAnEdge(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Root,
    Joint,
}

impl NodeKind {
    pub fn index(self) -> usize {
        match self {
            NodeKind::Root => 0,
            NodeKind::Joint => 1,
        }
    }
}

/// Static per-node descriptor fed to the object-aware message function.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDescriptor {
    pub length: f64,
    pub mass: f64,
    pub kind_onehot: [f64; 2],
    /// Filled in when the graph is assembled.
    pub degree: usize,
}

impl ShapeDescriptor {
    pub fn new(kind: NodeKind, length: f64, mass: f64) -> Self {
        let mut kind_onehot = [0.0; 2];
        kind_onehot[kind.index()] = 1.0;
        Self {
            length,
            mass,
            kind_onehot,
            degree: 0,
        }
    }

    /// Width of [`ShapeDescriptor::features`].
    pub const FEATURES: usize = 4;

    pub fn features(&self) -> [f64; Self::FEATURES] {
        [self.length, self.mass, self.kind_onehot[0], self.kind_onehot[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub shape: ShapeDescriptor,
    pub parent: Option<usize>,
}

/// One directed message route: `sender -> receiver` with its GCN weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectedEdge {
    pub receiver: usize,
    pub sender: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphologyGraph {
    nodes: Vec<NodeSpec>,
    edges: Vec<(usize, usize)>,
    root_skip: bool,
    adjacency: Vec<Vec<usize>>,
}

/// A broken graph invariant, reported by [`MorphologyGraph::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoRoot,
    MultipleRoots(usize),
    SelfLoop(usize),
    DuplicateEdge(usize, usize),
    EdgeOutOfRange(usize, usize),
    EdgeCount { expected: usize, found: usize },
    Disconnected,
    ParentOrder(usize),
    MissingParent(usize),
    NonPositiveShape(usize),
    ZeroDegree(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoRoot => write!(f, "no root"),
            Violation::MultipleRoots(n) => write!(f, "multiple roots ({n})"),
            Violation::SelfLoop(v) => write!(f, "self-loop at node {v}"),
            Violation::DuplicateEdge(u, v) => write!(f, "duplicate edge ({u}, {v})"),
            Violation::EdgeOutOfRange(u, v) => write!(f, "edge ({u}, {v}) references a missing node"),
            Violation::EdgeCount { expected, found } => {
                write!(f, "tree needs {expected} edges, found {found}")
            }
            Violation::Disconnected => write!(f, "graph is disconnected"),
            Violation::ParentOrder(v) => write!(f, "node {v} precedes its parent"),
            Violation::MissingParent(v) => write!(f, "joint node {v} has no parent"),
            Violation::NonPositiveShape(v) => write!(f, "node {v} has nonpositive length or mass"),
            Violation::ZeroDegree(v) => write!(f, "node {v} has degree 0"),
        }
    }
}

impl MorphologyGraph {
    /// Assembles a graph and computes degrees without validating it; call
    /// [`validate`](Self::validate) to check the tree invariants.
    pub fn new(nodes: Vec<NodeSpec>, edges: Vec<(usize, usize)>, root_skip: bool) -> Self {
        let mut graph = Self {
            adjacency: vec![Vec::new(); nodes.len()],
            nodes,
            edges,
            root_skip,
        };
        graph.rebuild_adjacency();
        graph
    }

    /// Root plus `n_links` joints connected in a line.
    pub fn chain(
        n_links: usize,
        link_length: f64,
        link_mass: f64,
        root_skip: bool,
    ) -> Result<Self, MorphologyError> {
        if n_links < 1 {
            return Err(MorphologyError::InvalidLinkCount(n_links));
        }
        let mut nodes = vec![NodeSpec {
            kind: NodeKind::Root,
            shape: ShapeDescriptor::new(NodeKind::Root, link_length, link_mass),
            parent: None,
        }];
        nodes.extend((1..=n_links).map(|k| NodeSpec {
            kind: NodeKind::Joint,
            shape: ShapeDescriptor::new(NodeKind::Joint, link_length, link_mass),
            parent: Some(k - 1),
        }));
        let edges = (0..n_links).map(|k| (k, k + 1)).collect();
        Ok(Self::new(nodes, edges, root_skip))
    }

    fn root_index(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == NodeKind::Root)
    }

    fn rebuild_adjacency(&mut self) {
        let n = self.nodes.len();
        let mut sets = vec![BTreeSet::new(); n];
        for &(u, v) in &self.edges {
            if u < n && v < n && u != v {
                sets[u].insert(v);
                sets[v].insert(u);
            }
        }
        if self.root_skip {
            if let Some(r) = self.root_index() {
                for v in (0..n).filter(|&v| v != r) {
                    sets[r].insert(v);
                    sets[v].insert(r);
                }
            }
        }
        self.adjacency = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        for (node, adj) in self.nodes.iter_mut().zip(&self.adjacency) {
            node.shape.degree = adj.len();
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    /// Base (tree) edges, excluding root-skip additions.
    pub fn base_edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn root_skip(&self) -> bool {
        self.root_skip
    }

    /// Every undirected edge of the message topology, `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (u, adj) in self.adjacency.iter().enumerate() {
            out.extend(adj.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        out
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    /// Sorted, duplicate-free neighbors of `v`.
    pub fn neighbors(&self, v: usize) -> Result<&[usize], MorphologyError> {
        self.adjacency
            .get(v)
            .map(Vec::as_slice)
            .ok_or(MorphologyError::NodeOutOfRange {
                index: v,
                count: self.nodes.len(),
            })
    }

    /// `1 / sqrt(|N(u)| * |N(v)|)` for an edge `(u, v)`.
    pub fn gcn_norm(&self, u: usize, v: usize) -> Result<f64, MorphologyError> {
        let nu = self.neighbors(u)?;
        self.neighbors(v)?;
        if nu.binary_search(&v).is_err() {
            return Err(MorphologyError::NotAnEdge(u, v));
        }
        Ok(1.0 / ((self.degree(u) * self.degree(v)) as f64).sqrt())
    }

    /// Both directions of every edge, ordered by receiver then sender.
    pub fn directed_edges(&self) -> Vec<DirectedEdge> {
        let mut out = Vec::new();
        for (receiver, adj) in self.adjacency.iter().enumerate() {
            for &sender in adj {
                out.push(DirectedEdge {
                    receiver,
                    sender,
                    norm: 1.0 / ((adj.len() * self.degree(sender)) as f64).sqrt(),
                });
            }
        }
        out
    }

    pub fn kinds(&self) -> Vec<NodeKind> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    /// Checks every invariant and returns all violations found.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let n = self.nodes.len();
        let mut violations = Vec::new();

        let roots = self.nodes.iter().filter(|s| s.kind == NodeKind::Root).count();
        match roots {
            0 => violations.push(Violation::NoRoot),
            1 => {}
            k => violations.push(Violation::MultipleRoots(k)),
        }

        let mut seen = BTreeSet::new();
        for &(u, v) in &self.edges {
            if u >= n || v >= n {
                violations.push(Violation::EdgeOutOfRange(u, v));
                continue;
            }
            if u == v {
                violations.push(Violation::SelfLoop(u));
                continue;
            }
            if !seen.insert((u.min(v), u.max(v))) {
                violations.push(Violation::DuplicateEdge(u.min(v), u.max(v)));
            }
        }
        if n > 0 && self.edges.len() != n - 1 {
            violations.push(Violation::EdgeCount {
                expected: n - 1,
                found: self.edges.len(),
            });
        }
        if n > 0 && !self.base_connected(&seen) {
            violations.push(Violation::Disconnected);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            match (node.kind, node.parent) {
                (_, Some(p)) if p >= i => violations.push(Violation::ParentOrder(i)),
                (NodeKind::Joint, None) => violations.push(Violation::MissingParent(i)),
                _ => {}
            }
            if !(node.shape.length > 0.0 && node.shape.mass > 0.0) {
                violations.push(Violation::NonPositiveShape(i));
            }
            if n > 1 && self.adjacency[i].is_empty() {
                violations.push(Violation::ZeroDegree(i));
            }
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    fn base_connected(&self, edges: &BTreeSet<(usize, usize)>) -> bool {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut visited = vec![false; n];
        let mut stack = vec![0];
        visited[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    stack.push(v);
                }
            }
        }
        visited.into_iter().all(|x| x)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`. Used to check
    /// that the network does not depend on node numbering.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.nodes.len();
        assert_eq!(perm.len(), n);
        let mut nodes = vec![None; n];
        for (old, node) in self.nodes.iter().enumerate() {
            let mut node = node.clone();
            node.parent = node.parent.map(|p| perm[p]);
            nodes[perm[old]] = Some(node);
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::new(
            nodes.into_iter().map(|n| n.expect("perm is a bijection")).collect(),
            edges,
            self.root_skip,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain(n: usize, skip: bool) -> MorphologyGraph {
        MorphologyGraph::chain(n, 1.0, 1.0, skip).unwrap()
    }

    #[test]
    fn chain_shapes() {
        let g1 = chain(1, false);
        assert_eq!(g1.node_count(), 2);
        assert_eq!(g1.edges().len(), 1);
        assert_eq!(g1.degrees(), vec![1, 1]);

        assert_eq!(chain(3, false).degrees(), vec![1, 2, 2, 1]);

        let skip = chain(3, true);
        assert_eq!(skip.edges(), vec![(0, 1), (0, 2), (0, 3), (1, 2), (2, 3)]);
        assert_eq!(skip.degree(0), 3);
        assert_eq!(skip.nodes()[0].shape.degree, 3);
    }

    #[test]
    fn zero_links_rejected() {
        assert_eq!(
            MorphologyGraph::chain(0, 1.0, 1.0, false).unwrap_err(),
            MorphologyError::InvalidLinkCount(0)
        );
    }

    #[test]
    fn neighbor_queries() {
        assert_eq!(chain(3, false).neighbors(1).unwrap(), &[0, 2]);
        assert_eq!(chain(1, false).neighbors(0).unwrap(), &[1]);
        assert_eq!(chain(3, true).neighbors(0).unwrap(), &[1, 2, 3]);
        assert!(chain(3, false).neighbors(4).is_err());
    }

    #[test]
    fn gcn_norm_values() {
        let g = chain(3, false);
        assert!((g.gcn_norm(0, 1).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(g.gcn_norm(1, 2).unwrap(), 0.5);
        assert_eq!(g.gcn_norm(2, 1).unwrap(), g.gcn_norm(1, 2).unwrap());
        assert_eq!(g.gcn_norm(0, 2).unwrap_err(), MorphologyError::NotAnEdge(0, 2));
    }

    #[test]
    fn validation_reports_all_violations() {
        assert!(chain(3, false).validate().is_ok());

        let base = chain(3, false);
        let mut edges = base.base_edges().to_vec();
        edges.push((1, 2));
        let dup = MorphologyGraph::new(base.nodes().to_vec(), edges, false);
        let v = dup.validate().unwrap_err();
        assert!(v.contains(&Violation::DuplicateEdge(1, 2)));
        assert!(v.iter().any(|x| x.to_string().starts_with("duplicate edge")));

        let mut nodes = base.nodes().to_vec();
        nodes[2].kind = NodeKind::Root;
        nodes[2].parent = None;
        let two_roots = MorphologyGraph::new(nodes, base.base_edges().to_vec(), false);
        let v = two_roots.validate().unwrap_err();
        assert!(v.iter().any(|x| x.to_string().starts_with("multiple roots")));

        let broken = MorphologyGraph::new(base.nodes().to_vec(), vec![(0, 1), (2, 2), (2, 3)], false);
        let v = broken.validate().unwrap_err();
        assert!(v.contains(&Violation::SelfLoop(2)));
        assert!(v.contains(&Violation::Disconnected));
    }

    proptest! {
        #[test]
        fn chains_are_valid(n in 1usize..40, skip in any::<bool>()) {
            let g = chain(n, skip);
            prop_assert!(g.validate().is_ok());
            let degree_sum: usize = g.degrees().iter().sum();
            prop_assert_eq!(degree_sum, 2 * g.edges().len());
            for (u, v) in g.edges() {
                prop_assert_eq!(g.gcn_norm(u, v).unwrap(), g.gcn_norm(v, u).unwrap());
            }
            prop_assert_eq!(g.directed_edges().len(), 2 * g.edges().len());
        }
    }
}
