//! Missingness DAGs over variables `X1..XK` and indicators `R1..RK`.
//!
//! Edges always point into an indicator. The target law is left
//! unrestricted, which for d-separation purposes is encoded by a single
//! latent node `U` with an edge into every variable.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A node of an mDAG: a variable `X_i` or an indicator `R_i` (1-based).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeRef {
    Var(usize),
    Ind(usize),
}

impl NodeRef {
    pub fn index(self) -> usize {
        match self {
            NodeRef::Var(i) | NodeRef::Ind(i) => i,
        }
    }

    pub fn is_indicator(self) -> bool {
        matches!(self, NodeRef::Ind(_))
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Var(i) => write!(f, "X{i}"),
            NodeRef::Ind(i) => write!(f, "R{i}"),
        }
    }
}

impl FromStr for NodeRef {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || GraphError::UnknownNode(s.to_string());
        let (kind, digits) = s.split_at_checked(1).ok_or_else(unknown)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return Err(unknown());
        }
        let index: usize = digits.parse().map_err(|_| unknown())?;
        match kind {
            "X" => Ok(NodeRef::Var(index)),
            "R" => Ok(NodeRef::Ind(index)),
            _ => Err(unknown()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("cycle detected among indicators {0:?}")]
    CycleDetected(Vec<String>),
    #[error("edge {tail} -> {head} points into a variable")]
    EdgeIntoVariable { tail: String, head: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate edge {tail} -> {head}")]
    DuplicateEdge { tail: String, head: String },
    #[error("graph must have at least one variable")]
    EmptyGraph,
    #[error("invalid d-separation query: {0}")]
    InvalidQuery(String),
}

/// Validated missingness DAG. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MDag {
    k: usize,
    x_parents: Vec<BTreeSet<usize>>,
    r_parents: Vec<BTreeSet<usize>>,
    r_children: Vec<BTreeSet<usize>>,
    var_children: Vec<BTreeSet<usize>>,
}

impl MDag {
    /// Builds and validates a graph from `(tail, head)` pairs.
    pub fn new(k: usize, edges: impl IntoIterator<Item = (NodeRef, NodeRef)>) -> Result<Self, GraphError> {
        if k == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut g = MDag {
            k,
            x_parents: vec![BTreeSet::new(); k],
            r_parents: vec![BTreeSet::new(); k],
            r_children: vec![BTreeSet::new(); k],
            var_children: vec![BTreeSet::new(); k],
        };
        for (tail, head) in edges {
            g.check_node(tail)?;
            g.check_node(head)?;
            let NodeRef::Ind(h) = head else {
                return Err(GraphError::EdgeIntoVariable { tail: tail.to_string(), head: head.to_string() });
            };
            if tail == head {
                return Err(GraphError::CycleDetected(vec![head.to_string()]));
            }
            let fresh = match tail {
                NodeRef::Var(t) => {
                    g.var_children[t - 1].insert(h);
                    g.x_parents[h - 1].insert(t)
                }
                NodeRef::Ind(t) => {
                    g.r_children[t - 1].insert(h);
                    g.r_parents[h - 1].insert(t)
                }
            };
            if !fresh {
                return Err(GraphError::DuplicateEdge { tail: tail.to_string(), head: head.to_string() });
            }
        }
        let order = g.kahn_sinks_first();
        if order.len() < k {
            let placed: BTreeSet<usize> = order.into_iter().collect();
            let stuck = (1..=k).filter(|i| !placed.contains(i)).map(|i| NodeRef::Ind(i).to_string()).collect();
            return Err(GraphError::CycleDetected(stuck));
        }
        Ok(g)
    }

    /// Builds a graph from textual node names such as `("X1", "R2")`.
    pub fn from_names<S: AsRef<str>>(k: usize, edges: &[(S, S)]) -> Result<Self, GraphError> {
        let parsed = edges
            .iter()
            .map(|(t, h)| Ok((t.as_ref().parse()?, h.as_ref().parse()?)))
            .collect::<Result<Vec<(NodeRef, NodeRef)>, GraphError>>()?;
        Self::new(k, parsed)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn check_node(&self, node: NodeRef) -> Result<(), GraphError> {
        let i = node.index();
        if i == 0 || i > self.k {
            return Err(GraphError::UnknownNode(node.to_string()));
        }
        Ok(())
    }

    fn check_ind(&self, r: usize) -> Result<(), GraphError> {
        self.check_node(NodeRef::Ind(r))
    }

    /// All edges, sorted.
    pub fn edges(&self) -> Vec<(NodeRef, NodeRef)> {
        let mut out = Vec::new();
        for h in 1..=self.k {
            out.extend(self.x_parents[h - 1].iter().map(|&t| (NodeRef::Var(t), NodeRef::Ind(h))));
            out.extend(self.r_parents[h - 1].iter().map(|&t| (NodeRef::Ind(t), NodeRef::Ind(h))));
        }
        out.sort();
        out
    }

    /// Exact in-neighbourhood of a node.
    pub fn parents(&self, node: NodeRef) -> Result<BTreeSet<NodeRef>, GraphError> {
        self.check_node(node)?;
        Ok(match node {
            NodeRef::Var(_) => BTreeSet::new(),
            NodeRef::Ind(h) => self.x_parents[h - 1]
                .iter()
                .map(|&i| NodeRef::Var(i))
                .chain(self.r_parents[h - 1].iter().map(|&i| NodeRef::Ind(i)))
                .collect(),
        })
    }

    /// Indices `j` with `X_j -> R_r`. Panics on an out-of-range index.
    pub fn x_parents(&self, r: usize) -> &BTreeSet<usize> {
        &self.x_parents[r - 1]
    }

    /// Indices `j` with `R_j -> R_r`. Panics on an out-of-range index.
    pub fn r_parents(&self, r: usize) -> &BTreeSet<usize> {
        &self.r_parents[r - 1]
    }

    /// Indicators that have `X_j` as a parent.
    pub fn var_children(&self, j: usize) -> &BTreeSet<usize> {
        &self.var_children[j - 1]
    }

    /// Indicator descendants of `R_r`, including `R_r` itself.
    pub fn descendants(&self, r: usize) -> Result<BTreeSet<usize>, GraphError> {
        self.check_ind(r)?;
        let mut seen = BTreeSet::from([r]);
        let mut queue = VecDeque::from([r]);
        while let Some(v) = queue.pop_front() {
            for &c in &self.r_children[v - 1] {
                if seen.insert(c) {
                    queue.push_back(c);
                }
            }
        }
        Ok(seen)
    }

    fn kahn_sinks_first(&self) -> Vec<usize> {
        let mut remaining: Vec<usize> = self.r_children.iter().map(|c| c.len()).collect();
        let mut ready: BTreeSet<usize> = (1..=self.k).filter(|&i| remaining[i - 1] == 0).collect();
        let mut order = Vec::with_capacity(self.k);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &p in &self.r_parents[v - 1] {
                remaining[p - 1] -= 1;
                if remaining[p - 1] == 0 {
                    ready.insert(p);
                }
            }
        }
        order
    }

    /// Reversed topological order on indicators: for every `R_a -> R_b`,
    /// `R_b` comes before `R_a`. Ties go to the lowest index.
    pub fn reversed_topological_order(&self) -> Vec<usize> {
        self.kahn_sinks_first()
    }

    /// Graphical fixing: removes every edge whose head is in `fixed`.
    pub fn fix_indicators(&self, fixed: &BTreeSet<usize>) -> MDag {
        let mut g = self.clone();
        for &h in fixed {
            if h == 0 || h > self.k {
                continue;
            }
            for t in std::mem::take(&mut g.x_parents[h - 1]) {
                g.var_children[t - 1].remove(&h);
            }
            for t in std::mem::take(&mut g.r_parents[h - 1]) {
                g.r_children[t - 1].remove(&h);
            }
        }
        g
    }

    fn node_id(&self, node: NodeRef) -> usize {
        match node {
            NodeRef::Var(i) => i - 1,
            NodeRef::Ind(i) => self.k + i - 1,
        }
    }

    fn latent_id(&self) -> usize {
        2 * self.k
    }

    /// Parent lists of the latent-augmented graph, indexed by node id.
    pub(crate) fn augmented_parents(&self) -> Vec<Vec<usize>> {
        let mut pa = vec![Vec::new(); 2 * self.k + 1];
        for i in 0..self.k {
            pa[i].push(self.latent_id());
        }
        for h in 1..=self.k {
            let id = self.node_id(NodeRef::Ind(h));
            pa[id].extend(self.x_parents[h - 1].iter().map(|&t| t - 1));
            pa[id].extend(self.r_parents[h - 1].iter().map(|&t| self.k + t - 1));
        }
        pa
    }

    /// d-separation of `a` and `b` given `cond` in the latent-augmented graph,
    /// via the moralized ancestral graph.
    pub fn d_separated(&self, a: NodeRef, b: NodeRef, cond: &BTreeSet<NodeRef>) -> Result<bool, GraphError> {
        self.check_node(a)?;
        self.check_node(b)?;
        for &c in cond {
            self.check_node(c)?;
        }
        if a == b {
            return Err(GraphError::InvalidQuery(format!("{a} queried against itself")));
        }
        if cond.contains(&a) || cond.contains(&b) {
            return Err(GraphError::InvalidQuery("endpoint in conditioning set".into()));
        }
        let pa = self.augmented_parents();
        let total = pa.len();
        let (ia, ib) = (self.node_id(a), self.node_id(b));
        let given: Vec<usize> = cond.iter().map(|&c| self.node_id(c)).collect();

        let mut anc = vec![false; total];
        let mut stack: Vec<usize> = given.iter().copied().chain([ia, ib]).collect();
        while let Some(v) = stack.pop() {
            if !anc[v] {
                anc[v] = true;
                stack.extend(pa[v].iter().copied());
            }
        }

        let mut adj = vec![Vec::new(); total];
        for v in (0..total).filter(|&v| anc[v]) {
            for (n, &p) in pa[v].iter().enumerate() {
                adj[v].push(p);
                adj[p].push(v);
                for &q in &pa[v][n + 1..] {
                    adj[p].push(q);
                    adj[q].push(p);
                }
            }
        }

        let mut blocked = vec![false; total];
        for g in given {
            blocked[g] = true;
        }
        let mut seen = vec![false; total];
        seen[ia] = true;
        let mut queue = VecDeque::from([ia]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if w == ib {
                    return Ok(false);
                }
                if !seen[w] && !blocked[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        Ok(true)
    }
}

impl fmt::Display for MDag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "vars: {}", self.k)?;
        for (t, h) in self.edges() {
            writeln!(f, "{t} -> {h}")?;
        }
        Ok(())
    }
}
