//! Intervention-tree identification of propensity scores.
//!
//! Indicators are processed along a reversed topological order. Each one
//! either gets an intervention tree in the forest or lands in the
//! non-identified set `D`.

use std::collections::{BTreeMap, BTreeSet};

use log::trace;
use serde::{Deserialize, Serialize};

use crate::graph::{MDag, NodeRef};

pub type IndSet = BTreeSet<usize>;

/// Intervention tree rooted at an indicator. Children are kept in `τ` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdTree {
    pub root: usize,
    pub children: Vec<IdTree>,
    /// Children removed from this node by pruning, ascending.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pruned: Vec<usize>,
}

impl IdTree {
    pub fn leaf(root: usize) -> Self {
        IdTree { root, children: Vec::new(), pruned: Vec::new() }
    }

    pub fn child_roots(&self) -> Vec<usize> {
        self.children.iter().map(|c| c.root).collect()
    }

    pub fn child_set(&self) -> IndSet {
        self.children.iter().map(|c| c.root).collect()
    }

    pub fn child(&self, root: usize) -> Option<&IdTree> {
        self.children.iter().find(|c| c.root == root)
    }

    fn remove_child(&mut self, root: usize) -> bool {
        let before = self.children.len();
        self.children.retain(|c| c.root != root);
        let removed = self.children.len() < before;
        if removed {
            if let Err(pos) = self.pruned.binary_search(&root) {
                self.pruned.insert(pos, root);
            }
        }
        removed
    }

    fn replace_child(&mut self, sub: IdTree) {
        if let Some(slot) = self.children.iter_mut().find(|c| c.root == sub.root) {
            *slot = sub;
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(IdTree::node_count).sum::<usize>()
    }

    /// Canonical text of the live structure, e.g. `R3(R1,R2)`.
    pub fn signature(&self) -> String {
        let mut out = String::new();
        self.write_signature(&mut out);
        out
    }

    fn write_signature(&self, out: &mut String) {
        out.push('R');
        out.push_str(&self.root.to_string());
        if !self.children.is_empty() {
            out.push('(');
            for (n, c) in self.children.iter().enumerate() {
                if n > 0 {
                    out.push(',');
                }
                c.write_signature(out);
            }
            out.push(')');
        }
    }

    /// FNV-1a hash of [`IdTree::signature`]; stable across runs and platforms.
    pub fn structure_hash(&self) -> u64 {
        self.signature().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    /// Every subtree, parents before children.
    pub fn subtrees(&self) -> Vec<&IdTree> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.subtrees());
        }
        out
    }
}

/// Selection sets attached to one (possibly pruned) tree.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionProfile {
    pub s_x: IndSet,
    pub r_p: IndSet,
    pub colluder_self: IndSet,
    pub tree_children: IndSet,
    pub s_pre: IndSet,
    pub s_r: IndSet,
    pub s_full: IndSet,
}

/// A pruned form of an indicator's tree that appears inside some forest tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedVariant {
    pub tree: IdTree,
    pub profile: SelectionProfile,
}

/// One step of the identification run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    /// Independence check for `root` with its current children.
    Check { root: usize, children: Vec<usize>, r_d: IndSet },
    /// Child removed because intervening on it selects on `R^d`.
    PruneColluder { root: usize, child: usize },
    /// Evaluation of the tree-prune trigger for a child. `via_child_parents`
    /// is the propagation reading (`R_j ∈ pa(R_i)`), `via_root_parents` the
    /// literal one (`R_j ∈ pa(R_k)`); only the former drives pruning.
    PruneTrigger { root: usize, child: usize, via_branch_update: bool, via_child_parents: bool, via_root_parents: bool },
    /// A pruned subtree was re-identified and spliced back.
    Reidentified { root: usize, child: usize, signature: String },
    /// A pruned subtree lost identification and was removed.
    Dropped { root: usize, child: usize },
    /// A pass changed nothing; identification fails.
    Stalled { root: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdReport {
    pub k: usize,
    pub order: Vec<usize>,
    pub forest: BTreeMap<usize, IdTree>,
    /// Tree state at the point of failure, for indicators in `D`.
    pub failed_trees: BTreeMap<usize, IdTree>,
    pub profiles: BTreeMap<usize, SelectionProfile>,
    pub variants: BTreeMap<usize, Vec<PrunedVariant>>,
    pub not_identified: IndSet,
    pub target_law_identified: bool,
    pub trace: Vec<TraceEvent>,
}

impl IdReport {
    pub fn is_identified(&self, r: usize) -> bool {
        self.forest.contains_key(&r)
    }

    /// Tree of `r`: the forest entry, or the failed attempt.
    pub fn tree(&self, r: usize) -> Option<&IdTree> {
        self.forest.get(&r).or_else(|| self.failed_trees.get(&r))
    }
}

/// `(S^x_k, R^p_k, C^dir_{k,k})`.
pub fn selection_primitives(g: &MDag, k: usize) -> (IndSet, IndSet, IndSet) {
    let s_x = g.x_parents(k).clone();
    let de = g.descendants(k).unwrap_or_default();
    let r_p = s_x.intersection(&de).copied().collect();
    (s_x, r_p, colluder_set(g, k, k))
}

/// `C^dir_{k,j}`: descendants of `R_k` (inclusive) having `X_j` as a parent.
pub fn colluder_set(g: &MDag, k: usize, j: usize) -> IndSet {
    let de = g.descendants(k).unwrap_or_default();
    g.var_children(j).intersection(&de).copied().collect()
}

/// `S_i` of a tree, computed bottom-up from its live structure.
pub fn selection_set(g: &MDag, tree: &IdTree) -> IndSet {
    let pre = pre_selection_set(g, tree);
    let mut s = g.x_parents(tree.root).clone();
    s.extend(pre.intersection(g.r_parents(tree.root)));
    s
}

/// `S̃_k = S^x_k ∪ ⋃_{children} S_i`.
pub fn pre_selection_set(g: &MDag, tree: &IdTree) -> IndSet {
    let mut s = g.x_parents(tree.root).clone();
    for c in &tree.children {
        s.extend(selection_set(g, c));
    }
    s
}

/// Full selection profile of a tree.
pub fn profile_of(g: &MDag, tree: &IdTree) -> SelectionProfile {
    let (s_x, r_p, colluder_self) = selection_primitives(g, tree.root);
    let s_pre = pre_selection_set(g, tree);
    let s_r: IndSet = s_pre.intersection(g.r_parents(tree.root)).copied().collect();
    let s_full = s_x.union(&s_r).copied().collect();
    SelectionProfile { s_x, r_p, colluder_self, tree_children: tree.child_set(), s_pre, s_r, s_full }
}

/// `R^d_k`: members of `S̃_k \ pa(R_k)` not d-separated from `R_k` given
/// `pa(R_k)` once the tree's children are fixed. `R_k` counts as dependent
/// on itself.
pub fn dependent_indicators(g: &MDag, k: usize, tree: &IdTree, s_pre: &IndSet) -> IndSet {
    let fixed = g.fix_indicators(&tree.child_set());
    let cond = g.parents(NodeRef::Ind(k)).unwrap_or_default();
    s_pre
        .iter()
        .copied()
        .filter(|&j| !cond.contains(&NodeRef::Ind(j)))
        .filter(|&j| {
            j == k || !fixed.d_separated(NodeRef::Ind(k), NodeRef::Ind(j), &cond).expect("valid d-separation query")
        })
        .collect()
}

struct Engine<'g> {
    g: &'g MDag,
    forest: BTreeMap<usize, IdTree>,
    d: IndSet,
    trace: Vec<TraceEvent>,
}

impl Engine<'_> {
    fn tree_construction(&mut self, k: usize, order: &[usize]) -> (bool, IdTree) {
        let (_, _, colluder_self) = selection_primitives(self.g, k);
        let de = self.g.descendants(k).expect("indicator in graph");
        let mut tree = IdTree::leaf(k);
        for &i in order {
            if i != k && de.contains(&i) && !colluder_self.contains(&i) && !self.d.contains(&i) {
                tree.children.push(self.forest[&i].clone());
            }
        }
        let ok = self.id_status(k, &mut tree);
        (ok, tree)
    }

    fn id_status(&mut self, k: usize, tree: &mut IdTree) -> bool {
        let g = self.g;
        let (_, r_p, _) = selection_primitives(g, k);
        loop {
            let s_pre = pre_selection_set(g, tree);
            let r_d = dependent_indicators(g, k, tree, &s_pre);
            trace!("id-status R{k}: children {:?}, R^d {:?}", tree.child_roots(), r_d);
            self.trace.push(TraceEvent::Check { root: k, children: tree.child_roots(), r_d: r_d.clone() });
            if r_d.is_empty() {
                return true;
            }
            if !r_d.is_disjoint(&r_p) {
                return false;
            }
            let before = tree.signature();
            let colluders: BTreeMap<usize, IndSet> = r_d.iter().map(|&j| (j, colluder_set(g, k, j))).collect();
            let c_k: IndSet = colluders.values().flatten().copied().collect();
            let mut branches: BTreeMap<usize, IdTree> = BTreeMap::new();
            for i in tree.child_roots() {
                if c_k.contains(&i) {
                    tree.remove_child(i);
                    self.trace.push(TraceEvent::PruneColluder { root: k, child: i });
                    continue;
                }
                let Some(sub) = tree.child(i).cloned() else { continue };
                let grandchildren = sub.child_set();
                let via_branch_update = grandchildren.iter().any(|m| branches.contains_key(m));
                let propagates = |parents: &IndSet| {
                    colluders
                        .iter()
                        .any(|(j, c)| parents.contains(j) && !c.is_disjoint(&grandchildren))
                };
                let via_child_parents = propagates(g.r_parents(i));
                let via_root_parents = propagates(g.r_parents(k));
                trace!(
                    "prune trigger R{k}/R{i}: branch {via_branch_update}, pa(R{i}) {via_child_parents}, pa(R{k}) {via_root_parents}"
                );
                self.trace.push(TraceEvent::PruneTrigger {
                    root: k,
                    child: i,
                    via_branch_update,
                    via_child_parents,
                    via_root_parents,
                });
                if via_branch_update || via_child_parents {
                    self.tree_prune(k, sub, tree, &c_k, &mut branches);
                }
            }
            if tree.signature() == before {
                self.trace.push(TraceEvent::Stalled { root: k });
                return false;
            }
        }
    }

    fn tree_prune(
        &mut self,
        k: usize,
        mut sub: IdTree,
        tree: &mut IdTree,
        c_k: &IndSet,
        branches: &mut BTreeMap<usize, IdTree>,
    ) {
        let i = sub.root;
        for m in sub.child_roots() {
            if let Some(updated) = branches.get(&m) {
                sub.replace_child(updated.clone());
            }
            if c_k.contains(&m) {
                sub.remove_child(m);
            }
        }
        if self.id_status(i, &mut sub) {
            self.trace.push(TraceEvent::Reidentified { root: k, child: i, signature: sub.signature() });
            branches.insert(i, sub.clone());
            tree.replace_child(sub);
        } else {
            self.trace.push(TraceEvent::Dropped { root: k, child: i });
            tree.remove_child(i);
        }
    }
}

/// Runs the full identification pass over `g`.
pub fn identify(g: &MDag) -> IdReport {
    let order = g.reversed_topological_order();
    let mut engine = Engine { g, forest: BTreeMap::new(), d: IndSet::new(), trace: Vec::new() };
    let mut failed_trees = BTreeMap::new();
    let mut profiles = BTreeMap::new();
    for &k in &order {
        let (_, r_p, _) = selection_primitives(g, k);
        let (ok, tree) = if r_p.is_empty() { (true, IdTree::leaf(k)) } else { engine.tree_construction(k, &order) };
        profiles.insert(k, profile_of(g, &tree));
        if ok {
            engine.forest.insert(k, tree);
        } else {
            engine.d.insert(k);
            failed_trees.insert(k, tree);
        }
    }

    let mut variants: BTreeMap<usize, Vec<PrunedVariant>> = BTreeMap::new();
    for tree in engine.forest.values() {
        for sub in tree.subtrees().into_iter().skip(1) {
            let canonical = &engine.forest[&sub.root];
            if sub.signature() == canonical.signature() {
                continue;
            }
            let list = variants.entry(sub.root).or_default();
            if list.iter().all(|v| v.tree.signature() != sub.signature()) {
                list.push(PrunedVariant { tree: sub.clone(), profile: profile_of(g, sub) });
            }
        }
    }
    for list in variants.values_mut() {
        list.sort_by_key(|v| v.tree.signature());
    }

    let Engine { forest, d, trace, .. } = engine;
    IdReport {
        k: g.k(),
        order,
        forest,
        failed_trees,
        profiles,
        variants,
        target_law_identified: d.is_empty(),
        not_identified: d,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> IndSet {
        xs.iter().copied().collect()
    }

    fn fig2b() -> MDag {
        MDag::from_names(
            6,
            &[
                ("X1", "R3"), ("X3", "R4"), ("X3", "R5"), ("X3", "R6"), ("X4", "R1"), ("X4", "R6"),
                ("X5", "R2"), ("X6", "R5"), ("R6", "R5"), ("R6", "R3"), ("R5", "R3"), ("R4", "R3"),
                ("R3", "R2"), ("R2", "R1"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn primitives() {
        let g = fig2b();
        assert_eq!(selection_primitives(&g, 5), (set(&[3, 6]), set(&[3]), set(&[2])));
        assert_eq!(colluder_set(&g, 4, 4), set(&[1]));
        let empty = MDag::from_names::<&str>(2, &[]).unwrap();
        assert_eq!(selection_primitives(&empty, 1), (set(&[]), set(&[]), set(&[])));
    }

    #[test]
    fn signature_and_hash() {
        let t = IdTree {
            root: 3,
            children: vec![IdTree::leaf(1), IdTree { root: 2, children: vec![IdTree::leaf(1)], pruned: vec![] }],
            pruned: vec![],
        };
        assert_eq!(t.signature(), "R3(R1,R2(R1))");
        assert_eq!(t.node_count(), 4);
        assert_ne!(t.structure_hash(), IdTree::leaf(3).structure_hash());
    }

    #[test]
    fn self_selection_fires_for_pi4() {
        let g = fig2b();
        let report = identify(&g);
        let first = report
            .trace
            .iter()
            .find_map(|e| match e {
                TraceEvent::Check { root: 4, children, r_d } => Some((children.clone(), r_d.clone())),
                _ => None,
            })
            .unwrap();
        assert_eq!(first, (vec![2, 3], set(&[4])));
    }

    #[test]
    fn prune_empty_rd_leaves_tree() {
        let g = MDag::from_names(2, &[("X1", "R2"), ("R2", "R1")]).unwrap();
        let report = identify(&g);
        assert!(report.target_law_identified);
        assert_eq!(report.forest[&2].signature(), "R2(R1)");
    }

    #[test]
    fn self_censoring_is_not_identified() {
        let g = MDag::from_names(1, &[("X1", "R1")]).unwrap();
        let report = identify(&g);
        assert_eq!(report.not_identified, set(&[1]));
        assert!(!report.target_law_identified);
    }
}
