#![allow(dead_code)]

use std::collections::BTreeSet;

use missforest::ident::{IdReport, SelectionProfile};
use missforest::MDag;

pub fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

pub fn four_indicator_graph() -> MDag {
    MDag::from_names(
        4,
        &[
            ("X1", "R2"), ("X1", "R3"), ("X1", "R4"), ("X2", "R3"), ("X2", "R4"), ("X3", "R4"),
            ("X3", "R2"), ("R2", "R1"), ("R3", "R1"), ("R4", "R2"), ("R4", "R3"),
        ],
    )
    .unwrap()
}

pub fn pruning_graph() -> MDag {
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

pub fn nonid_graph() -> MDag {
    MDag::from_names(
        5,
        &[
            ("X2", "R5"), ("X1", "R4"), ("X5", "R2"), ("X4", "R1"), ("R5", "R4"), ("R5", "R3"),
            ("R4", "R2"), ("R3", "R2"), ("R2", "R1"),
        ],
    )
    .unwrap()
}

pub fn replacement_graph() -> MDag {
    MDag::from_names(
        5,
        &[
            ("X1", "R3"), ("X3", "R4"), ("X3", "R5"), ("X5", "R2"), ("R5", "R4"), ("R4", "R3"),
            ("R3", "R2"), ("R2", "R1"), ("R5", "R3"),
        ],
    )
    .unwrap()
}

/// One reference row: indicator, parents, then S^x, R^p, C^dir_kk, children, S̃, S^r, S.
pub struct Row {
    pub k: usize,
    pub parents: &'static str,
    pub sets: [&'static [usize]; 7],
}

pub const COLUMNS: [&str; 7] = ["s_x", "r_p", "colluder_self", "tree_children", "s_pre", "s_r", "s_full"];

pub fn profile_columns(p: &SelectionProfile) -> [BTreeSet<usize>; 7] {
    [
        p.s_x.clone(),
        p.r_p.clone(),
        p.colluder_self.clone(),
        p.tree_children.clone(),
        p.s_pre.clone(),
        p.s_r.clone(),
        p.s_full.clone(),
    ]
}

pub fn parents_text(g: &MDag, k: usize) -> String {
    g.parents(missforest::NodeRef::Ind(k)).unwrap().iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

/// Compares a reference row against a computed profile; returns mismatches as text.
pub fn diff_row(g: &MDag, row: &Row, p: &SelectionProfile) -> Vec<String> {
    let mut out = Vec::new();
    if parents_text(g, row.k) != row.parents {
        out.push(format!("R{} parents: got {} want {}", row.k, parents_text(g, row.k), row.parents));
    }
    for (c, (got, want)) in profile_columns(p).iter().zip(row.sets.iter()).enumerate() {
        if *got != set(want) {
            out.push(format!("R{} {}: got {:?} want {:?}", row.k, COLUMNS[c], got, want));
        }
    }
    out
}

pub fn variant<'a>(report: &'a IdReport, k: usize, signature: &str) -> Option<&'a SelectionProfile> {
    report.variants.get(&k)?.iter().find(|v| v.tree.signature() == signature).map(|v| &v.profile)
}

use missforest::NodeRef;
use rand::Rng;

/// Random valid mDAG: indicators get a hidden random order, `R`-edges only go
/// forward in it, and `X`-edges are unrestricted.
pub fn random_mdag<R: Rng>(rng: &mut R, k_max: usize) -> MDag {
    let k = rng.random_range(1..=k_max);
    let mut rank: Vec<usize> = (1..=k).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        rank.swap(i, j);
    }
    let density: f64 = rng.random_range(0.1..0.7);
    let mut edges = Vec::new();
    for h in 1..=k {
        for t in 1..=k {
            if rng.random_bool(density) {
                edges.push((NodeRef::Var(t), NodeRef::Ind(h)));
            }
            if rank[t - 1] < rank[h - 1] && rng.random_bool(density) {
                edges.push((NodeRef::Ind(t), NodeRef::Ind(h)));
            }
        }
    }
    MDag::new(k, edges).unwrap()
}

/// Nodes of the latent-augmented graph: `None` is the latent `U`.
type Aug = Option<NodeRef>;

fn augmented_edges(g: &MDag) -> Vec<(Aug, Aug)> {
    let mut e: Vec<(Aug, Aug)> = g.edges().into_iter().map(|(t, h)| (Some(t), Some(h))).collect();
    e.extend((1..=g.k()).map(|i| (None, Some(NodeRef::Var(i)))));
    e
}

/// d-separation by enumerating every simple path of the latent-augmented
/// skeleton and applying the per-path blocking rules.
pub fn dsep_oracle(g: &MDag, a: NodeRef, b: NodeRef, cond: &BTreeSet<NodeRef>) -> bool {
    let edges = augmented_edges(g);
    let mut nodes: Vec<Aug> = vec![None];
    for i in 1..=g.k() {
        nodes.push(Some(NodeRef::Var(i)));
        nodes.push(Some(NodeRef::Ind(i)));
    }
    let directed = |t: Aug, h: Aug| edges.contains(&(t, h));
    let descendants_in_cond = |v: Aug| {
        let mut stack = vec![v];
        let mut seen = BTreeSet::new();
        while let Some(x) = stack.pop() {
            if !seen.insert(x) {
                continue;
            }
            if let Some(n) = x {
                if cond.contains(&n) {
                    return true;
                }
            }
            stack.extend(edges.iter().filter(|(t, _)| *t == x).map(|(_, h)| *h));
        }
        false
    };
    let open = |path: &[Aug]| {
        path.windows(3).all(|w| {
            let (p, v, n) = (w[0], w[1], w[2]);
            let collider = directed(p, v) && directed(n, v);
            let in_cond = v.is_some_and(|x| cond.contains(&x));
            if collider { descendants_in_cond(v) } else { !in_cond }
        })
    };
    let mut path = vec![Some(a)];
    fn walk(
        path: &mut Vec<Aug>,
        target: Aug,
        nodes: &[Aug],
        adjacent: &dyn Fn(Aug, Aug) -> bool,
        open: &dyn Fn(&[Aug]) -> bool,
    ) -> bool {
        let last = *path.last().unwrap();
        if last == target {
            return open(path);
        }
        for &n in nodes {
            if adjacent(last, n) && !path.contains(&n) {
                path.push(n);
                let found = walk(path, target, nodes, adjacent, open);
                path.pop();
                if found {
                    return true;
                }
            }
        }
        false
    }
    let adjacent = |x: Aug, y: Aug| directed(x, y) || directed(y, x);
    !walk(&mut path, Some(b), &nodes, &adjacent, &open)
}

/// Random query `(a, b, cond)` with `a ≠ b` and neither endpoint conditioned on.
pub fn random_query<R: Rng>(rng: &mut R, g: &MDag) -> (NodeRef, NodeRef, BTreeSet<NodeRef>) {
    let mut all = Vec::new();
    for i in 1..=g.k() {
        all.push(NodeRef::Var(i));
        all.push(NodeRef::Ind(i));
    }
    let a = all[rng.random_range(0..all.len())];
    let mut b = a;
    while b == a {
        b = all[rng.random_range(0..all.len())];
    }
    let cond = all.iter().copied().filter(|&n| n != a && n != b && rng.random_bool(0.35)).collect();
    (a, b, cond)
}

/// Data from an arbitrary mDAG: `X_j ~ N(0, 1)` with a shared factor, and
/// logistic indicators drawn parents first with fixed mild coefficients.
pub fn simulate_mdag<R: Rng>(g: &MDag, n: usize, rng: &mut R) -> missforest::Dataset {
    use rand_distr::StandardNormal;
    let k = g.k();
    let mut order = g.reversed_topological_order();
    order.reverse();
    let mut complete = vec![0.0; n * k];
    let mut observed = vec![true; n * k];
    for row in 0..n {
        let u: f64 = rng.sample(StandardNormal);
        for j in 0..k {
            let e: f64 = rng.sample(StandardNormal);
            complete[row * k + j] = 0.6 * u + 0.8 * e;
        }
        for &i in &order {
            let mut lin = 1.5;
            for &j in g.x_parents(i) {
                lin += 0.5 * complete[row * k + j - 1];
            }
            for &j in g.r_parents(i) {
                lin += if observed[row * k + j - 1] { 0.4 } else { -0.4 };
            }
            observed[row * k + i - 1] = rng.random::<f64>() < 1.0 / (1.0 + (-lin).exp());
        }
    }
    missforest::Dataset::from_masked(k, &complete, &observed)
}
