mod common;

use std::collections::BTreeSet;

use common::*;
use missforest::{MDag, NodeRef};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_subset(rng: &mut ChaCha8Rng, k: usize) -> BTreeSet<usize> {
    (1..=k).filter(|_| rng.random_bool(0.4)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn dsep_matches_path_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mdag(&mut rng, 4);
        for _ in 0..4 {
            if g.k() == 1 && rng.random_bool(0.5) {
                continue;
            }
            let (a, b, cond) = random_query(&mut rng, &g);
            prop_assert_eq!(g.d_separated(a, b, &cond).unwrap(), dsep_oracle(&g, a, b, &cond), "{} {} {:?}\n{}", a, b, cond, g);
            prop_assert_eq!(g.d_separated(a, b, &cond).unwrap(), g.d_separated(b, a, &cond).unwrap());
        }
    }

    #[test]
    fn fixing_composes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mdag(&mut rng, 6);
        let a = random_subset(&mut rng, g.k());
        let b: BTreeSet<usize> = random_subset(&mut rng, g.k()).difference(&a).copied().collect();
        let both: BTreeSet<usize> = a.union(&b).copied().collect();
        prop_assert_eq!(g.fix_indicators(&both), g.fix_indicators(&a).fix_indicators(&b));
        prop_assert_eq!(g.fix_indicators(&a).fix_indicators(&a), g.fix_indicators(&a));
        for &h in &both {
            prop_assert!(g.fix_indicators(&both).parents(NodeRef::Ind(h)).unwrap().is_empty());
        }
    }

    #[test]
    fn descendants_reflexive_and_monotone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mdag(&mut rng, 6);
        let order = g.reversed_topological_order();
        let (lo, hi) = (rng.random_range(0..g.k()), rng.random_range(0..g.k()));
        let mut edges = g.edges();
        if lo < hi {
            let e = (NodeRef::Ind(order[hi]), NodeRef::Ind(order[lo]));
            if !edges.contains(&e) {
                edges.push(e);
            }
        }
        let h = MDag::new(g.k(), edges).unwrap();
        for r in 1..=g.k() {
            let de = g.descendants(r).unwrap();
            prop_assert!(de.contains(&r));
            prop_assert!(de.is_subset(&h.descendants(r).unwrap()));
        }
    }

    #[test]
    fn order_is_valid_and_input_order_free(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mdag(&mut rng, 7);
        let order = g.reversed_topological_order();
        let pos = |r: usize| order.iter().position(|&x| x == r).unwrap();
        for (t, h) in g.edges() {
            if let (NodeRef::Ind(a), NodeRef::Ind(b)) = (t, h) {
                prop_assert!(pos(b) < pos(a));
            }
        }
        let mut edges = g.edges();
        edges.reverse();
        prop_assert_eq!(MDag::new(g.k(), edges).unwrap().reversed_topological_order(), order);
    }
}
