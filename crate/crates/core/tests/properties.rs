mod common;

use cstk_core::lowrank::{concat, dist_sq, random_orthonormal, reduce, CoresetBlock, DataBlock, ReductionParams};
use cstk_core::sampling::{hierarchical_sample, RowSource};
use cstk_core::tree::{live_node_bound, CoresetTree};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn set_bits(mut x: usize) -> Vec<u32> {
    let mut bits = Vec::new();
    let mut level = 0;
    while x > 0 {
        if x & 1 == 1 {
            bits.push(level);
        }
        x >>= 1;
        level += 1;
    }
    bits.reverse();
    bits
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn concatenation_is_additive(
        ra in 1usize..7, rb in 1usize..7, d in 2usize..9, seed in any::<u64>(), cols_frac in 0.0f64..1.0,
    ) {
        let mut rng = common::rng(seed);
        let a = common::gaussian(ra, d, &mut rng);
        let b = common::gaussian(rb, d, &mut rng);
        let cols = 1 + ((d - 1) as f64 * cols_frac) as usize;
        let y = random_orthonormal(d, cols, seed ^ 1).unwrap();
        let ca = CoresetBlock::new(DataBlock::new(a.clone()).unwrap(), 0.25, ra).unwrap();
        let cb = CoresetBlock::new(DataBlock::new(b.clone()).unwrap(), 0.5, rb).unwrap();
        let (joined, c) = concat(&ca, &cb).unwrap();
        prop_assert_eq!(c, 0.75);
        let lhs = dist_sq(&joined, &y).unwrap();
        let rhs = common::energy(&a, &y) + common::energy(&b, &y);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn reduction_sandwiches_every_query(
        rows in 1usize..17, d in 2usize..11, n in 1usize..9, seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let m = common::gaussian(rows, d, &mut rng);
        let params = ReductionParams::new(n, 1, d, 0.1).unwrap();
        let out = reduce(&DataBlock::new(m.clone()).unwrap(), &params).unwrap();
        let (_, oracle_tail) = common::eigen_truncate(&m, n);
        let scale = m.norm_squared();
        prop_assert!((out.c() - oracle_tail).abs() <= 1e-9 * scale, "{} vs {}", out.c(), oracle_tail);
        for q in 0..20u64 {
            let cols = 1 + (q as usize % (d - 1).max(1)).min(d - 1);
            let y = random_orthonormal(d, cols, seed.wrapping_add(q)).unwrap();
            let full = common::energy(&m, &y);
            let approx = common::energy(out.block().matrix(), &y);
            let gap = full - approx;
            prop_assert!(gap >= -1e-10 * scale.max(1.0), "gap {}", gap);
            prop_assert!(gap <= out.c() + 1e-10 * scale.max(1.0), "gap {} c {}", gap, out.c());
        }
    }

    #[test]
    fn stack_follows_binary_counter(n in 1usize..6, pushes in 0usize..160, seed in any::<u64>()) {
        let d = 3;
        let mut rng = common::rng(seed);
        let data = common::gaussian(pushes.max(1), d, &mut rng);
        let mut tree = CoresetTree::new(n, d).unwrap();
        let mut replay = common::ReplayTree::new(n);
        let mut high_water = 0;
        for i in 0..pushes {
            let row: Vec<f64> = data.row(i).iter().copied().collect();
            tree.push_point(&row).unwrap();
            replay.push(&row);
            let leaves = (i + 1) / n;
            let levels: Vec<u32> = tree.nodes().iter().map(|node| node.level()).collect();
            prop_assert_eq!(&levels, &set_bits(leaves));
            prop_assert_eq!(&levels, &replay.levels());
            prop_assert_eq!(tree.live_node_count(), leaves.count_ones() as usize);
            prop_assert_eq!(tree.merge_count() as usize, leaves - leaves.count_ones() as usize);
            prop_assert_eq!(tree.merge_count() as usize, replay.merges);
            high_water = high_water.max(tree.live_node_count());
            prop_assert_eq!(tree.max_live_nodes(), high_water);
            prop_assert!(tree.max_live_nodes() <= live_node_bound(leaves.max(1)));
            let covered: usize = tree.nodes().iter().map(|node| node.span().len()).sum();
            prop_assert_eq!(covered + tree.pending().len(), i + 1);
            prop_assert!(tree.snapshot().check_invariants().is_ok());
        }
    }

    #[test]
    fn hierarchical_sample_is_bounded(n in 1usize..9, pushes in 1usize..200, d in 2usize..12, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let data = common::gaussian(pushes, d, &mut rng);
        let mut tree = CoresetTree::new(n, d).unwrap();
        for i in 0..pushes {
            let row: Vec<f64> = data.row(i).iter().copied().collect();
            tree.push_point(&row).unwrap();
        }
        let view = tree.snapshot();
        let sample = hierarchical_sample(&view).unwrap();
        prop_assert!(sample.len() <= 2 * n, "{} rows for n = {}", sample.len(), n);
        prop_assert_eq!(sample.rows().rows(), sample.provenance().len());
        if let Some(top) = view.top() {
            let top_rows = top.summary().rows();
            for row in 0..top_rows {
                let present = sample
                    .provenance()
                    .iter()
                    .any(|p| *p == RowSource::Node { level: top.level(), row });
                prop_assert!(present, "top-node row {} missing", row);
            }
        }
        let pending = sample
            .provenance()
            .iter()
            .filter(|p| matches!(p, RowSource::Pending { .. }))
            .count();
        prop_assert_eq!(pending, view.pending().len());
    }

    #[test]
    fn identical_streams_build_identical_trees(n in 1usize..6, pushes in 1usize..120, seed in any::<u64>()) {
        let d = 4;
        let mut rng = common::rng(seed);
        let data = common::gaussian(pushes, d, &mut rng);
        let mut a = CoresetTree::new(n, d).unwrap();
        let mut b = CoresetTree::new(n, d).unwrap();
        for i in 0..pushes {
            let row: Vec<f64> = data.row(i).iter().copied().collect();
            a.push_point(&row).unwrap();
            b.push_point(&row).unwrap();
        }
        prop_assert_eq!(a.nodes(), b.nodes());
        prop_assert_eq!(a.snapshot().pending().len(), b.snapshot().pending().len());
        let params = ReductionParams::new(n, 1, d, 0.1).unwrap();
        let block = DataBlock::new(data).unwrap();
        prop_assert_eq!(reduce(&block, &params).unwrap(), reduce(&block, &params).unwrap());
        prop_assert_eq!(random_orthonormal(d, 2, seed).unwrap(), random_orthonormal(d, 2, seed).unwrap());
    }
}
