//! Bounded training sets drawn from a tree view, plus the uniform baselines.
//!
//! Hierarchical sampling takes every leading row of the newest node and
//! geometrically fewer rows from older (higher-level) nodes: a node `j`
//! levels above the newest contributes its first `⌊n·2^{-j}⌋` rows, at least
//! one. Pending rows are included as the newest data. The total is capped at
//! `2n` rows, dropping from the oldest nodes first.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lowrank::DataBlock;
use crate::tree::TreeView;

/// Where a sampled row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    /// Row `row` of the stack node at `level`.
    Node { level: u32, row: usize },
    /// Row `row` of the pending (pre-leaf) buffer.
    Pending { row: usize },
    /// Row `row` of the collapsed root summary.
    Root { row: usize },
    /// Row `index` of a raw history matrix.
    History { index: usize },
}

/// Weight applied to one stack node during hierarchical sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeWeight {
    pub level: u32,
    pub weight: f64,
    pub taken: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    rows: DataBlock,
    provenance: Vec<RowSource>,
    weights: Vec<NodeWeight>,
}

impl SampleSet {
    pub fn new(rows: DataBlock, provenance: Vec<RowSource>) -> Result<Self> {
        if provenance.len() != rows.rows() {
            return Err(Error::DimensionMismatch {
                expected: rows.rows(),
                found: provenance.len(),
            });
        }
        Ok(Self {
            rows,
            provenance,
            weights: Vec::new(),
        })
    }

    /// Wraps a plain block, tagging row `i` as history index `i`.
    pub fn from_block(rows: DataBlock) -> Self {
        let provenance = (0..rows.rows()).map(|index| RowSource::History { index }).collect();
        Self {
            rows,
            provenance,
            weights: Vec::new(),
        }
    }

    pub fn rows(&self) -> &DataBlock {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn provenance(&self) -> &[RowSource] {
        &self.provenance
    }

    /// Per-node weights, newest node first (hierarchical samples only).
    pub fn weights(&self) -> &[NodeWeight] {
        &self.weights
    }
}

/// Row budget for a node `levels_above_top` levels above the newest node.
pub fn hierarchical_quota(n: usize, levels_above_top: u32) -> usize {
    let quota = if levels_above_top >= usize::BITS {
        0
    } else {
        n >> levels_above_top
    };
    quota.max(1)
}

pub fn hierarchical_sample(view: &TreeView) -> Result<SampleSet> {
    if view.is_empty() {
        return Err(Error::Empty("cannot sample an empty tree"));
    }
    let n = view.n();
    let limit = 2 * n;
    let dim = view.dim();
    let mut data: Vec<f64> = Vec::new();
    let mut provenance = Vec::new();

    let pending = view.pending();
    for row in 0..pending.len() {
        data.extend_from_slice(pending.row(row));
        provenance.push(RowSource::Pending { row });
    }

    let mut weights = Vec::new();
    if let Some(top) = view.top() {
        let top_level = top.level();
        for node in view.nodes().iter().rev() {
            let above = node.level() - top_level;
            let weight = 0.5_f64.powi(above as i32);
            let room = limit - provenance.len();
            let block = node.summary().block();
            let taken = hierarchical_quota(n, above).min(block.rows()).min(room);
            for row in 0..taken {
                data.extend(block.matrix().row(row).iter());
                provenance.push(RowSource::Node {
                    level: node.level(),
                    row,
                });
            }
            weights.push(NodeWeight {
                level: node.level(),
                weight,
                taken,
            });
        }
    }

    let rows = DataBlock::from_matrix_unchecked(DMatrix::from_row_slice(
        provenance.len(),
        dim,
        &data,
    ));
    Ok(SampleSet {
        rows,
        provenance,
        weights,
    })
}

/// The collapsed root summary as a training set (at most `n` rows).
pub fn root_sample(view: &TreeView) -> Result<SampleSet> {
    let root = view.root_collapse()?;
    let rows = root.block().clone();
    let provenance = (0..rows.rows()).map(|row| RowSource::Root { row }).collect();
    Ok(SampleSet {
        rows,
        provenance,
        weights: Vec::new(),
    })
}

/// `n` history rows drawn uniformly without replacement, in ascending index
/// order. Returns every row when the history is shorter than `n`.
pub fn random_sample(history: &DataBlock, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be ≥ 1".into()));
    }
    let total = history.rows();
    let mut indices: Vec<usize> = if total <= n {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, n).into_vec()
    };
    indices.sort_unstable();
    select(history, indices)
}

/// Rows at `⌊j·rows/n⌋` for `j = 0..n`, deduplicated.
pub fn subsample(history: &DataBlock, n: usize) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be ≥ 1".into()));
    }
    let total = history.rows();
    let mut indices: Vec<usize> = (0..n)
        .map(|j| ((j as u128 * total as u128) / n as u128) as usize)
        .collect();
    indices.dedup();
    select(history, indices)
}

fn select(history: &DataBlock, indices: Vec<usize>) -> Result<SampleSet> {
    let rows = history.select_rows(&indices)?;
    let provenance = indices
        .into_iter()
        .map(|index| RowSource::History { index })
        .collect();
    Ok(SampleSet {
        rows,
        provenance,
        weights: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::CoresetTree;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tree_with(n: usize, dim: usize, points: usize, seed: u64) -> CoresetTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = CoresetTree::new(n, dim).unwrap();
        for _ in 0..points {
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            tree.push_point(&row).unwrap();
        }
        tree
    }

    fn history(rows: usize) -> DataBlock {
        let data: Vec<f64> = (0..rows).flat_map(|i| [i as f64, 1.0]).collect();
        DataBlock::from_row_slice(rows, 2, &data).unwrap()
    }

    fn indices(set: &SampleSet) -> Vec<usize> {
        set.provenance()
            .iter()
            .map(|p| match p {
                RowSource::History { index } => *index,
                other => panic!("unexpected provenance {other:?}"),
            })
            .collect()
    }

    #[test]
    fn single_leaf_takes_everything() {
        let tree = tree_with(4, 6, 4, 1);
        let sample = hierarchical_sample(&tree.snapshot()).unwrap();
        assert_eq!(sample.len(), 4);
        assert_eq!(sample.weights().len(), 1);
        assert_eq!(sample.weights()[0].weight, 1.0);
        assert_eq!(sample.rows(), tree.nodes()[0].summary().block());
    }

    #[test]
    fn levels_three_one_zero() {
        // 11 leaves = 0b1011 → levels {3, 1, 0}.
        let tree = tree_with(8, 12, 88, 2);
        let levels: Vec<u32> = tree.nodes().iter().map(|n| n.level()).collect();
        assert_eq!(levels, vec![3, 1, 0]);
        let sample = hierarchical_sample(&tree.snapshot()).unwrap();
        assert_eq!(sample.len(), 13);
        let w: Vec<f64> = sample.weights().iter().map(|w| w.weight).collect();
        assert_eq!(w, vec![1.0, 0.5, 0.125]);
        let taken: Vec<usize> = sample.weights().iter().map(|w| w.taken).collect();
        assert_eq!(taken, vec![8, 4, 1]);
        assert_eq!(sample.provenance()[0], RowSource::Node { level: 0, row: 0 });
    }

    #[test]
    fn pending_rows_come_first_and_cap_holds() {
        // 7 leaves (levels 2, 1, 0) plus 7 pending rows would exceed 2n.
        let tree = tree_with(8, 12, 63, 3);
        let sample = hierarchical_sample(&tree.snapshot()).unwrap();
        assert_eq!(sample.len(), 16);
        assert_eq!(sample.provenance()[0], RowSource::Pending { row: 0 });
        assert!(sample
            .provenance()
            .iter()
            .any(|p| matches!(p, RowSource::Node { level: 0, .. })));
    }

    #[test]
    fn empty_tree_is_an_error() {
        let tree = CoresetTree::new(4, 3).unwrap();
        assert!(hierarchical_sample(&tree.snapshot()).is_err());
        assert!(root_sample(&tree.snapshot()).is_err());
    }

    #[test]
    fn root_of_single_leaf_matches_hierarchical() {
        let tree = tree_with(5, 7, 5, 4);
        let view = tree.snapshot();
        assert_eq!(
            root_sample(&view).unwrap().rows(),
            hierarchical_sample(&view).unwrap().rows()
        );
    }

    #[test]
    fn root_of_two_levels() {
        let tree = tree_with(4, 6, 12, 5);
        let sample = root_sample(&tree.snapshot()).unwrap();
        assert!(sample.len() <= 4);
        assert!(sample
            .provenance()
            .iter()
            .all(|p| matches!(p, RowSource::Root { .. })));
    }

    #[test]
    fn random_sample_behaviour() {
        let h = history(10);
        let all = random_sample(&h, 10, 3).unwrap();
        assert_eq!(indices(&all), (0..10).collect::<Vec<_>>());

        let h = history(100);
        let a = random_sample(&h, 10, 42).unwrap();
        let b = random_sample(&h, 10, 42).unwrap();
        assert_eq!(indices(&a), indices(&b));
        assert_eq!(a.len(), 10);
        let mut uniq = indices(&a);
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
        assert!(random_sample(&h, 0, 1).is_err());
    }

    #[test]
    fn random_sample_frequencies_are_uniform() {
        let h = history(100);
        let draws = 10_000;
        let mut counts = vec![0usize; 100];
        for seed in 0..draws {
            for i in indices(&random_sample(&h, 10, seed as u64).unwrap()) {
                counts[i] += 1;
            }
        }
        // Each index appears with probability 0.1 per draw. With 100
        // simultaneous checks the per-index band is Bonferroni-widened.
        let p: f64 = 0.1;
        let mean = draws as f64 * p;
        let var = draws as f64 * p * (1.0 - p);
        let mut chi_sq = 0.0;
        for &c in &counts {
            let z = (c as f64 - mean) / var.sqrt();
            assert!(z.abs() <= 4.5, "count {c} is {z:.2} sigma from {mean}");
            chi_sq += z * z;
        }
        // 99.9% quantile of chi-square with 99 degrees of freedom.
        assert!(chi_sq < 148.2, "chi-square {chi_sq}");
    }

    #[test]
    fn subsample_spacing() {
        assert_eq!(indices(&subsample(&history(100), 4).unwrap()), vec![0, 25, 50, 75]);
        assert_eq!(indices(&subsample(&history(6), 6).unwrap()), (0..6).collect::<Vec<_>>());
        assert_eq!(indices(&subsample(&history(7), 3).unwrap()), vec![0, 2, 4]);
        assert_eq!(indices(&subsample(&history(3), 5).unwrap()), vec![0, 1, 2]);
    }

    #[test]
    fn quota_floor_is_one() {
        assert_eq!(hierarchical_quota(8, 0), 8);
        assert_eq!(hierarchical_quota(8, 3), 1);
        assert_eq!(hierarchical_quota(8, 10), 1);
        assert_eq!(hierarchical_quota(8, 200), 1);
    }
}
