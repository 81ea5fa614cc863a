//! Merge-and-reduce stack over a stream of feature rows.
//!
//! Rows are buffered until `n` of them form a level-0 leaf. Whenever the two
//! newest nodes share a level they are concatenated (older rows first),
//! reduced back to `n` rows and pushed one level higher. The stack therefore
//! mirrors the binary representation of the leaf count: one node per set bit.

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lowrank::{self, CoresetBlock, DataBlock};

/// One live node of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetNode {
    level: u32,
    summary: CoresetBlock,
    span: Range<usize>,
}

impl CoresetNode {
    pub fn new(level: u32, summary: CoresetBlock, span: Range<usize>) -> Result<Self> {
        if span.end - span.start != summary.source_rows() {
            return Err(Error::InvalidParameter(format!(
                "node span {:?} does not match {} source rows",
                span,
                summary.source_rows()
            )));
        }
        Ok(Self {
            level,
            summary,
            span,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn summary(&self) -> &CoresetBlock {
        &self.summary
    }

    /// Half-open range of stream indices this node summarizes.
    pub fn span(&self) -> Range<usize> {
        self.span.clone()
    }
}

/// Rows waiting to fill the next leaf, in arrival order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStack {
    data: Vec<f64>,
    dim: usize,
}

impl FeatureStack {
    fn new(dim: usize) -> Self {
        Self {
            data: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The buffered rows as a block, or `None` when empty.
    pub fn to_block(&self) -> Option<DataBlock> {
        if self.is_empty() {
            None
        } else {
            Some(DataBlock::from_matrix_unchecked(DMatrix::from_row_slice(
                self.len(),
                self.dim,
                &self.data,
            )))
        }
    }

    fn push(&mut self, row: &[f64]) {
        self.data.extend_from_slice(row);
    }

    fn drain_block(&mut self) -> DataBlock {
        let block = self.to_block().expect("drain of empty feature stack");
        self.data.clear();
        block
    }
}

/// What a single push did to the stack.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub leaf_formed: bool,
    /// Level of each pair merged, in order (the merged node lands one above).
    pub merged_levels: Vec<u32>,
    pub svd_count: usize,
}

/// Per-push telemetry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamStats {
    pub merges_per_push: Vec<u32>,
    pub live_nodes: Vec<usize>,
    pub push_nanos: Vec<u64>,
    pub cumulative_svds: u64,
    pub max_live_nodes: usize,
}

impl StreamStats {
    pub fn pushes(&self) -> usize {
        self.merges_per_push.len()
    }
}

/// The live merge-and-reduce stack plus its counters.
#[derive(Debug, Clone)]
pub struct CoresetTree {
    n: usize,
    dim: usize,
    stack: Vec<Arc<CoresetNode>>,
    pending: FeatureStack,
    points_seen: usize,
    leaves_seen: usize,
    merge_count: u64,
    max_live_nodes: usize,
    stats: StreamStats,
    record_series: bool,
}

impl CoresetTree {
    pub fn new(n: usize, dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("leaf size n must be ≥ 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be ≥ 1".into()));
        }
        Ok(Self {
            n,
            dim,
            stack: Vec::new(),
            pending: FeatureStack::new(dim),
            points_seen: 0,
            leaves_seen: 0,
            merge_count: 0,
            max_live_nodes: 0,
            stats: StreamStats::default(),
            record_series: true,
        })
    }

    /// Stops recording per-push series; counters are still maintained.
    pub fn without_series(mut self) -> Self {
        self.record_series = false;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_seen(&self) -> usize {
        self.points_seen
    }

    pub fn leaves_seen(&self) -> usize {
        self.leaves_seen
    }

    pub fn merge_count(&self) -> u64 {
        self.merge_count
    }

    pub fn max_live_nodes(&self) -> usize {
        self.max_live_nodes
    }

    pub fn live_node_count(&self) -> usize {
        self.stack.len()
    }

    pub fn nodes(&self) -> &[Arc<CoresetNode>] {
        &self.stack
    }

    pub fn pending(&self) -> &FeatureStack {
        &self.pending
    }

    pub fn telemetry(&self) -> &StreamStats {
        &self.stats
    }

    /// Appends one row; forms a leaf and merges when the buffer fills.
    pub fn push_point(&mut self, row: &[f64]) -> Result<MergeReport> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        if let Some(col) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        let started = Instant::now();

        self.pending.push(row);
        self.points_seen += 1;
        let mut report = MergeReport::default();
        if self.pending.len() == self.n {
            let block = self.pending.drain_block();
            let end = self.points_seen;
            let leaf = CoresetNode {
                level: 0,
                summary: CoresetBlock::exact(block),
                span: end - self.n..end,
            };
            self.stack.push(Arc::new(leaf));
            self.leaves_seen += 1;
            report.leaf_formed = true;
            self.merge_to_fixpoint(&mut report)?;
            self.max_live_nodes = self.max_live_nodes.max(self.stack.len());
        }

        self.stats.cumulative_svds += report.svd_count as u64;
        self.stats.max_live_nodes = self.max_live_nodes;
        if self.record_series {
            self.stats.merges_per_push.push(report.merged_levels.len() as u32);
            self.stats.live_nodes.push(self.stack.len());
            self.stats
                .push_nanos
                .push(started.elapsed().as_nanos().min(u64::MAX as u128) as u64);
        }
        Ok(report)
    }

    fn merge_to_fixpoint(&mut self, report: &mut MergeReport) -> Result<()> {
        while self.stack.len() >= 2 {
            let top = self.stack.len() - 1;
            if self.stack[top].level != self.stack[top - 1].level {
                break;
            }
            let newer = self.stack.pop().expect("stack has two nodes");
            let older = self.stack.pop().expect("stack has two nodes");
            let merged = merge_pair(&older, &newer, self.n)?;
            report.merged_levels.push(older.level);
            report.svd_count += 1;
            self.merge_count += 1;
            self.stack.push(Arc::new(merged));
        }
        Ok(())
    }

    /// Merges every live node (and any pending rows) into one summary.
    /// Read-only: the tree is left as it was.
    pub fn root_collapse(&self) -> Result<CoresetBlock> {
        collapse(&self.stack, &self.pending, self.n)
    }

    /// Immutable view of the current stack and counters.
    pub fn snapshot(&self) -> TreeView {
        TreeView {
            n: self.n,
            dim: self.dim,
            nodes: self.stack.clone(),
            pending: self.pending.clone(),
            points_seen: self.points_seen,
            leaves_seen: self.leaves_seen,
            merge_count: self.merge_count,
            max_live_nodes: self.max_live_nodes,
        }
    }
}

fn merge_pair(older: &CoresetNode, newer: &CoresetNode, n: usize) -> Result<CoresetNode> {
    let (stacked, c_inputs) = lowrank::concat(&older.summary, &newer.summary)?;
    let (summary, c_reduce) = lowrank::truncate(stacked.matrix(), n)?;
    let source_rows = older.summary.source_rows() + newer.summary.source_rows();
    let summary = CoresetBlock::exact(DataBlock::from_matrix_unchecked(summary))
        .with_accounting(c_inputs + c_reduce, source_rows);
    Ok(CoresetNode {
        level: older.level + 1,
        summary,
        span: older.span.start..newer.span.end,
    })
}

fn collapse(stack: &[Arc<CoresetNode>], pending: &FeatureStack, n: usize) -> Result<CoresetBlock> {
    let pending_block = pending.to_block().map(CoresetBlock::exact);
    let mut parts = stack
        .iter()
        .map(|node| node.summary.clone())
        .chain(pending_block);
    let mut acc = parts.next().ok_or(Error::Empty("tree holds no data"))?;
    for part in parts {
        let (stacked, c_inputs) = lowrank::concat(&acc, &part)?;
        let (summary, c_reduce) = lowrank::truncate(stacked.matrix(), n)?;
        let source_rows = acc.source_rows() + part.source_rows();
        acc = CoresetBlock::exact(DataBlock::from_matrix_unchecked(summary))
            .with_accounting(c_inputs + c_reduce, source_rows);
    }
    Ok(acc)
}

/// A frozen copy of the tree. Nodes are shared with the live tree but never
/// mutated, so later pushes do not affect the view.
#[derive(Debug, Clone)]
pub struct TreeView {
    n: usize,
    dim: usize,
    nodes: Vec<Arc<CoresetNode>>,
    pending: FeatureStack,
    points_seen: usize,
    leaves_seen: usize,
    merge_count: u64,
    max_live_nodes: usize,
}

impl TreeView {
    /// Rebuilds a view from stored parts, checking every tree invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n: usize,
        dim: usize,
        nodes: Vec<CoresetNode>,
        pending_rows: &[Vec<f64>],
        points_seen: usize,
        leaves_seen: usize,
        merge_count: u64,
        max_live_nodes: usize,
    ) -> Result<Self> {
        let mut pending = FeatureStack::new(dim);
        for row in pending_rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            pending.push(row);
        }
        let view = Self {
            n,
            dim,
            nodes: nodes.into_iter().map(Arc::new).collect(),
            pending,
            points_seen,
            leaves_seen,
            merge_count,
            max_live_nodes,
        };
        view.check_invariants().map_err(Error::InvalidParameter)?;
        Ok(view)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[Arc<CoresetNode>] {
        &self.nodes
    }

    /// The most recent node (top of the stack).
    pub fn top(&self) -> Option<&CoresetNode> {
        self.nodes.last().map(|n| n.as_ref())
    }

    pub fn pending(&self) -> &FeatureStack {
        &self.pending
    }

    pub fn points_seen(&self) -> usize {
        self.points_seen
    }

    pub fn leaves_seen(&self) -> usize {
        self.leaves_seen
    }

    pub fn merge_count(&self) -> u64 {
        self.merge_count
    }

    pub fn max_live_nodes(&self) -> usize {
        self.max_live_nodes
    }

    pub fn live_node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.pending.is_empty()
    }

    pub fn root_collapse(&self) -> Result<CoresetBlock> {
        collapse(&self.nodes, &self.pending, self.n)
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.n == 0 || self.dim == 0 {
            return Err("n and dim must be positive".into());
        }
        if self.pending.len() >= self.n {
            return Err(format!(
                "pending buffer holds {} rows, must be < n = {}",
                self.pending.len(),
                self.n
            ));
        }
        for pair in self.nodes.windows(2) {
            if pair[0].level <= pair[1].level {
                return Err(format!(
                    "levels must strictly decrease bottom→top, found {} then {}",
                    pair[0].level, pair[1].level
                ));
            }
        }
        if self.leaves_seen != self.points_seen / self.n {
            return Err(format!(
                "leaves_seen {} != points_seen {} / n {}",
                self.leaves_seen, self.points_seen, self.n
            ));
        }
        if self.nodes.len() != self.leaves_seen.count_ones() as usize {
            return Err(format!(
                "{} live nodes but popcount(leaves) = {}",
                self.nodes.len(),
                self.leaves_seen.count_ones()
            ));
        }
        let mut covered = 0;
        let mut next_start = 0;
        for node in &self.nodes {
            let len = node.span.end - node.span.start;
            if node.span.start != next_start {
                return Err(format!("node span {:?} is not contiguous", node.span));
            }
            let expected = (self.n as u128) << node.level;
            if len as u128 != expected {
                return Err(format!(
                    "level {} node spans {len} points, expected {expected}",
                    node.level
                ));
            }
            if node.summary.source_rows() != len {
                return Err("summary source_rows differs from span length".into());
            }
            if node.summary.rows() > self.n {
                return Err(format!("node holds {} rows > n", node.summary.rows()));
            }
            if node.summary.dim() != self.dim {
                return Err("node dimension differs from tree dimension".into());
            }
            if !(node.summary.c() >= 0.0) {
                return Err("negative additive constant".into());
            }
            next_start = node.span.end;
            covered += len;
        }
        if covered + self.pending.len() != self.points_seen {
            return Err(format!(
                "spans cover {covered} + pending {} != points_seen {}",
                self.pending.len(),
                self.points_seen
            ));
        }
        let expected_merges = self.leaves_seen as u64 - self.leaves_seen.count_ones() as u64;
        if self.merge_count != expected_merges {
            return Err(format!(
                "merge_count {} != leaves − popcount(leaves) = {expected_merges}",
                self.merge_count
            ));
        }
        if self.max_live_nodes < self.nodes.len() {
            return Err("max_live_nodes below current live count".into());
        }
        Ok(())
    }
}

/// Upper bound on simultaneously live nodes after `leaves` leaves.
pub fn live_node_bound(leaves: usize) -> usize {
    (usize::BITS - leaves.max(1).leading_zeros()) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{measure_epsilon, random_orthonormal_with};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_rows(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    fn low_rank_rows(count: usize, dim: usize, rank: usize, noise: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis: Vec<Vec<f64>> = (0..rank)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        (0..count)
            .map(|_| {
                let coef: Vec<f64> = (0..rank).map(|_| rng.sample(StandardNormal)).collect();
                (0..dim)
                    .map(|j| {
                        let clean: f64 = (0..rank).map(|r| coef[r] * basis[r][j]).sum();
                        clean + noise * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect()
            })
            .collect()
    }

    fn levels(tree: &CoresetTree) -> Vec<u32> {
        tree.nodes().iter().map(|n| n.level()).collect()
    }

    #[test]
    fn first_leaf() {
        let mut tree = CoresetTree::new(2, 3).unwrap();
        for row in gaussian_rows(2, 3, 1) {
            tree.push_point(&row).unwrap();
        }
        assert_eq!(levels(&tree), vec![0]);
        assert_eq!(tree.merge_count(), 0);
    }

    #[test]
    fn one_pair_merge() {
        let mut tree = CoresetTree::new(2, 3).unwrap();
        for row in gaussian_rows(4, 3, 1) {
            tree.push_point(&row).unwrap();
        }
        assert_eq!(levels(&tree), vec![1]);
        assert_eq!(tree.merge_count(), 1);
    }

    #[test]
    fn five_leaves() {
        let mut tree = CoresetTree::new(2, 3).unwrap();
        for row in gaussian_rows(10, 3, 1) {
            tree.push_point(&row).unwrap();
        }
        assert_eq!(levels(&tree), vec![2, 0]);
        assert_eq!(tree.merge_count(), 3);
        assert_eq!(tree.nodes()[0].span(), 0..8);
        assert_eq!(tree.nodes()[1].span(), 8..10);
    }

    #[test]
    fn live_node_counts() {
        let mut tree = CoresetTree::new(1, 2).unwrap();
        assert_eq!(tree.live_node_count(), 0);
        let rows = gaussian_rows(11, 2, 4);
        for (i, row) in rows.iter().enumerate() {
            tree.push_point(row).unwrap();
            if i + 1 == 8 {
                assert_eq!(tree.live_node_count(), 1);
            }
        }
        assert_eq!(tree.leaves_seen(), 11);
        assert_eq!(tree.live_node_count(), 3);
        assert!(tree.live_node_count() <= live_node_bound(11));
    }

    #[test]
    fn push_rejects_bad_rows() {
        let mut tree = CoresetTree::new(2, 3).unwrap();
        assert!(matches!(
            tree.push_point(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            tree.push_point(&[1.0, f64::INFINITY, 0.0]),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(tree.points_seen(), 0);
    }

    #[test]
    fn collapse_single_leaf_is_identity() {
        let mut tree = CoresetTree::new(3, 4).unwrap();
        for row in gaussian_rows(3, 4, 2) {
            tree.push_point(&row).unwrap();
        }
        let collapsed = tree.root_collapse().unwrap();
        assert_eq!(&collapsed, tree.nodes()[0].summary());
    }

    #[test]
    fn collapse_of_empty_tree_fails() {
        let tree = CoresetTree::new(3, 4).unwrap();
        assert!(matches!(tree.root_collapse(), Err(Error::Empty(_))));
    }

    #[test]
    fn collapse_lossless_for_low_rank() {
        let rows = low_rank_rows(12, 6, 3, 0.0, 5);
        let mut tree = CoresetTree::new(4, 6).unwrap();
        for row in &rows {
            tree.push_point(row).unwrap();
        }
        assert_eq!(levels(&tree), vec![1, 0]);
        let before = tree.snapshot();
        let collapsed = tree.root_collapse().unwrap();
        let all = DataBlock::from_rows(&rows).unwrap();
        assert!(measure_epsilon(&all, &collapsed, 2, 100, 9).unwrap() <= 1e-8);
        assert_eq!(collapsed.source_rows(), 12);
        assert_eq!(tree.snapshot().nodes(), before.nodes());
    }

    #[test]
    fn collapse_includes_pending_rows() {
        let rows = low_rank_rows(7, 5, 2, 0.0, 6);
        let mut tree = CoresetTree::new(4, 5).unwrap();
        for row in &rows {
            tree.push_point(row).unwrap();
        }
        assert_eq!(tree.pending().len(), 3);
        let collapsed = tree.root_collapse().unwrap();
        assert_eq!(collapsed.source_rows(), 7);
        let all = DataBlock::from_rows(&rows).unwrap();
        assert!(measure_epsilon(&all, &collapsed, 2, 50, 1).unwrap() <= 1e-8);
    }

    #[test]
    fn merged_constants_keep_sandwich() {
        let rows = gaussian_rows(64, 10, 8);
        let mut tree = CoresetTree::new(4, 10).unwrap();
        for row in &rows {
            tree.push_point(row).unwrap();
        }
        assert_eq!(levels(&tree), vec![4]);
        let node = tree.nodes()[0].summary().clone();
        let all = DataBlock::from_rows(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let y = random_orthonormal_with(10, 6, &mut rng).unwrap();
            let full = lowrank::dist_sq(&all, &y).unwrap();
            let approx = lowrank::dist_sq(node.block(), &y).unwrap();
            assert!(approx <= full + 1e-9);
            assert!(full <= approx + node.c() + 1e-9);
        }
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut tree = CoresetTree::new(2, 3).unwrap();
        let empty = tree.snapshot();
        assert!(empty.is_empty());
        assert_eq!(empty.live_node_count(), 0);
        for row in gaussian_rows(2, 3, 1) {
            tree.push_point(&row).unwrap();
        }
        let snap = tree.snapshot();
        for row in gaussian_rows(2, 3, 2) {
            tree.push_point(&row).unwrap();
        }
        assert_eq!(snap.nodes().len(), 1);
        assert_eq!(snap.nodes()[0].level(), 0);
        assert_eq!(snap.points_seen(), 2);
        assert!(empty.is_empty());
    }

    #[test]
    fn telemetry_counts_merges() {
        let mut tree = CoresetTree::new(2, 2).unwrap();
        assert_eq!(tree.telemetry(), &StreamStats::default());
        for row in gaussian_rows(2 * 16, 2, 3) {
            tree.push_point(&row).unwrap();
        }
        let stats = tree.telemetry();
        assert_eq!(stats.cumulative_svds, 15);
        assert_eq!(stats.merges_per_push.len(), 32);
        assert_eq!(*stats.merges_per_push.last().unwrap(), 4);
        let total: u32 = stats.merges_per_push.iter().sum();
        assert_eq!(total as u64, stats.cumulative_svds);
        assert_eq!(stats.max_live_nodes, 4);
    }

    #[test]
    fn without_series_keeps_counters() {
        let mut tree = CoresetTree::new(2, 2).unwrap().without_series();
        for row in gaussian_rows(8, 2, 3) {
            tree.push_point(&row).unwrap();
        }
        assert!(tree.telemetry().merges_per_push.is_empty());
        assert_eq!(tree.telemetry().cumulative_svds, 3);
    }

    #[test]
    fn from_parts_checks_invariants() {
        let mut tree = CoresetTree::new(2, 3).unwrap();
        for row in gaussian_rows(7, 3, 1) {
            tree.push_point(&row).unwrap();
        }
        let view = tree.snapshot();
        let nodes: Vec<CoresetNode> = view.nodes().iter().map(|n| (**n).clone()).collect();
        let pending: Vec<Vec<f64>> = (0..view.pending().len())
            .map(|i| view.pending().row(i).to_vec())
            .collect();
        let rebuilt = TreeView::from_parts(
            2,
            3,
            nodes.clone(),
            &pending,
            view.points_seen(),
            view.leaves_seen(),
            view.merge_count(),
            view.max_live_nodes(),
        )
        .unwrap();
        assert_eq!(rebuilt.nodes(), view.nodes());

        let wrong = TreeView::from_parts(2, 3, nodes, &pending, 8, 3, 1, 2);
        assert!(wrong.is_err());
    }

    #[test]
    fn bound_helper() {
        assert_eq!(live_node_bound(0), 1);
        assert_eq!(live_node_bound(1), 1);
        assert_eq!(live_node_bound(7), 3);
        assert_eq!(live_node_bound(8), 4);
    }
}
