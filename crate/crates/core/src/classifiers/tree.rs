//! CART decision trees with Gini impurity.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { infected: u32, total: u32 },
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features examined per split; `None` means all.
    pub max_features: Option<usize>,
}

fn gini(infected: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = infected as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

struct Best {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl DecisionTree {
    /// Grows a tree over `sample` (row indices, repetitions allowed).
    pub(crate) fn fit(
        x: &[&[f64]],
        y: &[bool],
        sample: Vec<usize>,
        params: TreeParams,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> DecisionTree {
        let width = x.first().map_or(0, |r| r.len());
        let mut nodes = vec![TreeNode::Leaf { infected: 0, total: 0 }];
        // (node slot, rows, depth)
        let mut stack = vec![(0usize, sample, 0usize)];
        let mut order: Vec<usize> = Vec::new();

        while let Some((slot, rows, depth)) = stack.pop() {
            let total = rows.len();
            let infected = rows.iter().filter(|&&r| y[r]).count();
            let leaf = TreeNode::Leaf { infected: infected as u32, total: total as u32 };
            let stop = infected == 0
                || infected == total
                || total < params.min_samples_split.max(2)
                || params.max_depth.is_some_and(|d| depth >= d);
            if stop || width == 0 {
                nodes[slot] = leaf;
                continue;
            }

            let features: Vec<usize> = match (params.max_features, rng.as_deref_mut()) {
                (Some(m), Some(r)) if m < width => {
                    let mut f = index::sample(r, width, m).into_vec();
                    f.sort_unstable();
                    f
                }
                _ => (0..width).collect(),
            };

            let parent = total as f64 * gini(infected, total);
            let mut best: Option<Best> = None;
            for &f in &features {
                order.clear();
                order.extend_from_slice(&rows);
                order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
                let mut left_inf = 0usize;
                for i in 1..total {
                    if y[order[i - 1]] {
                        left_inf += 1;
                    }
                    let lo = x[order[i - 1]][f];
                    let hi = x[order[i]][f];
                    if lo == hi {
                        continue;
                    }
                    let impurity = i as f64 * gini(left_inf, i) + (total - i) as f64 * gini(infected - left_inf, total - i);
                    if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                        let mid = lo + (hi - lo) / 2.0;
                        let threshold = if mid < hi { mid } else { lo };
                        best = Some(Best { feature: f, threshold, impurity });
                    }
                }
            }

            match best {
                Some(b) if b.impurity < parent - 1e-12 => {
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&r| x[r][b.feature] <= b.threshold);
                    let l = nodes.len();
                    nodes.push(TreeNode::Leaf { infected: 0, total: 0 });
                    nodes.push(TreeNode::Leaf { infected: 0, total: 0 });
                    nodes[slot] =
                        TreeNode::Split { feature: b.feature as u32, threshold: b.threshold, left: l as u32, right: l as u32 + 1 };
                    stack.push((l + 1, right, depth + 1));
                    stack.push((l, left, depth + 1));
                }
                _ => nodes[slot] = leaf,
            }
        }
        DecisionTree { nodes }
    }

    /// Fraction of infected training rows in the leaf reached by `row`.
    pub fn leaf_purity(&self, row: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { infected, total } => {
                    return if *total == 0 { 0.0 } else { f64::from(*infected) / f64::from(*total) };
                }
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[*feature as usize] <= *threshold { *left } else { *right } as usize;
                }
            }
        }
    }

    /// Majority vote of the reached leaf; an even split votes clean.
    pub fn votes_infected(&self, row: &[f64]) -> bool {
        self.leaf_purity(row) > 0.5
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: TreeParams = TreeParams { max_depth: None, min_samples_split: 2, max_features: None };

    fn fit(rows: &[Vec<f64>], y: &[bool], params: TreeParams) -> DecisionTree {
        let x: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        DecisionTree::fit(&x, y, (0..rows.len()).collect(), params, None)
    }

    #[test]
    fn single_split_separates() {
        let rows = vec![vec![0.1, 5.0], vec![0.2, 1.0], vec![0.9, 5.0], vec![0.8, 1.0]];
        let y = [false, false, true, true];
        let t = fit(&rows, &y, ALL);
        assert_eq!(t.depth(), 1);
        for (r, &label) in rows.iter().zip(&y) {
            assert_eq!(t.votes_infected(r), label);
        }
        assert!(matches!(t.nodes[0], TreeNode::Split { feature: 0, .. }));
    }

    #[test]
    fn xor_needs_depth_two_or_stops() {
        // no single axis split lowers the impurity of balanced xor
        let rows = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = [false, true, true, false];
        let t = fit(&rows, &y, ALL);
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.leaf_purity(&rows[0]), 0.5);
        assert!(!t.votes_infected(&rows[0]));
    }

    #[test]
    fn depth_limit() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![f64::from(i)]).collect();
        let y = [false, true, false, true, false, true, false, true];
        let t = fit(&rows, &y, TreeParams { max_depth: Some(2), ..ALL });
        assert!(t.depth() <= 2);
        let full = fit(&rows, &y, ALL);
        assert!(rows.iter().zip(&y).all(|(r, &l)| full.votes_infected(r) == l));
    }

    #[test]
    fn identical_rows_make_mixed_leaf() {
        let rows = vec![vec![1.0], vec![1.0], vec![1.0]];
        let t = fit(&rows, &[true, false, true], ALL);
        assert!((t.leaf_purity(&[1.0]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
