//! Randomized k-d tree forest for approximate nearest-neighbour queries.
//!
//! Each tree splits on a dimension drawn at random from the few highest-variance
//! ones, at the mean value. Queries descend all trees best-bin-first from a
//! shared priority queue and stop after a bounded number of leaf points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::IndexedRandom;
use rand::Rng;

const LEAF_SIZE: usize = 8;
const TOP_VARIANCE_DIMS: usize = 5;
const VARIANCE_SAMPLE: usize = 128;

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<usize>),
    Split {
        dim: usize,
        value: f32,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub struct KdForest {
    data: Vec<Vec<f32>>,
    trees: Vec<Tree>,
}

#[derive(Debug, PartialEq)]
struct Branch {
    bound: f32,
    tree: usize,
    node: usize,
}

impl Eq for Branch {}

impl Ord for Branch {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on bound
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdForest {
    pub fn build<R: Rng + ?Sized>(data: Vec<Vec<f32>>, n_trees: usize, rng: &mut R) -> Self {
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees.max(1) {
            let mut nodes = Vec::new();
            let idx: Vec<usize> = (0..data.len()).collect();
            build_node(&data, idx, &mut nodes, rng);
            trees.push(Tree { nodes });
        }
        Self { data, trees }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Up to two nearest neighbours as `(index, squared distance)`, nearest
    /// first, visiting at most `max_checks` points (at least one full leaf).
    pub fn knn2(&self, query: &[f32], max_checks: usize) -> Vec<(usize, f32)> {
        let mut best: [(usize, f32); 2] = [(usize::MAX, f32::INFINITY); 2];
        if self.data.is_empty() {
            return Vec::new();
        }
        let mut visited = vec![false; self.data.len()];
        let mut heap = BinaryHeap::new();
        for t in 0..self.trees.len() {
            heap.push(Branch {
                bound: 0.0,
                tree: t,
                node: 0,
            });
        }
        let mut checks = 0usize;
        while let Some(br) = heap.pop() {
            if br.bound > best[1].1 || (checks >= max_checks && best[1].0 != usize::MAX) {
                break;
            }
            let nodes = &self.trees[br.tree].nodes;
            let mut node = br.node;
            loop {
                match &nodes[node] {
                    Node::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        let diff = query[*dim] - value;
                        let (near, far) = if diff < 0.0 {
                            (*left, *right)
                        } else {
                            (*right, *left)
                        };
                        heap.push(Branch {
                            bound: diff * diff,
                            tree: br.tree,
                            node: far,
                        });
                        node = near;
                    }
                    Node::Leaf(points) => {
                        for &p in points {
                            if visited[p] {
                                continue;
                            }
                            visited[p] = true;
                            checks += 1;
                            let d = dist2(query, &self.data[p]);
                            if d < best[0].1 {
                                best[1] = best[0];
                                best[0] = (p, d);
                            } else if d < best[1].1 {
                                best[1] = (p, d);
                            }
                        }
                        break;
                    }
                }
            }
        }
        best.into_iter().filter(|(i, _)| *i != usize::MAX).collect()
    }
}

fn build_node<R: Rng + ?Sized>(
    data: &[Vec<f32>],
    idx: Vec<usize>,
    nodes: &mut Vec<Node>,
    rng: &mut R,
) -> usize {
    let me = nodes.len();
    if idx.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf(idx));
        return me;
    }
    let dim_count = data[idx[0]].len();
    let sample: Vec<usize> = if idx.len() > VARIANCE_SAMPLE {
        idx.choose_multiple(rng, VARIANCE_SAMPLE).copied().collect()
    } else {
        idx.clone()
    };
    let n = sample.len() as f32;
    let mut mean = vec![0f32; dim_count];
    for &i in &sample {
        for (m, v) in mean.iter_mut().zip(&data[i]) {
            *m += v / n;
        }
    }
    let mut var: Vec<(usize, f32)> = (0..dim_count)
        .map(|d| {
            let v = sample
                .iter()
                .map(|&i| (data[i][d] - mean[d]).powi(2))
                .sum::<f32>();
            (d, v)
        })
        .collect();
    var.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = TOP_VARIANCE_DIMS.min(dim_count);
    let dim = var[rng.random_range(0..top)].0;
    let value = mean[dim];
    let (mut left, mut right): (Vec<usize>, Vec<usize>) =
        idx.iter().partition(|&&i| data[i][dim] < value);
    if left.is_empty() || right.is_empty() {
        // all points equal along dim; split by position to guarantee progress
        let mut all = idx;
        all.sort_by(|&a, &b| data[a][dim].total_cmp(&data[b][dim]));
        right = all.split_off(all.len() / 2);
        left = all;
    }
    nodes.push(Node::Leaf(Vec::new()));
    let l = build_node(data, left, nodes, rng);
    let r = build_node(data, right, nodes, rng);
    nodes[me] = Node::Split {
        dim,
        value,
        left: l,
        right: r,
    };
    me
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute(data: &[Vec<f32>], q: &[f32]) -> usize {
        (0..data.len())
            .min_by(|&a, &b| dist2(q, &data[a]).total_cmp(&dist2(q, &data[b])))
            .unwrap()
    }

    #[test]
    fn exhaustive_checks_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Vec<f32>> = (0..500)
            .map(|_| (0..16).map(|_| rng.random::<f32>()).collect())
            .collect();
        let forest = KdForest::build(data.clone(), 4, &mut rng);
        for _ in 0..50 {
            let q: Vec<f32> = (0..16).map(|_| rng.random::<f32>()).collect();
            let nn = forest.knn2(&q, usize::MAX);
            assert_eq!(nn[0].0, brute(&data, &q));
            assert!(nn[0].1 <= nn[1].1);
        }
    }

    #[test]
    fn bounded_checks_have_high_recall_on_near_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f32>> = (0..4000)
            .map(|_| (0..32).map(|_| rng.random::<f32>()).collect())
            .collect();
        let forest = KdForest::build(data.clone(), 4, &mut rng);
        let mut hits = 0;
        for i in (0..4000).step_by(20) {
            let q: Vec<f32> = data[i]
                .iter()
                .map(|v| v + 0.01 * (rng.random::<f32>() - 0.5))
                .collect();
            if forest.knn2(&q, 256)[0].0 == i {
                hits += 1;
            }
        }
        assert!(hits >= 190, "recall {hits}/200");
    }
}
