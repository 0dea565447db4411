//! Exact k-nearest-neighbor search with deterministic tie-breaking.
//!
//! Neighbors are ordered by `(squared distance, index)`, so equal distances
//! always resolve to the smaller index. Clouds with fewer than
//! [`BRUTE_FORCE_BELOW`] points are searched exhaustively; larger clouds go
//! through a kd-tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::geometry::dist2;

pub const BRUTE_FORCE_BELOW: usize = 1024;
const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Flattened point cloud with an optional kd-tree over it.
pub struct KnnIndex {
    dim: usize,
    data: Vec<f64>,
    order: Vec<usize>,
    root: Option<Node>,
}

impl KnnIndex {
    pub fn new<P: AsRef<[f64]>>(points: &[P]) -> Self {
        let dim = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            debug_assert_eq!(p.as_ref().len(), dim);
            data.extend_from_slice(p.as_ref());
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = if points.len() >= BRUTE_FORCE_BELOW {
            let n = order.len();
            Some(build(&data, dim, &mut order, 0, n))
        } else {
            None
        };
        KnnIndex {
            dim,
            data,
            order,
            root,
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
        self.len() == 0
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The `k` nearest points to `query`, ascending, optionally skipping one index.
    pub fn query(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        match &self.root {
            None => {
                for i in 0..self.len() {
                    if Some(i) == exclude {
                        continue;
                    }
                    push(&mut heap, k, Neighbor { index: i, dist2: dist2(query, self.point(i)) });
                }
            }
            Some(root) => self.search(root, query, k, exclude, &mut heap),
        }
        heap.into_sorted_vec()
    }

    fn search(
        &self,
        node: &Node,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    push(heap, k, Neighbor { index: i, dist2: dist2(query, self.point(i)) });
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, heap);
                // equality still descends: a tied point with a smaller index may lie across the plane
                if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |n| n.dist2) {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }

    /// Neighbor lists for every indexed point, excluding the point itself.
    pub fn knn_all(&self, k: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                self.query(self.point(i), k, Some(i))
                    .into_iter()
                    .map(|n| n.index)
                    .collect()
            })
            .collect()
    }
}

fn push(heap: &mut BinaryHeap<Neighbor>, k: usize, n: Neighbor) {
    if heap.len() < k {
        heap.push(n);
    } else if let Some(top) = heap.peek() {
        if n < *top {
            heap.pop();
            heap.push(n);
        }
    }
}

fn build(data: &[f64], dim: usize, order: &mut [usize], start: usize, end: usize) -> Node {
    if end - start <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let slice = &mut order[start..end];
    let mut axis = 0;
    let mut widest = -1.0;
    for a in 0..dim {
        let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = data[i * dim + a];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > widest {
            widest = hi - lo;
            axis = a;
        }
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        data[a * dim + axis]
            .total_cmp(&data[b * dim + axis])
            .then(a.cmp(&b))
    });
    let value = data[slice[mid] * dim + axis];
    // left holds coordinates <= value, right holds >= value
    let left = build(data, dim, order, start, start + mid);
    let right = build(data, dim, order, start + mid, end);
    Node::Split {
        axis,
        value,
        left: Box::new(left),
        right: Box::new(right),
    }
}

/// Unordered pairs `(i, j)`, `i < j`, where each endpoint lists the other.
pub fn mutual_edges(neighbors: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            if j > i && neighbors[j].contains(&i) {
                edges.push((i, j));
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Number of connected components of an undirected graph on `n` vertices.
pub fn count_components(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut comps = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
            comps -= 1;
        }
    }
    comps
}
