//! Exact nearest-neighbor queries over 3D points.
//!
//! Ties are always resolved toward the lowest point index, in both the tree
//! and the brute-force path, so results never depend on which path ran.

use rayon::prelude::*;

use crate::geom::{dist2, Point3};

/// Below this many points a linear scan is used instead of a tree.
pub const BRUTE_FORCE_BELOW: usize = 64;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree built once over a point set.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    /// Point indices, permuted so every leaf covers a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for d in 0..3 {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .expect("three axes");
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[id] {
            *l = left;
            *r = right;
        }
        id
    }

    /// Nearest point to `q`; `None` only for an empty tree.
    pub fn nearest(&self, q: Point3) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: Point3, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, self.points[i]);
                    if d < best.dist2 || (d == best.dist2 && i < best.index) {
                        *best = Neighbor { index: i, dist2: d };
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `<=` keeps equal-distance candidates reachable for tie-breaking
                if delta * delta <= best.dist2 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Linear scan with the same tie rule as the tree.
pub fn nearest_brute_force(points: &[Point3], q: Point3) -> Option<Neighbor> {
    let mut best: Option<Neighbor> = None;
    for (i, &p) in points.iter().enumerate() {
        let d = dist2(q, p);
        if best.is_none_or(|b| d < b.dist2) {
            best = Some(Neighbor { index: i, dist2: d });
        }
    }
    best
}

/// Nearest neighbor in `targets` for every query, choosing tree or scan by size.
pub fn nearest_all(targets: &[Point3], queries: &[Point3]) -> Vec<Neighbor> {
    if targets.is_empty() {
        return Vec::new();
    }
    if targets.len() < BRUTE_FORCE_BELOW {
        return queries
            .iter()
            .map(|&q| nearest_brute_force(targets, q).expect("non-empty"))
            .collect();
    }
    let tree = KdTree::new(targets);
    nearest_all_with(&tree, queries)
}

pub fn nearest_all_with(tree: &KdTree, queries: &[Point3]) -> Vec<Neighbor> {
    queries
        .par_iter()
        .with_min_len(256)
        .map(|&q| tree.nearest(q).expect("non-empty tree"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 13, 64, 300, 2000] {
            let pts = random_points(n, &mut rng);
            let tree = KdTree::new(&pts);
            for _ in 0..200 {
                let q = [rng.gen::<f64>() * 1.4 - 0.2, rng.gen(), rng.gen()];
                assert_eq!(tree.nearest(q), nearest_brute_force(&pts, q));
            }
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        // lattice points produce many exact ties
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    pts.push([i as f64, j as f64, k as f64]);
                }
            }
        }
        pts.extend(pts.clone()); // exact duplicates at higher indices
        let tree = KdTree::new(&pts);
        for i in 0..5 {
            for j in 0..5 {
                let q = [i as f64 + 0.5, j as f64 + 0.5, 2.5];
                assert_eq!(tree.nearest(q), nearest_brute_force(&pts, q));
            }
        }
        assert!(tree.nearest([0.0, 0.0, 0.0]).unwrap().index == 0);
    }

    #[test]
    fn coincident_points() {
        let pts = vec![[1.0, 1.0, 1.0]; 100];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest([0.0; 3]).unwrap().index, 0);
        assert!(KdTree::new(&[]).nearest([0.0; 3]).is_none());
    }
}
