//! Static kd-tree over point positions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::{PointCloud, Vec3};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Answers k-nearest-neighbor and fixed-radius queries.
///
/// `knn` results are sorted by ascending distance (ties by index); `ball`
/// results are sorted by ascending index.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    SpatialIndex::build(cloud.points())
}

impl SpatialIndex {
    pub fn build(points: &[Vec3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The `min(k, N)` nearest indices, nearest first.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<usize> {
        self.knn_with_dist2(q, k).into_iter().map(|(i, _)| i).collect()
    }

    /// Like [`knn`](Self::knn) but also returns squared distances.
    pub fn knn_with_dist2(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, q, k, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2)).collect()
    }

    fn knn_node(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate { d2: (self.points[i] - q).norm_squared(), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_node(far, q, k, heap);
                }
            }
        }
    }

    /// Every index within distance `r` of `q` (inclusive), ascending.
    pub fn ball(&self, q: &Vec3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() && r >= 0.0 {
            self.ball_node(0, q, r * r, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn ball_node(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(
                    self.order[start..end]
                        .iter()
                        .copied()
                        .filter(|&i| (self.points[i] - q).norm_squared() <= r2),
                );
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.ball_node(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.ball_node(right, q, r2, out);
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod brute {
    use super::*;

    pub fn knn(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    pub fn ball(points: &[Vec3], q: &Vec3, r: f64) -> Vec<usize> {
        (0..points.len()).filter(|&i| (points[i] - q).norm_squared() <= r * r).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fewer_points_than_k() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)];
        let index = SpatialIndex::build(&pts);
        assert_eq!(index.knn(&pts[0], 5), vec![0, 1, 2]);
    }

    #[test]
    fn zero_radius_ball_hits_self() {
        let pts: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.5)).collect();
        let index = SpatialIndex::build(&pts);
        assert_eq!(index.ball(&pts[17], 0.0), vec![17]);
    }

    #[test]
    fn grid_knn_matches_analytic_neighbors() {
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                for z in 0..10 {
                    pts.push(Vec3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let index = SpatialIndex::build(&pts);
        let center = 5 * 100 + 5 * 10 + 5;
        let nn = index.knn(&pts[center], 7);
        assert_eq!(nn[0], center);
        let mut rest: Vec<usize> = nn[1..].to_vec();
        rest.sort();
        assert_eq!(rest, vec![center - 100, center - 10, center - 1, center + 1, center + 10, center + 100]);
        assert_eq!(nn, brute::knn(&pts, &pts[center], 7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_brute_force(
            coords in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..400),
            k in 1usize..40,
            r in 0.0f64..6.0,
            q in (-12.0f64..12.0, -12.0f64..12.0, -12.0f64..12.0),
        ) {
            let pts: Vec<Vec3> = coords.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let index = SpatialIndex::build(&pts);
            let q = Vec3::new(q.0, q.1, q.2);
            prop_assert_eq!(index.knn(&q, k), brute::knn(&pts, &q, k));
            prop_assert_eq!(index.ball(&q, r), brute::ball(&pts, &q, r));
        }
    }
}
