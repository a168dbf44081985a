//! Minimal 2-D k-d tree for nearest-neighbor queries over control-fragment
//! centers. Distance ties are broken by id so query results are unique.

use crate::geometry::Point;

#[derive(Debug, Clone)]
struct Node {
    point: Point,
    id: usize,
    axis: u8,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct KdTree {
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[(usize, Point)]) -> Self {
        let mut items: Vec<(usize, Point)> = points.to_vec();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(items.len()),
            root: None,
        };
        let n = items.len();
        if n > 0 {
            tree.root = Some(tree.build_rec(&mut items[..], 0));
        }
        debug_assert_eq!(tree.nodes.len(), n);
        tree
    }

    fn build_rec(&mut self, items: &mut [(usize, Point)], depth: u8) -> usize {
        let axis = depth % 2;
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |a, b| {
            let (ka, kb) = if axis == 0 {
                (a.1.x, b.1.x)
            } else {
                (a.1.y, b.1.y)
            };
            ka.total_cmp(&kb).then(a.0.cmp(&b.0))
        });
        let (id, point) = items[mid];
        let idx = self.nodes.len();
        self.nodes.push(Node {
            point,
            id,
            axis,
            left: None,
            right: None,
        });
        if mid > 0 {
            let l = self.build_rec(&mut items[..mid], depth + 1);
            self.nodes[idx].left = Some(l);
        }
        if mid + 1 < items.len() {
            let r = self.build_rec(&mut items[mid + 1..], depth + 1);
            self.nodes[idx].right = Some(r);
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The `k` nearest stored points to `query`, skipping ids rejected by
    /// `accept`. Returns `(id, squared distance)` sorted by (distance, id).
    pub fn k_nearest(
        &self,
        query: Point,
        k: usize,
        accept: impl Fn(usize) -> bool,
    ) -> Vec<(usize, f64)> {
        if k == 0 || self.root.is_none() {
            return Vec::new();
        }
        // Best list kept sorted by (d2, id); at most k entries.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(self.root.unwrap(), query, k, &accept, &mut best);
        best.into_iter().map(|(d2, id)| (id, d2)).collect()
    }

    fn search(
        &self,
        node: usize,
        query: Point,
        k: usize,
        accept: &impl Fn(usize) -> bool,
        best: &mut Vec<(f64, usize)>,
    ) {
        let n = &self.nodes[node];
        if accept(n.id) {
            let d2 = (n.point - query).norm_squared();
            let entry = (d2, n.id);
            let pos = best.partition_point(|e| *e < entry);
            if pos < k {
                best.insert(pos, entry);
                best.truncate(k);
            }
        }
        let delta = if n.axis == 0 {
            query.x - n.point.x
        } else {
            query.y - n.point.y
        };
        let (near, far) = if delta <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, query, k, accept, best);
        }
        // Visit the far side only if the splitting plane can still hold a
        // closer point than the current k-th best.
        let need_far = best.len() < k || delta * delta <= best.last().unwrap().0;
        if need_far {
            if let Some(c) = far {
                self.search(c, query, k, accept, best);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[(usize, Point)], q: Point, k: usize, skip: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(f64, usize)> = points
            .iter()
            .filter(|(id, _)| *id != skip)
            .map(|(id, p)| ((p - q).norm_squared(), *id))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v.truncate(k);
        v.into_iter().map(|(d, id)| (id, d)).collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let points: Vec<(usize, Point)> = (0..200)
            .map(|id| {
                (
                    id,
                    Point::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0)),
                )
            })
            .collect();
        let tree = KdTree::build(&points);
        assert_eq!(tree.len(), 200);
        for t in 0..50 {
            let q = Point::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0));
            let skip = t * 3;
            let got = tree.k_nearest(q, 7, |id| id != skip);
            let want = brute(&points, q, 7, skip);
            assert_eq!(got, want, "query {t}");
        }
    }

    #[test]
    fn handles_duplicates_and_small_sets() {
        let p = Point::new(1.0, 2.0);
        let points = vec![(0, p), (1, p), (2, p)];
        let tree = KdTree::build(&points);
        let got = tree.k_nearest(p, 2, |_| true);
        assert_eq!(got, vec![(0, 0.0), (1, 0.0)]);
        assert!(KdTree::build(&[]).k_nearest(p, 3, |_| true).is_empty());
    }
}
