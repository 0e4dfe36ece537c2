//! Static kd-tree for radius and nearest-neighbour queries in low dimensions.
//!
//! Built once per point set and shared read-only between threads. Radius
//! queries are closed (`dist <= r`); nearest-neighbour ties resolve to the
//! lower point index.

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
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

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: Vec<[f64; D]>) -> Self {
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; D]] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for &i in &self.order[start..end] {
            for k in 0..D {
                lo[k] = lo[k].min(self.points[i][k]);
                hi[k] = hi[k].max(self.points[i][k]);
            }
        }
        let axis = (0..D)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Calls `visit` for every point within `radius` of `query` (closed ball).
    pub fn for_each_within(&self, query: &[f64; D], radius: f64, mut visit: impl FnMut(usize)) {
        if self.points.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        if dist2(&self.points[i], query) <= r2 {
                            visit(i);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    if query[axis] - radius <= value {
                        stack.push(left);
                    }
                    if query[axis] + radius >= value {
                        stack.push(right);
                    }
                }
            }
        }
    }

    /// Indices of all points within `radius` of `query`, ascending.
    pub fn within_radius(&self, query: &[f64; D], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, radius, |i| out.push(i));
        out.sort_unstable();
        out
    }

    /// Nearest point and its squared distance; ties go to the lower index.
    pub fn nearest(&self, query: &[f64; D]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, query, &mut best);
        Some((best.1, best.0))
    }

    fn nearest_in(&self, n: usize, query: &[f64; D], best: &mut (f64, usize)) {
        match self.nodes[n] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], query);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, query, best);
                // `<=` keeps equidistant points on the far side reachable for the tie rule
                if diff * diff <= best.0 {
                    self.nearest_in(far, query, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_tree() {
        let t: KdTree<3> = KdTree::new(vec![]);
        assert!(t.nearest(&[0.0; 3]).is_none());
        assert!(t.within_radius(&[0.0; 3], 1.0).is_empty());
    }

    #[test]
    fn radius_is_closed() {
        let t = KdTree::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(t.within_radius(&[0.0, 0.0], 1.0), vec![0, 1]);
    }

    #[test]
    fn nearest_tie_goes_low() {
        let pts: Vec<[f64; 1]> = (0..100).map(|i| [if i % 2 == 0 { -1.0 } else { 1.0 }]).collect();
        let t = KdTree::new(pts);
        assert_eq!(t.nearest(&[0.0]).unwrap().0, 0);
        let t = KdTree::new(vec![[1.0], [-1.0]]);
        assert_eq!(t.nearest(&[0.0]).unwrap().0, 0);
    }

    #[test]
    fn duplicate_points_do_not_recurse_forever() {
        let t = KdTree::new(vec![[1.0, 1.0, 1.0]; 1000]);
        assert_eq!(t.within_radius(&[1.0, 1.0, 1.0], 0.0).len(), 1000);
        assert_eq!(t.nearest(&[0.0; 3]).unwrap().0, 0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in proptest::collection::vec(prop::array::uniform3(-5i32..5), 1..200),
            q in prop::array::uniform3(-6i32..6),
            r in 0i32..6,
        ) {
            let pts: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] as f64 * 0.5, p[1] as f64 * 0.5, p[2] as f64 * 0.5]).collect();
            let q = [q[0] as f64 * 0.5, q[1] as f64 * 0.5, q[2] as f64 * 0.5];
            let r = r as f64 * 0.5;
            let t = KdTree::new(pts.clone());
            let brute: Vec<usize> = (0..pts.len()).filter(|&i| dist2(&pts[i], &q) <= r * r).collect();
            prop_assert_eq!(t.within_radius(&q, r), brute);
            let mut best = (f64::INFINITY, 0);
            for (i, p) in pts.iter().enumerate() {
                let d = dist2(p, &q);
                if d < best.0 { best = (d, i); }
            }
            prop_assert_eq!(t.nearest(&q).unwrap(), (best.1, best.0));
        }
    }
}
