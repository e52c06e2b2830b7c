//! Static kd-tree over a flat point cloud. Built once, queried many times by
//! the sampled distance field and the classical solvers.

use crate::tensor::squared_distance;

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    /// Points reordered into implicit-median layout, n × dim flat.
    points: Vec<f64>,
}

impl KdTree {
    pub fn build(dim: usize, mut points: Vec<f64>) -> KdTree {
        assert!(dim > 0);
        assert_eq!(points.len() % dim, 0);
        let n = points.len() / dim;
        if n > 0 {
            let mut scratch: Vec<usize> = (0..n).collect();
            build_rec(&mut points, &mut scratch, dim, 0);
        }
        KdTree { dim, points }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest point: (index, squared distance).
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        assert_eq!(q.len(), self.dim);
        assert!(!self.is_empty(), "nearest on empty tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(q, 0, self.len(), 0, &mut best);
        best
    }

    /// Distance (not squared) to the nearest point.
    pub fn nearest_distance(&self, q: &[f64]) -> f64 {
        self.nearest(q).1.sqrt()
    }

    /// k nearest points as (squared distance, index), sorted ascending.
    pub fn knn(&self, q: &[f64], k: usize) -> Vec<(f64, usize)> {
        assert_eq!(q.len(), self.dim);
        let k = k.min(self.len());
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1); // max-heap by dist
        self.knn_rec(q, 0, self.len(), 0, k, &mut heap);
        heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        heap
    }

    fn nearest_rec(&self, q: &[f64], lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.point(mid);
        let d = squared_distance(q, p);
        if d < best.1 {
            *best = (mid, d);
        }
        let axis = depth % self.dim;
        let delta = q[axis] - p[axis];
        let (first, second) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, first.0, first.1, depth + 1, best);
        if delta * delta < best.1 {
            self.nearest_rec(q, second.0, second.1, depth + 1, best);
        }
    }

    fn knn_rec(
        &self,
        q: &[f64],
        lo: usize,
        hi: usize,
        depth: usize,
        k: usize,
        heap: &mut Vec<(f64, usize)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.point(mid);
        let d = squared_distance(q, p);
        if heap.len() < k {
            heap_push(heap, (d, mid));
        } else if d < heap[0].0 {
            heap_replace(heap, (d, mid));
        }
        let axis = depth % self.dim;
        let delta = q[axis] - p[axis];
        let (first, second) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, first.0, first.1, depth + 1, k, heap);
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap[0].0
        };
        if delta * delta < worst {
            self.knn_rec(q, second.0, second.1, depth + 1, k, heap);
        }
    }
}

fn build_rec(points: &mut [f64], scratch: &mut [usize], dim: usize, depth: usize) {
    let n = points.len() / dim;
    if n <= 1 {
        return;
    }
    let axis = depth % dim;
    let mid = n / 2;
    // Select the median by axis coordinate, permuting whole points.
    select_by_axis(points, dim, axis, mid);
    let (left, rest) = points.split_at_mut(mid * dim);
    let (_, right) = rest.split_at_mut(dim);
    let (sl, sr) = scratch.split_at_mut(mid.min(scratch.len()));
    build_rec(left, sl, dim, depth + 1);
    build_rec(right, sr, dim, depth + 1);
}

/// Quickselect moving whole points so that the point with the k-th smallest
/// axis coordinate sits at slot k. Deterministic pivot (middle element).
fn select_by_axis(points: &mut [f64], dim: usize, axis: usize, k: usize) {
    let mut lo = 0usize;
    let mut hi = points.len() / dim;
    while hi - lo > 1 {
        let pivot_idx = (lo + hi) / 2;
        let pivot = points[pivot_idx * dim + axis];
        // Three-way partition over [lo, hi).
        let mut lt = lo;
        let mut i = lo;
        let mut gt = hi;
        while i < gt {
            let v = points[i * dim + axis];
            if v < pivot {
                swap_points(points, dim, lt, i);
                lt += 1;
                i += 1;
            } else if v > pivot {
                gt -= 1;
                swap_points(points, dim, i, gt);
            } else {
                i += 1;
            }
        }
        if k < lt {
            hi = lt;
        } else if k >= gt {
            lo = gt;
        } else {
            return; // k falls in the equal block
        }
    }
}

fn swap_points(points: &mut [f64], dim: usize, a: usize, b: usize) {
    if a == b {
        return;
    }
    for d in 0..dim {
        points.swap(a * dim + d, b * dim + d);
    }
}

fn heap_push(heap: &mut Vec<(f64, usize)>, item: (f64, usize)) {
    heap.push(item);
    let mut i = heap.len() - 1;
    while i > 0 {
        let parent = (i - 1) / 2;
        if heap[parent].0 < heap[i].0 {
            heap.swap(parent, i);
            i = parent;
        } else {
            break;
        }
    }
}

fn heap_replace(heap: &mut [(f64, usize)], item: (f64, usize)) {
    heap[0] = item;
    let mut i = 0;
    loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut largest = i;
        if l < heap.len() && heap[l].0 > heap[largest].0 {
            largest = l;
        }
        if r < heap.len() && heap[r].0 > heap[largest].0 {
            largest = r;
        }
        if largest == i {
            break;
        }
        heap.swap(i, largest);
        i = largest;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[f64], dim: usize, q: &[f64]) -> f64 {
        (0..points.len() / dim)
            .map(|i| squared_distance(&points[i * dim..(i + 1) * dim], q))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for dim in [2usize, 3, 5] {
            let n = 500;
            let points: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tree = KdTree::build(dim, points.clone());
            for _ in 0..200 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (_, d) = tree.nearest(&q);
                let want = brute_nearest(&points, dim, &q);
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = 2;
        let n = 300;
        let points: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tree = KdTree::build(dim, points.clone());
        for _ in 0..50 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let got = tree.knn(&q, 8);
            let mut all: Vec<f64> = (0..n)
                .map(|i| squared_distance(&points[i * dim..(i + 1) * dim], &q))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (j, (d, _)) in got.iter().enumerate() {
                assert!((d - all[j]).abs() < 1e-12);
            }
        }
    }
}
