//! Feasible-set families used across the experiment suite and the
//! primitives every other module consumes: membership, sampling, and a
//! sampled boundary-distance field.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::spatial::KdTree;
use crate::subseed;
use crate::tensor::norm2;

/// Size of the precomputed feasible cloud behind `boundary_distance`.
pub const DISTANCE_CLOUD_SIZE: usize = 20_000;
const CLOUD_SEED: u64 = 0xFAB5_EED0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: point has {got} coordinates, set is {want}-dimensional")]
    DimensionMismatch { got: usize, want: usize },
    #[error("degenerate set: acceptance rate fell below 1e-4 over the sampling budget")]
    DegenerateSet,
    #[error("keep_fraction must lie in (0, 1], got {0}")]
    BadKeepFraction(f64),
    #[error("unknown constraint set id `{0}`")]
    UnknownId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    BlobWithBite,
    ConcentricCircles,
    StarShaped,
    TwoMoons,
    SphericalShell(usize),
}

impl Family {
    pub fn id(&self) -> String {
        match self {
            Family::BlobWithBite => "blob_with_bite".into(),
            Family::ConcentricCircles => "concentric_circles".into(),
            Family::StarShaped => "star_shaped".into(),
            Family::TwoMoons => "two_moons".into(),
            Family::SphericalShell(d) => format!("shell{d}"),
        }
    }
}

/// Coverage-truncation predicate conjoined onto a base set.
#[derive(Debug, Clone, PartialEq)]
pub enum Truncation {
    /// Angular sector about a centroid in the first two coordinates:
    /// points with angle(y - centroid) in [theta0, theta0 + width) are kept.
    Sector {
        centroid: Vec<f64>,
        theta0: f64,
        width: f64,
    },
    /// Half-space predicate y[axis] <= threshold.
    HalfSpace { axis: usize, threshold: f64 },
}

impl Truncation {
    fn keeps(&self, y: &[f64]) -> bool {
        match self {
            Truncation::Sector {
                centroid,
                theta0,
                width,
            } => {
                let dy = y[1] - centroid[1];
                let dx = y[0] - centroid[0];
                let ang = dy.atan2(dx);
                let mut rel = ang - theta0;
                while rel < 0.0 {
                    rel += std::f64::consts::TAU;
                }
                while rel >= std::f64::consts::TAU {
                    rel -= std::f64::consts::TAU;
                }
                rel < *width
            }
            Truncation::HalfSpace { axis, threshold } => y[*axis] <= *threshold,
        }
    }
}

/// Rule selecting the truncation predicate family for `truncate_coverage`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncateRule {
    Sector,
    HalfSpace(usize),
}

// Canonical shape parameters. The four 2D families share the sampling box
// [-2.5, 2.5]^2; shells use [-sqrt(2), sqrt(2)]^d.
const MOON_R_INNER: f64 = 0.7;
const MOON_R_OUTER: f64 = 1.3;
const MOON_UPPER_CENTER: [f64; 2] = [-0.5, 0.0];
const MOON_LOWER_CENTER: [f64; 2] = [0.5, 0.35];
const CIRCLES_RADII: [f64; 4] = [0.5, 0.9, 1.4, 1.8];
const STAR_AMPLITUDE: f64 = 0.45;
const STAR_LOBES: f64 = 5.0;
const STAR_SCALE: f64 = 1.6 / 1.45;
const BLOB_RADIUS: f64 = 1.4;
const BITE_CENTER: [f64; 2] = [1.2, 0.0];
const BITE_RADIUS: f64 = 0.7;
const BOX_2D: f64 = 2.5;

#[derive(Debug, Clone)]
pub struct ConstraintSet {
    family: Family,
    params: Vec<f64>,
    ambient_dim: usize,
    truncation: Option<Truncation>,
    feasible_cloud: OnceLock<Arc<KdTree>>,
    infeasible_cloud: OnceLock<Arc<KdTree>>,
}

impl PartialEq for ConstraintSet {
    fn eq(&self, other: &Self) -> bool {
        self.family == other.family && self.truncation == other.truncation
    }
}

impl ConstraintSet {
    pub fn new(family: Family) -> ConstraintSet {
        let (ambient_dim, params) = match family {
            Family::TwoMoons => (
                2,
                vec![
                    MOON_R_INNER,
                    MOON_R_OUTER,
                    MOON_UPPER_CENTER[0],
                    MOON_UPPER_CENTER[1],
                    MOON_LOWER_CENTER[0],
                    MOON_LOWER_CENTER[1],
                ],
            ),
            Family::ConcentricCircles => (2, CIRCLES_RADII.to_vec()),
            Family::StarShaped => (2, vec![STAR_AMPLITUDE, STAR_LOBES, STAR_SCALE]),
            Family::BlobWithBite => (
                2,
                vec![BLOB_RADIUS, BITE_CENTER[0], BITE_CENTER[1], BITE_RADIUS],
            ),
            Family::SphericalShell(d) => {
                assert!(d >= 2, "shells need dimension >= 2");
                (d, vec![1.0, 2.0])
            }
        };
        ConstraintSet {
            family,
            params,
            ambient_dim,
            truncation: None,
            feasible_cloud: OnceLock::new(),
            infeasible_cloud: OnceLock::new(),
        }
    }

    pub fn from_id(id: &str) -> Result<ConstraintSet, GeometryError> {
        let family = match id {
            "two_moons" => Family::TwoMoons,
            "blob_with_bite" => Family::BlobWithBite,
            "concentric_circles" => Family::ConcentricCircles,
            "star_shaped" => Family::StarShaped,
            "shell3" => Family::SphericalShell(3),
            "shell5" => Family::SphericalShell(5),
            "shell10" => Family::SphericalShell(10),
            other => return Err(GeometryError::UnknownId(other.to_string())),
        };
        Ok(ConstraintSet::new(family))
    }

    pub const ALL_IDS: [&'static str; 7] = [
        "two_moons",
        "blob_with_bite",
        "concentric_circles",
        "star_shaped",
        "shell3",
        "shell5",
        "shell10",
    ];

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn is_truncated(&self) -> bool {
        self.truncation.is_some()
    }

    /// Canonical string id; truncated sets carry a suffix.
    pub fn id(&self) -> String {
        match &self.truncation {
            None => self.family.id(),
            Some(_) => format!("{}#truncated", self.family.id()),
        }
    }

    /// Axis-aligned sampling box as (lo, hi), identical on every coordinate.
    pub fn bounding_box(&self) -> (f64, f64) {
        match self.family {
            Family::SphericalShell(_) => (-(2.0f64.sqrt()), 2.0f64.sqrt()),
            _ => (-BOX_2D, BOX_2D),
        }
    }

    fn base_membership(&self, y: &[f64]) -> bool {
        match self.family {
            Family::SphericalShell(_) => {
                let sq: f64 = y.iter().map(|v| v * v).sum();
                (1.0..=2.0).contains(&sq)
            }
            Family::TwoMoons => {
                let in_moon = |cx: f64, cy: f64, upper: bool| {
                    let dx = y[0] - cx;
                    let dy = y[1] - cy;
                    let r = (dx * dx + dy * dy).sqrt();
                    let radial = (MOON_R_INNER..=MOON_R_OUTER).contains(&r);
                    let angular = if upper { dy >= 0.0 } else { dy <= 0.0 };
                    radial && angular
                };
                in_moon(MOON_UPPER_CENTER[0], MOON_UPPER_CENTER[1], true)
                    || in_moon(MOON_LOWER_CENTER[0], MOON_LOWER_CENTER[1], false)
            }
            Family::ConcentricCircles => {
                let r = norm2(y);
                (CIRCLES_RADII[0]..=CIRCLES_RADII[1]).contains(&r)
                    || (CIRCLES_RADII[2]..=CIRCLES_RADII[3]).contains(&r)
            }
            Family::StarShaped => {
                let r = norm2(y);
                let theta = y[1].atan2(y[0]);
                r <= STAR_SCALE * (1.0 + STAR_AMPLITUDE * (STAR_LOBES * theta).cos())
            }
            Family::BlobWithBite => {
                let r = norm2(y);
                let bx = y[0] - BITE_CENTER[0];
                let by = y[1] - BITE_CENTER[1];
                let bite = (bx * bx + by * by).sqrt();
                r <= BLOB_RADIUS && bite >= BITE_RADIUS
            }
        }
    }

    /// Deterministic membership test for the closed feasible region.
    pub fn membership(&self, y: &[f64]) -> Result<bool, GeometryError> {
        if y.len() != self.ambient_dim {
            return Err(GeometryError::DimensionMismatch {
                got: y.len(),
                want: self.ambient_dim,
            });
        }
        let base = self.base_membership(y);
        Ok(match &self.truncation {
            None => base,
            Some(t) => base && t.keeps(y),
        })
    }

    /// Membership without the dimension check, for hot loops over known dims.
    #[inline]
    pub fn contains(&self, y: &[f64]) -> bool {
        debug_assert_eq!(y.len(), self.ambient_dim);
        let base = self.base_membership(y);
        match &self.truncation {
            None => base,
            Some(t) => base && t.keeps(y),
        }
    }

    /// Rejection sampling from the bounding box; exactly `n` feasible points.
    pub fn sample_feasible(&self, n: usize, rng_seed: u64) -> Result<Vec<Vec<f64>>, GeometryError> {
        assert!(n >= 1, "sample_feasible needs n >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.sample_feasible_with(&mut rng, n)
    }

    fn sample_feasible_with(
        &self,
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> Result<Vec<Vec<f64>>, GeometryError> {
        let (lo, hi) = self.bounding_box();
        let mut out = Vec::with_capacity(n);
        let mut attempts: u64 = 0;
        let mut point = vec![0.0; self.ambient_dim];
        while out.len() < n {
            attempts += 1;
            for c in point.iter_mut() {
                *c = rng.random_range(lo..hi);
            }
            if self.contains(&point) {
                out.push(point.clone());
            }
            if attempts % 200_000 == 0 && (out.len() as f64) < attempts as f64 * 1e-4 {
                return Err(GeometryError::DegenerateSet);
            }
        }
        Ok(out)
    }

    fn sample_infeasible_with(
        &self,
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> Result<Vec<Vec<f64>>, GeometryError> {
        let (lo, hi) = self.bounding_box();
        let mut out = Vec::with_capacity(n);
        let mut attempts: u64 = 0;
        let mut point = vec![0.0; self.ambient_dim];
        while out.len() < n {
            attempts += 1;
            for c in point.iter_mut() {
                *c = rng.random_range(lo..hi);
            }
            if !self.contains(&point) {
                out.push(point.clone());
            }
            if attempts % 200_000 == 0 && (out.len() as f64) < attempts as f64 * 1e-4 {
                return Err(GeometryError::DegenerateSet);
            }
        }
        Ok(out)
    }

    /// Labeled mixture of feasible and box-complement points. Labels always
    /// agree with membership; the feasible count is round(n * fraction).
    pub fn sample_labeled(
        &self,
        n: usize,
        feasible_fraction: f64,
        rng_seed: u64,
    ) -> Result<Vec<LabeledPoint>, GeometryError> {
        assert!(n >= 2, "sample_labeled needs n >= 2");
        assert!(
            feasible_fraction > 0.0 && feasible_fraction < 1.0,
            "feasible_fraction must lie in (0, 1)"
        );
        let n_feas = ((n as f64) * feasible_fraction).round() as usize;
        let n_feas = n_feas.clamp(1, n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let feas = self.sample_feasible_with(&mut rng, n_feas)?;
        let infeas = self.sample_infeasible_with(&mut rng, n - n_feas)?;
        let mut out: Vec<LabeledPoint> = Vec::with_capacity(n);
        out.extend(feas.into_iter().map(|y| LabeledPoint {
            y,
            x: None,
            label: true,
        }));
        out.extend(infeas.into_iter().map(|y| LabeledPoint {
            y,
            x: None,
            label: false,
        }));
        // Deterministic interleave so batches see both labels.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        Ok(order.into_iter().map(|i| out[i].clone()).collect())
    }

    fn cloud_tag(&self) -> String {
        match &self.truncation {
            None => self.family.id(),
            Some(t) => format!("{}|{t:?}", self.family.id()),
        }
    }

    /// Fixed 20k-point feasible cloud with a kd-tree, built once per set.
    pub fn feasible_cloud(&self) -> Arc<KdTree> {
        self.feasible_cloud
            .get_or_init(|| {
                let seed = subseed(CLOUD_SEED, &format!("feas|{}", self.cloud_tag()));
                let pts = self
                    .sample_feasible(DISTANCE_CLOUD_SIZE, seed)
                    .expect("distance cloud sampling failed");
                Arc::new(KdTree::build(self.ambient_dim, flatten(&pts)))
            })
            .clone()
    }

    /// Fixed 20k-point infeasible cloud (box complement) with a kd-tree.
    pub fn infeasible_cloud(&self) -> Arc<KdTree> {
        self.infeasible_cloud
            .get_or_init(|| {
                let seed = subseed(CLOUD_SEED, &format!("infeas|{}", self.cloud_tag()));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts = self
                    .sample_infeasible_with(&mut rng, DISTANCE_CLOUD_SIZE)
                    .expect("infeasible cloud sampling failed");
                Arc::new(KdTree::build(self.ambient_dim, flatten(&pts)))
            })
            .clone()
    }

    /// 0 for members; otherwise nearest-neighbor distance to the feasible
    /// cloud, a consistent overestimate at cloud resolution.
    pub fn boundary_distance(&self, y: &[f64]) -> Result<f64, GeometryError> {
        if y.len() != self.ambient_dim {
            return Err(GeometryError::DimensionMismatch {
                got: y.len(),
                want: self.ambient_dim,
            });
        }
        if self.contains(y) {
            return Ok(0.0);
        }
        Ok(self.feasible_cloud().nearest_distance(y))
    }

    /// Derived set whose membership is the original conjoined with a sector
    /// or half-space predicate retaining ~`keep_fraction` of the feasible
    /// area. Used only to generate training data.
    pub fn truncate_coverage(
        &self,
        keep_fraction: f64,
        rule: TruncateRule,
    ) -> Result<ConstraintSet, GeometryError> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(GeometryError::BadKeepFraction(keep_fraction));
        }
        if keep_fraction == 1.0 {
            return Ok(ConstraintSet::new(self.family));
        }
        let base = ConstraintSet::new(self.family);
        let seed = subseed(CLOUD_SEED, &format!("truncate|{}", base.cloud_tag()));
        let cloud = base.sample_feasible(DISTANCE_CLOUD_SIZE, seed)?;
        let truncation = match rule {
            TruncateRule::Sector => {
                let dim = base.ambient_dim;
                let mut centroid = vec![0.0; dim];
                for p in &cloud {
                    for (c, v) in centroid.iter_mut().zip(p) {
                        *c += v;
                    }
                }
                for c in centroid.iter_mut() {
                    *c /= cloud.len() as f64;
                }
                let theta0 = 0.0;
                let frac = |width: f64| {
                    let t = Truncation::Sector {
                        centroid: centroid.clone(),
                        theta0,
                        width,
                    };
                    cloud.iter().filter(|p| t.keeps(p)).count() as f64 / cloud.len() as f64
                };
                let mut lo = 0.0;
                let mut hi = std::f64::consts::TAU;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if frac(mid) < keep_fraction {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Truncation::Sector {
                    centroid,
                    theta0,
                    width: 0.5 * (lo + hi),
                }
            }
            TruncateRule::HalfSpace(axis) => {
                assert!(axis < base.ambient_dim);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in &cloud {
                    lo = lo.min(p[axis]);
                    hi = hi.max(p[axis]);
                }
                let frac = |threshold: f64| {
                    cloud.iter().filter(|p| p[axis] <= threshold).count() as f64
                        / cloud.len() as f64
                };
                let (mut lo_t, mut hi_t) = (lo, hi);
                for _ in 0..60 {
                    let mid = 0.5 * (lo_t + hi_t);
                    if frac(mid) < keep_fraction {
                        lo_t = mid;
                    } else {
                        hi_t = mid;
                    }
                }
                Truncation::HalfSpace {
                    axis,
                    threshold: 0.5 * (lo_t + hi_t),
                }
            }
        };
        Ok(ConstraintSet {
            family: base.family,
            params: base.params.clone(),
            ambient_dim: base.ambient_dim,
            truncation: Some(truncation),
            feasible_cloud: OnceLock::new(),
            infeasible_cloud: OnceLock::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub y: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub label: bool,
}

pub fn flatten(points: &[Vec<f64>]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(points.len() * points.first().map_or(0, |p| p.len()));
    for p in points {
        flat.extend_from_slice(p);
    }
    flat
}

/// CSV export with header `y_0,...,y_{d-1},label`.
pub fn labeled_to_csv(points: &[LabeledPoint]) -> String {
    let d = points.first().map_or(0, |p| p.y.len());
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("y_{j},"));
    }
    out.push_str("label\n");
    for p in points {
        for v in &p.y {
            out.push_str(&format!("{v},"));
        }
        out.push_str(if p.label { "1\n" } else { "0\n" });
    }
    out
}

/// Minimal input-dependent constraint family for exercising the conditional
/// autoencoder pathway: a disk of fixed radius centered at the parameter x.
#[derive(Debug, Clone)]
pub struct ShiftedDisk {
    pub radius: f64,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl ShiftedDisk {
    pub fn new(radius: f64) -> ShiftedDisk {
        ShiftedDisk {
            radius,
            x_lo: -1.0,
            x_hi: 1.0,
        }
    }

    pub fn membership(&self, x: &[f64], y: &[f64]) -> bool {
        debug_assert_eq!(x.len(), 2);
        debug_assert_eq!(y.len(), 2);
        let dx = y[0] - x[0];
        let dy = y[1] - x[1];
        (dx * dx + dy * dy).sqrt() <= self.radius
    }

    /// (x, y, label) triples; y drawn near the disk around its x.
    pub fn sample_labeled(&self, n: usize, feasible_fraction: f64, seed: u64) -> Vec<LabeledPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_feas = ((n as f64) * feasible_fraction).round() as usize;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let want_feasible = i < n_feas;
            let x = vec![
                rng.random_range(self.x_lo..self.x_hi),
                rng.random_range(self.x_lo..self.x_hi),
            ];
            let span = 2.0 * self.radius;
            loop {
                let y = vec![
                    x[0] + rng.random_range(-span..span),
                    x[1] + rng.random_range(-span..span),
                ];
                if self.membership(&x, &y) == want_feasible {
                    out.push(LabeledPoint {
                        y,
                        x: Some(x),
                        label: want_feasible,
                    });
                    break;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shell_membership_is_the_norm_predicate() {
        let set = ConstraintSet::new(Family::SphericalShell(3));
        assert!(set.membership(&[1.0, 0.0, 0.0]).unwrap());
        assert!(!set.membership(&[0.0, 0.0, 0.0]).unwrap());
        assert!(set.membership(&[1.0, 1.0, 0.0]).unwrap()); // norm^2 = 2
        assert!(!set.membership(&[1.2, 1.0, 0.0]).unwrap()); // norm^2 = 2.44
    }

    #[test]
    fn membership_rejects_dimension_mismatch() {
        let set = ConstraintSet::new(Family::TwoMoons);
        assert!(matches!(
            set.membership(&[0.0, 0.0, 0.0]),
            Err(GeometryError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn two_moons_center_arc_point_is_feasible() {
        // Midpoint of the upper moon's center arc: center (-0.5, 0), mid
        // radius 1.0, angle pi/2 -> (-0.5, 1.0). Radial distance 1.0 lies in
        // [0.7, 1.3] and dy >= 0 holds.
        let set = ConstraintSet::new(Family::TwoMoons);
        assert!(set.membership(&[-0.5, 1.0]).unwrap());
        // And a matching point on the lower moon.
        assert!(set.membership(&[0.5, 0.35 - 1.0]).unwrap());
    }

    #[test]
    fn sample_feasible_satisfies_membership() {
        let set = ConstraintSet::new(Family::SphericalShell(3));
        let pts = set.sample_feasible(1000, 3).unwrap();
        assert_eq!(pts.len(), 1000);
        for p in &pts {
            let sq: f64 = p.iter().map(|v| v * v).sum();
            assert!((1.0..=2.0).contains(&sq));
        }
    }

    #[test]
    fn sample_feasible_is_reproducible() {
        let set = ConstraintSet::new(Family::TwoMoons);
        let a = set.sample_feasible(500, 7).unwrap();
        let b = set.sample_feasible(500, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blob_samples_never_fall_in_the_bite() {
        let set = ConstraintSet::new(Family::BlobWithBite);
        let pts = set.sample_feasible(10_000, 11).unwrap();
        for p in &pts {
            // Independent check against the bite-disk inequality.
            let dx = p[0] - 1.2;
            let dy = p[1];
            assert!((dx * dx + dy * dy).sqrt() >= 0.7);
        }
    }

    #[test]
    fn sample_labeled_counts_and_label_consistency() {
        let set = ConstraintSet::new(Family::ConcentricCircles);
        let pts = set.sample_labeled(100, 0.5, 9).unwrap();
        let feas = pts.iter().filter(|p| p.label).count();
        assert_eq!(feas, 50);
        for p in &pts {
            assert_eq!(p.label, set.membership(&p.y).unwrap());
        }
    }

    #[test]
    fn sample_labeled_is_reproducible() {
        let set = ConstraintSet::new(Family::StarShaped);
        let a = set.sample_labeled(2000, 0.5, 3).unwrap();
        let b = set.sample_labeled(2000, 0.5, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boundary_distance_on_shell_matches_analytic() {
        let set = ConstraintSet::new(Family::SphericalShell(3));
        let d = set.boundary_distance(&[2.0, 0.0, 0.0]).unwrap();
        let want = 2.0 - 2.0f64.sqrt();
        assert!(
            (d - want).abs() < 0.05,
            "estimate {d} vs analytic {want} beyond cloud resolution"
        );
    }

    #[test]
    fn boundary_distance_zero_iff_member() {
        let set = ConstraintSet::new(Family::TwoMoons);
        let pts = set.sample_feasible(50, 21).unwrap();
        for p in &pts {
            assert_eq!(set.boundary_distance(p).unwrap(), 0.0);
        }
        // Far outside the bounding box: positive and finite.
        let d = set.boundary_distance(&[40.0, -35.0]).unwrap();
        assert!(d > 0.0 && d.is_finite());
    }

    #[test]
    fn truncate_identity_preserves_membership() {
        let set = ConstraintSet::new(Family::StarShaped);
        let same = set.truncate_coverage(1.0, TruncateRule::Sector).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let p = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            assert_eq!(set.contains(&p), same.contains(&p));
        }
    }

    #[test]
    fn truncate_half_keeps_half_the_area() {
        let set = ConstraintSet::new(Family::BlobWithBite);
        let half = set.truncate_coverage(0.5, TruncateRule::Sector).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut full = 0u64;
        let mut kept = 0u64;
        for _ in 0..100_000 {
            let p = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            if set.contains(&p) {
                full += 1;
                if half.contains(&p) {
                    kept += 1;
                }
            }
        }
        let ratio = kept as f64 / full as f64;
        assert!((0.45..=0.55).contains(&ratio), "area ratio {ratio}");
    }

    #[test]
    fn truncate_quarter_is_a_subset() {
        let set = ConstraintSet::new(Family::ConcentricCircles);
        let quarter = set.truncate_coverage(0.25, TruncateRule::Sector).unwrap();
        let pts = quarter.sample_feasible(2000, 5).unwrap();
        for p in &pts {
            assert!(set.contains(p));
        }
    }

    #[test]
    fn truncate_rejects_nonpositive_fraction() {
        let set = ConstraintSet::new(Family::TwoMoons);
        assert!(set.truncate_coverage(0.0, TruncateRule::Sector).is_err());
        assert!(set.truncate_coverage(-0.1, TruncateRule::Sector).is_err());
        assert!(set.truncate_coverage(1.5, TruncateRule::Sector).is_err());
    }

    #[test]
    fn halfspace_truncation_hits_target_fraction() {
        let set = ConstraintSet::new(Family::StarShaped);
        let t = set
            .truncate_coverage(0.75, TruncateRule::HalfSpace(1))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut full = 0u64;
        let mut kept = 0u64;
        for _ in 0..100_000 {
            let p = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            if set.contains(&p) {
                full += 1;
                if t.contains(&p) {
                    kept += 1;
                }
            }
        }
        let ratio = kept as f64 / full as f64;
        assert!((0.70..=0.80).contains(&ratio), "area ratio {ratio}");
    }

    #[test]
    fn labeled_csv_has_expected_header() {
        let set = ConstraintSet::new(Family::TwoMoons);
        let pts = set.sample_labeled(4, 0.5, 1).unwrap();
        let csv = labeled_to_csv(&pts);
        assert!(csv.starts_with("y_0,y_1,label\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn shifted_disk_labels_match_membership() {
        let disk = ShiftedDisk::new(0.8);
        let pts = disk.sample_labeled(200, 0.5, 13);
        for p in &pts {
            let x = p.x.as_ref().unwrap();
            assert_eq!(p.label, disk.membership(x, &p.y));
        }
    }
}
