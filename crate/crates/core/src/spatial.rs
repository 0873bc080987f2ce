//! Spatial queries over immutable clouds: k-d tree index, axis-aligned box
//! queries, nearest neighbor, grid subsampling, label transfer and covered
//! area.
//!
//! Conventions shared by every operation here: boxes and grid cells are
//! half-open (lower bound inclusive, upper bound exclusive, per axis), grid
//! cells are anchored at the coordinate origin, and distance ties resolve to
//! the smallest point index.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::{Label, Point};

/// Pixel side used by area reports when nothing else is configured, in
/// meters.
pub const DEFAULT_COVERAGE_PIXEL: f64 = 0.1;

const LEAF_SIZE: usize = 16;

#[derive(Debug)]
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

/// A k-d tree over a snapshot of a cloud's points. Queries return indices
/// into the original point sequence and do not depend on build order.
#[derive(Debug)]
pub struct SpatialIndex {
    points: Vec<Point>,
    perm: Vec<u32>,
    root: Node,
}

impl SpatialIndex {
    /// Builds an index over the cloud's points. Fails on an empty cloud.
    pub fn build(cloud: &LabeledCloud) -> Result<Self> {
        Self::from_points(cloud.points())
    }

    /// Builds an index directly over a point slice.
    pub fn from_points(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let points = points.to_vec();
        let mut perm: Vec<u32> = (0..points.len() as u32).collect();
        let root = build_node(&points, &mut perm, 0, points.len());
        Ok(Self { points, perm, root })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All point indices inside the half-open cube
    /// `[center - half_extent, center + half_extent)^3`, ascending.
    pub fn box_query(&self, center: Point, half_extent: f64) -> Vec<usize> {
        assert!(
            half_extent > 0.0 && half_extent.is_finite(),
            "half_extent must be positive and finite"
        );
        let lo = [
            center[0] - half_extent,
            center[1] - half_extent,
            center[2] - half_extent,
        ];
        let hi = [
            center[0] + half_extent,
            center[1] + half_extent,
            center[2] + half_extent,
        ];
        let mut out = Vec::new();
        self.box_visit(&self.root, &lo, &hi, &mut out);
        out.sort_unstable();
        out
    }

    fn box_visit(&self, node: &Node, lo: &Point, hi: &Point, out: &mut Vec<usize>) {
        match node {
            Node::Leaf { start, end } => {
                for &id in &self.perm[*start..*end] {
                    let p = self.points[id as usize];
                    if (0..3).all(|d| lo[d] <= p[d] && p[d] < hi[d]) {
                        out.push(id as usize);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                if lo[*axis] <= *value {
                    self.box_visit(left, lo, hi, out);
                }
                if hi[*axis] > *value {
                    self.box_visit(right, lo, hi, out);
                }
            }
        }
    }

    /// Index of the point closest to `query`; ties resolve to the smallest
    /// index.
    pub fn nearest(&self, query: Point) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_visit(&self.root, &query, &mut best);
        best.1
    }

    fn nearest_visit(&self, node: &Node, query: &Point, best: &mut (f64, usize)) {
        match node {
            Node::Leaf { start, end } => {
                for &id in &self.perm[*start..*end] {
                    let id = id as usize;
                    let d2 = dist2(&self.points[id], query);
                    if d2 < best.0 || (d2 == best.0 && id < best.1) {
                        *best = (d2, id);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - *value;
                let (near, far) = if delta <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_visit(near, query, best);
                if delta * delta <= best.0 {
                    self.nearest_visit(far, query, best);
                }
            }
        }
    }
}

fn build_node(points: &[Point], perm: &mut [u32], start: usize, end: usize) -> Node {
    let len = end - start;
    if len <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let slice = &mut perm[..];
    let range = &mut slice[start..end];

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &id in range.iter() {
        let p = points[id as usize];
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        return Node::Leaf { start, end };
    }

    let mid = len / 2;
    range.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let value = points[range[mid] as usize][axis];
    let left = build_node(points, perm, start, start + mid);
    let right = build_node(points, perm, start + mid, end);
    Node::Split {
        axis,
        value,
        left: Box::new(left),
        right: Box::new(right),
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn cell_key(p: &Point, cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

/// Output of [`grid_subsample`]: the reduced cloud plus, for every kept
/// point, its index in the original cloud.
#[derive(Debug, Clone)]
pub struct SubsampleResult {
    pub cloud: LabeledCloud,
    pub kept_indices: Vec<usize>,
    pub cell: f64,
}

/// Reduces a cloud to one representative per occupied grid cell.
///
/// Cells have side `cell` and are anchored at the origin. The representative
/// of a cell is the real input point closest to the cell's barycenter of
/// points, ties resolving to the smallest index. Representatives keep their
/// own coordinates and label and are returned in ascending original-index
/// order.
pub fn grid_subsample(cloud: &LabeledCloud, cell: f64) -> Result<SubsampleResult> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::NonPositiveParam {
            name: "cell",
            value: cell,
        });
    }

    let mut acc: HashMap<[i64; 3], ([f64; 3], usize)> = HashMap::new();
    for p in cloud.points() {
        let entry = acc.entry(cell_key(p, cell)).or_insert(([0.0; 3], 0));
        for d in 0..3 {
            entry.0[d] += p[d];
        }
        entry.1 += 1;
    }

    let mut best: HashMap<[i64; 3], (f64, usize)> = HashMap::with_capacity(acc.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let key = cell_key(p, cell);
        let (sum, count) = acc[&key];
        let bary = [
            sum[0] / count as f64,
            sum[1] / count as f64,
            sum[2] / count as f64,
        ];
        let d2 = dist2(p, &bary);
        let slot = best.entry(key).or_insert((f64::INFINITY, usize::MAX));
        if d2 < slot.0 {
            *slot = (d2, i);
        }
    }

    let mut kept_indices: Vec<usize> = best.values().map(|&(_, i)| i).collect();
    kept_indices.sort_unstable();

    let points: Vec<Point> = kept_indices.iter().map(|&i| cloud.points()[i]).collect();
    let labels = cloud
        .labels()
        .map(|ls| kept_indices.iter().map(|&i| ls[i]).collect());
    let sub = LabeledCloud::new(points, labels, cloud.class_table().clone())?;
    Ok(SubsampleResult {
        cloud: sub,
        kept_indices,
        cell,
    })
}

/// Gives every point of `original` the label of its nearest point in
/// `subsampled` (ties to the smallest index).
pub fn transfer_labels(
    original: &LabeledCloud,
    subsampled: &LabeledCloud,
    sub_labels: &[Label],
) -> Result<Vec<Label>> {
    if sub_labels.len() != subsampled.len() {
        return Err(Error::LabelCountMismatch {
            points: subsampled.len(),
            labels: sub_labels.len(),
        });
    }
    let index = SpatialIndex::build(subsampled)?;
    Ok(original
        .points()
        .par_iter()
        .map(|p| sub_labels[index.nearest(*p)])
        .collect())
}

/// Area covered by the cloud's footprint in the XY plane: the number of
/// distinct occupied pixels times the pixel area. Pixels are half-open
/// squares of side `pixel` anchored at the origin.
pub fn covered_area(cloud: &LabeledCloud, pixel: f64) -> Result<f64> {
    if !(pixel > 0.0 && pixel.is_finite()) {
        return Err(Error::NonPositiveParam {
            name: "pixel",
            value: pixel,
        });
    }
    let occupied: HashSet<(i64, i64)> = cloud
        .points()
        .iter()
        .map(|p| ((p[0] / pixel).floor() as i64, (p[1] / pixel).floor() as i64))
        .collect();
    Ok(occupied.len() as f64 * pixel * pixel)
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Random cloud mixing continuous coordinates, lattice coordinates (to
    /// land exactly on cell and box boundaries) and exact duplicates (to
    /// exercise tie-breaking).
    fn mixed_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        let mut points: Vec<Point> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    [
                        rng.random_range(-4.0..4.0),
                        rng.random_range(-4.0..4.0),
                        rng.random_range(-2.0..2.0),
                    ]
                } else {
                    [
                        rng.random_range(-16..16) as f64 * 0.25,
                        rng.random_range(-16..16) as f64 * 0.25,
                        rng.random_range(-8..8) as f64 * 0.25,
                    ]
                }
            })
            .collect();
        for _ in 0..n / 10 {
            let src = rng.random_range(0..points.len());
            points.push(points[src]);
        }
        points
    }

    fn cloud_of(points: Vec<Point>) -> LabeledCloud {
        LabeledCloud::unlabeled(points).unwrap()
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let err = SpatialIndex::build(&cloud_of(vec![])).unwrap_err();
        assert!(matches!(err, Error::EmptyCloud));
    }

    #[test]
    fn box_query_boundaries_are_half_open() {
        let points = vec![
            [-1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0 - 1e-12, 0.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let index = SpatialIndex::from_points(&points).unwrap();
        assert_eq!(index.box_query([0.0; 3], 1.0), vec![0, 2, 3]);
    }

    #[test]
    fn nearest_tie_resolves_to_smallest_index() {
        let points = vec![
            [2.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
        ];
        let index = SpatialIndex::from_points(&points).unwrap();
        assert_eq!(index.nearest([0.0; 3]), 1);
        assert_eq!(index.nearest([1.0, 0.0, 0.0]), 1);
    }

    #[test]
    fn box_query_matches_linear_scan_on_100_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(401);
        for case in 0..100 {
            let points = mixed_cloud(&mut rng, 60 + case * 5);
            let index = SpatialIndex::from_points(&points).unwrap();
            let center = [
                rng.random_range(-16..16) as f64 * 0.25,
                rng.random_range(-16..16) as f64 * 0.25,
                rng.random_range(-8..8) as f64 * 0.25,
            ];
            let half = [0.25, 0.5, 1.0, 1.75][case % 4];
            assert_eq!(
                index.box_query(center, half),
                oracle::box_query(&points, center, half),
                "case {case}"
            );
        }
    }

    #[test]
    fn nearest_matches_linear_scan_on_100_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(402);
        for case in 0..100 {
            let points = mixed_cloud(&mut rng, 50 + case * 3);
            let index = SpatialIndex::from_points(&points).unwrap();
            let query = if case % 3 == 0 {
                points[rng.random_range(0..points.len())]
            } else {
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-3.0..3.0),
                ]
            };
            assert_eq!(
                index.nearest(query),
                oracle::nearest(&points, query),
                "case {case}"
            );
        }
    }

    #[test]
    fn subsample_matches_linear_scan_on_100_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(403);
        for case in 0..100 {
            let points = mixed_cloud(&mut rng, 40 + case * 4);
            let cloud = cloud_of(points.clone());
            let cell = [0.25, 0.4, 1.0][case % 3];
            let result = grid_subsample(&cloud, cell).unwrap();
            assert_eq!(
                result.kept_indices,
                oracle::subsample_indices(&points, cell),
                "case {case}"
            );
        }
    }

    #[test]
    fn subsample_rejects_non_positive_cell() {
        let cloud = cloud_of(vec![[0.0; 3]]);
        assert!(grid_subsample(&cloud, 0.0).is_err());
        assert!(grid_subsample(&cloud, -1.0).is_err());
    }

    #[test]
    fn subsample_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let cloud = cloud_of(mixed_cloud(&mut rng, 300));
        let once = grid_subsample(&cloud, 0.5).unwrap();
        let twice = grid_subsample(&once.cloud, 0.5).unwrap();
        assert_eq!(twice.cloud.points(), once.cloud.points());
        assert_eq!(twice.kept_indices, (0..once.cloud.len()).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_keeps_labels_of_representatives() {
        let points = vec![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [5.0, 5.0, 5.0]];
        let cloud = LabeledCloud::with_labels(points, vec![1, 2, 3]).unwrap();
        let result = grid_subsample(&cloud, 1.0).unwrap();
        for (&kept, &label) in result
            .kept_indices
            .iter()
            .zip(result.cloud.labels().unwrap())
        {
            assert_eq!(label, cloud.labels().unwrap()[kept]);
        }
    }

    #[test]
    fn every_point_is_near_some_representative() {
        let mut rng = ChaCha8Rng::seed_from_u64(405);
        let cloud = cloud_of(mixed_cloud(&mut rng, 500));
        let cell = 0.5;
        let result = grid_subsample(&cloud, cell).unwrap();
        let index = SpatialIndex::build(&result.cloud).unwrap();
        let max_d2 = 3.0 * cell * cell;
        for p in cloud.points() {
            let n = index.nearest(*p);
            assert!(dist2(p, &result.cloud.points()[n]) <= max_d2);
        }
    }

    #[test]
    fn transfer_labels_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(406);
        for case in 0..20 {
            let points = mixed_cloud(&mut rng, 200);
            let cloud = cloud_of(points.clone());
            let sub = grid_subsample(&cloud, 0.5).unwrap();
            let sub_labels: Vec<Label> =
                (0..sub.cloud.len()).map(|_| rng.random_range(0..5)).collect();
            let got = transfer_labels(&cloud, &sub.cloud, &sub_labels).unwrap();
            for (i, p) in points.iter().enumerate() {
                let expect = sub_labels[oracle::nearest(sub.cloud.points(), *p)];
                assert_eq!(got[i], expect, "case {case} point {i}");
            }
        }
    }

    #[test]
    fn transfer_labels_checks_label_count() {
        let cloud = cloud_of(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let err = transfer_labels(&cloud, &cloud, &[0]).unwrap_err();
        assert!(matches!(err, Error::LabelCountMismatch { .. }));
    }

    #[test]
    fn covered_area_counts_distinct_pixels() {
        // Four points in two distinct 0.1 m pixels.
        let cloud = cloud_of(vec![
            [0.01, 0.01, 0.0],
            [0.05, 0.09, 5.0],
            [0.15, 0.01, -2.0],
            [0.19, 0.09, 0.0],
        ]);
        let area = covered_area(&cloud, 0.1).unwrap();
        assert!((area - 0.02).abs() < 1e-12);
    }

    #[test]
    fn covered_area_ignores_z_and_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(407);
        let points = mixed_cloud(&mut rng, 400);
        let pixel = 0.25;
        let base = covered_area(&cloud_of(points.clone()), pixel).unwrap();

        let shifted: Vec<Point> = points
            .iter()
            .map(|p| [p[0] + 3.0 * pixel, p[1] - 7.0 * pixel, p[2] + 11.3])
            .collect();
        let moved = covered_area(&cloud_of(shifted), pixel).unwrap();
        assert_eq!(base, moved);
    }

    proptest! {
        #[test]
        fn box_query_agrees_with_oracle(
            raw in proptest::collection::vec((-8i32..8, -8i32..8, -8i32..8), 1..80),
            cx in -8i32..8,
            cy in -8i32..8,
            cz in -8i32..8,
        ) {
            let points: Vec<Point> = raw
                .iter()
                .map(|&(x, y, z)| [x as f64 * 0.5, y as f64 * 0.5, z as f64 * 0.5])
                .collect();
            let index = SpatialIndex::from_points(&points).unwrap();
            let center = [cx as f64 * 0.5, cy as f64 * 0.5, cz as f64 * 0.5];
            prop_assert_eq!(
                index.box_query(center, 1.0),
                oracle::box_query(&points, center, 1.0)
            );
        }

        #[test]
        fn subsample_never_grows_and_covers_every_cell(
            raw in proptest::collection::vec((-20i32..20, -20i32..20, -20i32..20), 1..120),
        ) {
            let points: Vec<Point> = raw
                .iter()
                .map(|&(x, y, z)| [x as f64 * 0.1, y as f64 * 0.1, z as f64 * 0.1])
                .collect();
            let cloud = cloud_of(points.clone());
            let result = grid_subsample(&cloud, 0.3).unwrap();
            prop_assert!(result.cloud.len() <= cloud.len());
            let cells: HashSet<[i64; 3]> =
                points.iter().map(|p| cell_key(p, 0.3)).collect();
            prop_assert_eq!(result.cloud.len(), cells.len());
        }
    }
}
