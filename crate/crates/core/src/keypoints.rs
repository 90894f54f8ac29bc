//! Attention keypoints: per-head high-attention points, merged across heads,
//! clustered with weighted k-means, and turned into local crop boxes centred
//! on the cluster centroids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{CropBox, ASPECT_RANGE};
use crate::error::{Error, Result};
use crate::vit::AttentionMap;

/// Default cumulative attention mass kept per head.
pub const DEFAULT_MASS_FRACTION: f64 = 0.6;
/// Default number of centroids (one per local crop).
pub const DEFAULT_CENTROIDS: usize = 10;
const MAX_LLOYD_ITERS: usize = 100;

/// Indices of the smallest set of patches, taken in order of decreasing
/// attention (ties by ascending index), whose mass reaches `mass_fraction` of
/// the row total. An all-zero row yields an empty set.
pub fn threshold_head(row: &[f64], mass_fraction: f64) -> Vec<usize> {
    let total: f64 = row.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let target = mass_fraction * total;
    let mut mass = 0.0;
    let mut out = Vec::new();
    for i in order {
        out.push(i);
        mass += row[i];
        if mass >= target {
            break;
        }
    }
    out
}

/// Patch-grid points with their attention weights and source heads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HighAttentionPoints {
    pub grid: (usize, usize),
    /// `(row, col)` grid coordinates.
    pub points: Vec<(usize, usize)>,
    pub source_head: Vec<usize>,
    pub weight: Vec<f64>,
}

impl HighAttentionPoints {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// High-attention points of one head of `map`.
    pub fn from_head(map: &AttentionMap, head: usize, mass_fraction: f64) -> Self {
        let row = map.head(head);
        let cols = map.grid.1;
        let idx = threshold_head(row, mass_fraction);
        Self {
            grid: map.grid,
            points: idx.iter().map(|&i| (i / cols, i % cols)).collect(),
            source_head: vec![head; idx.len()],
            weight: idx.iter().map(|&i| row[i]).collect(),
        }
    }

    /// Unweighted points (weight 1) on `grid`, for tests and tooling.
    pub fn unweighted(grid: (usize, usize), points: Vec<(usize, usize)>) -> Self {
        let n = points.len();
        Self {
            grid,
            points,
            source_head: vec![0; n],
            weight: vec![1.0; n],
        }
    }
}

/// Multiset union of per-head point sets; duplicates across heads are kept.
pub fn merge_heads(per_head: &[HighAttentionPoints]) -> Result<HighAttentionPoints> {
    let Some(first) = per_head.first() else {
        return Ok(HighAttentionPoints::default());
    };
    let mut out = HighAttentionPoints {
        grid: first.grid,
        ..Default::default()
    };
    for set in per_head {
        if set.grid != first.grid {
            return Err(Error::Shape(format!(
                "cannot merge points on grid {:?} with grid {:?}",
                set.grid, first.grid
            )));
        }
        out.points.extend_from_slice(&set.points);
        out.source_head.extend_from_slice(&set.source_head);
        out.weight.extend_from_slice(&set.weight);
    }
    Ok(out)
}

/// Thresholds every head of `map` and merges the result.
pub fn high_attention_points(map: &AttentionMap, mass_fraction: f64) -> Result<HighAttentionPoints> {
    let per_head: Vec<_> = (0..map.num_heads())
        .map(|h| HighAttentionPoints::from_head(map, h, mass_fraction))
        .collect();
    merge_heads(&per_head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    /// Requested number of keypoints (= number of local crops).
    pub k: usize,
    /// Distinct centroids in `(row, col)` grid units; fewer than `k` when the
    /// point set had fewer distinct locations.
    pub centroids: Vec<(f64, f64)>,
    /// Centroid index of every input point.
    pub assignment: Vec<usize>,
    /// Set when `centroids.len() < k`; crops then reuse centroids round-robin.
    pub reduced: bool,
    /// Weighted within-cluster sum of squared distances.
    pub sse: f64,
}

impl KeypointSet {
    /// One centre per requested crop, cycling through the centroids.
    pub fn crop_centers(&self) -> Vec<(f64, f64)> {
        (0..self.k)
            .map(|i| self.centroids[i % self.centroids.len()])
            .collect()
    }
}

#[inline]
fn dist2(p: (usize, usize), c: (f64, f64)) -> f64 {
    let dr = p.0 as f64 - c.0;
    let dc = p.1 as f64 - c.1;
    dr * dr + dc * dc
}

/// Weighted within-cluster SSE of `points` under `assignment`.
pub fn weighted_sse(points: &HighAttentionPoints, centroids: &[(f64, f64)], assignment: &[usize]) -> f64 {
    points
        .points
        .iter()
        .zip(&points.weight)
        .zip(assignment)
        .map(|((&p, &w), &a)| w * dist2(p, centroids[a]))
        .sum()
}

fn nearest(p: (usize, usize), centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn weighted_choice<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// One weighted k-means run: k-means++ seeding, then Lloyd iterations until the
/// assignment is a fixed point (at most 100). Returns the result and the SSE
/// after every Lloyd update.
pub fn kmeans_once<R: Rng + ?Sized>(
    points: &HighAttentionPoints,
    k: usize,
    rng: &mut R,
) -> Result<(KeypointSet, Vec<f64>)> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut distinct = points.points.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let k_eff = k.min(distinct.len());

    // k-means++ over the weighted points
    let w = &points.weight;
    let mut centroids: Vec<(f64, f64)> = Vec::with_capacity(k_eff);
    let first = points.points[weighted_choice(w, rng)];
    centroids.push((first.0 as f64, first.1 as f64));
    while centroids.len() < k_eff {
        let scores: Vec<f64> = points
            .points
            .iter()
            .zip(w)
            .map(|(&p, &wt)| {
                let d = centroids.iter().map(|&c| dist2(p, c)).fold(f64::INFINITY, f64::min);
                wt * d
            })
            .collect();
        let next = points.points[weighted_choice(&scores, rng)];
        centroids.push((next.0 as f64, next.1 as f64));
    }

    let mut assignment: Vec<usize> = points.points.iter().map(|&p| nearest(p, &centroids)).collect();
    let mut trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![(0.0, 0.0, 0.0); k_eff];
        for ((&p, &wt), &a) in points.points.iter().zip(w).zip(&assignment) {
            sums[a].0 += wt * p.0 as f64;
            sums[a].1 += wt * p.1 as f64;
            sums[a].2 += wt;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0.0 {
                *c = (s.0 / s.2, s.1 / s.2);
            }
        }
        trace.push(weighted_sse(points, &centroids, &assignment));
        let next: Vec<usize> = points.points.iter().map(|&p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let sse = weighted_sse(points, &centroids, &assignment);
    Ok((
        KeypointSet {
            k,
            centroids,
            assignment,
            reduced: k_eff < k,
            sse,
        },
        trace,
    ))
}

/// Weighted k-means over grid coordinates, keeping the lowest-SSE result of
/// `restarts` independent k-means++ initializations.
pub fn cluster_keypoints<R: Rng + ?Sized>(
    points: &HighAttentionPoints,
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<KeypointSet> {
    let mut best: Option<KeypointSet> = None;
    for _ in 0..restarts.max(1) {
        let (run, _) = kmeans_once(points, k, rng)?;
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Pixel centre `(x, y)` of a grid coordinate `(row, col)`.
pub fn grid_to_pixel(rc: (f64, f64), patch_size: usize) -> (f64, f64) {
    let p = patch_size as f64;
    ((rc.1 + 0.5) * p, (rc.0 + 0.5) * p)
}

/// How local crops are shaped around keypoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointCropShape {
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for KeypointCropShape {
    fn default() -> Self {
        Self {
            scale: crate::augment::LOCAL_SCALE,
            aspect: ASPECT_RANGE,
        }
    }
}

/// One crop per requested keypoint, centred on the centroid's patch centre
/// with an area ratio drawn from `shape.scale`, shifted minimally to stay
/// inside the image.
pub fn keypoint_crop_boxes<R: Rng + ?Sized>(
    keys: &KeypointSet,
    patch_size: usize,
    shape: KeypointCropShape,
    image_size: (usize, usize),
    rng: &mut R,
) -> Vec<CropBox> {
    let area = (image_size.0 * image_size.1) as f64;
    let (log_lo, log_hi) = (shape.aspect.0.ln(), shape.aspect.1.ln());
    keys.crop_centers()
        .into_iter()
        .map(|c| {
            let s = shape.scale.0 + (shape.scale.1 - shape.scale.0) * rng.random::<f64>();
            let a = (log_lo + (log_hi - log_lo) * rng.random::<f64>()).exp();
            let (cx, cy) = grid_to_pixel(c, patch_size);
            CropBox::centered(cx, cy, (s * area * a).sqrt(), (s * area / a).sqrt(), image_size)
        })
        .collect()
}

/// Fraction of the top-`mass_fraction` attention mass of `row` that lands on
/// `coverage`, the per-patch fraction of area inside regions of interest.
pub fn top_mass_in_regions(row: &[f64], coverage: &[f64], mass_fraction: f64) -> f64 {
    let idx = threshold_head(row, mass_fraction);
    let total: f64 = idx.iter().map(|&i| row[i]).sum();
    if total <= 0.0 {
        return 0.0;
    }
    idx.iter().map(|&i| row[i] * coverage[i]).sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Matrix;

    #[test]
    fn one_hot_row_gives_single_point() {
        let mut row = vec![0.0; 12];
        row[5] = 1.0;
        assert_eq!(threshold_head(&row, 0.6), vec![5]);
    }

    #[test]
    fn uniform_row_gives_ceil_fraction() {
        let row = vec![1.0 / 12.0; 12];
        let pts = threshold_head(&row, 0.6);
        assert_eq!(pts.len(), 8);
        // ties resolve by ascending index
        assert_eq!(pts, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn zero_row_gives_empty_set() {
        assert!(threshold_head(&[0.0; 4], 0.6).is_empty());
    }

    #[test]
    fn merge_is_a_multiset_union() {
        let a = HighAttentionPoints::unweighted((4, 3), vec![(0, 0), (1, 1), (2, 2)]);
        let b = HighAttentionPoints::unweighted((4, 3), vec![(0, 0), (3, 1), (3, 2), (1, 0), (2, 0)]);
        assert_eq!(merge_heads(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(merge_heads(&[a.clone(), b.clone()]).unwrap().len(), 8);
        let c = HighAttentionPoints::unweighted((2, 2), vec![(0, 0)]);
        assert!(matches!(merge_heads(&[a, c]), Err(Error::Shape(_))));
    }

    #[test]
    fn k_distinct_points_become_the_centroids() {
        let pts = HighAttentionPoints::unweighted((8, 8), vec![(0, 0), (3, 5), (7, 1), (6, 6)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = cluster_keypoints(&pts, 4, 1, &mut rng).unwrap();
        let mut got = keys.centroids.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(0.0, 0.0), (3.0, 5.0), (6.0, 6.0), (7.0, 1.0)]);
        assert_eq!(keys.sse, 0.0);
    }

    #[test]
    fn colinear_points_split_into_two_groups() {
        let pts = HighAttentionPoints::unweighted(
            (1, 13),
            [0, 1, 2, 10, 11, 12].iter().map(|&c| (0, c)).collect(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let keys = cluster_keypoints(&pts, 2, 5, &mut rng).unwrap();
        let mut cols: Vec<f64> = keys.centroids.iter().map(|c| c.1).collect();
        cols.sort_by(f64::total_cmp);
        assert_eq!(cols, vec![1.0, 11.0]);
        assert!((keys.sse - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_reduce_k() {
        let pts = HighAttentionPoints::unweighted((4, 4), vec![(2, 2); 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys = cluster_keypoints(&pts, 3, 1, &mut rng).unwrap();
        assert!(keys.reduced);
        assert_eq!(keys.centroids.len(), 1);
        assert_eq!(keys.crop_centers(), vec![(2.0, 2.0); 3]);
    }

    #[test]
    fn empty_points_are_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = HighAttentionPoints::unweighted((4, 4), vec![]);
        assert!(matches!(cluster_keypoints(&pts, 3, 1, &mut rng), Err(Error::EmptyPointSet)));
    }

    #[test]
    fn quarter_area_crop_at_grid_centre() {
        // 512 (height) x 384 (width) image, patch 16 -> 32 x 24 grid
        let keys = KeypointSet {
            k: 1,
            centroids: vec![(15.5, 11.5)],
            assignment: vec![],
            reduced: false,
            sse: 0.0,
        };
        let shape = KeypointCropShape {
            scale: (0.25, 0.25),
            aspect: (1.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let boxes = keypoint_crop_boxes(&keys, 16, shape, (512, 384), &mut rng);
        let b = boxes[0];
        let side = (0.25f64 * 512.0 * 384.0).sqrt();
        assert!((side - 221.7).abs() < 0.05);
        assert!((b.width - side).abs() < 1e-9 && (b.height - side).abs() < 1e-9);
        assert!((b.left + b.width / 2.0 - 192.0).abs() < 1e-9);
        assert!((b.top + b.height / 2.0 - 256.0).abs() < 1e-9);
    }

    #[test]
    fn corner_keypoint_is_shifted_in_bounds() {
        let keys = KeypointSet {
            k: 10,
            centroids: vec![(0.0, 0.0)],
            assignment: vec![],
            reduced: true,
            sse: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let boxes = keypoint_crop_boxes(&keys, 16, KeypointCropShape::default(), (64, 48), &mut rng);
        assert_eq!(boxes.len(), 10);
        for b in boxes {
            assert!(b.in_bounds());
            assert!((0.05 - 1e-12..=0.25 + 1e-12).contains(&b.area_ratio()));
            assert!((0.75 - 1e-12..=4.0 / 3.0 + 1e-12).contains(&b.aspect()));
        }
    }

    #[test]
    fn points_from_attention_map_carry_weights() {
        let heads = Matrix::from_vec(2, 4, vec![0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25]);
        let map = AttentionMap { heads, grid: (2, 2) };
        let pts = high_attention_points(&map, 0.6).unwrap();
        // head 0 -> 1 point, head 1 -> 3 points
        assert_eq!(pts.len(), 4);
        assert_eq!(pts.points[0], (0, 0));
        assert_eq!(pts.source_head, vec![0, 1, 1, 1]);
        assert!(pts.weight.iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn region_mass_fraction() {
        let row = [0.5, 0.3, 0.1, 0.1];
        let cov = [1.0, 0.0, 0.5, 0.0];
        // top-0.6 set is {0, 1}
        assert!((top_mass_in_regions(&row, &cov, 0.6) - 0.5 / 0.8).abs() < 1e-12);
    }
}
