//! Evaluation criteria: Dice, average surface distance, symmetric Hausdorff
//! distance, the combined ranking score, and Rand merge/split/F scores over
//! segment partitions.
//!
//! Convention notes, fixed so numbers are reproducible:
//! - boundary extraction and connected components use 6-connectivity;
//! - ADB is the mean of the two directed average surface distances;
//! - a vanished class surfaces as an `EmptySurface` error, never a silent 0.

use thiserror::Error;

use crate::volume::{voxel_count, Dims, LabelVolume, Spacing};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims, Dims),
    #[error("spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch(Spacing, Spacing),
    #[error("empty surface for class {class} in {which}")]
    EmptySurface { class: u8, which: &'static str },
}

fn check_pair(pred_dims: Dims, gt_dims: Dims) -> Result<(), MetricsError> {
    if pred_dims != gt_dims {
        return Err(MetricsError::DimsMismatch(pred_dims, gt_dims));
    }
    Ok(())
}

/// Dice coefficient 2|A∩B| / (|A|+|B|) for one class; 1 when both masks are
/// empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64, MetricsError> {
    check_pair(pred.dims(), gt.dims())?;
    let mut a = 0u64;
    let mut b = 0u64;
    let mut both = 0u64;
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        let ia = *p == class;
        let ib = *g == class;
        a += ia as u64;
        b += ib as u64;
        both += (ia && ib) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Boundary voxels of one class, as physical coordinates in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSet {
    pub points: Vec<[f64; 3]>,
}

/// A voxel is boundary iff it belongs to the class and has a 6-neighbor
/// outside the class or lies on the volume border.
pub fn extract_surface(l: &LabelVolume, class: u8) -> SurfaceSet {
    let (nx, ny, nz) = l.dims();
    let (sx, sy, sz) = l.spacing();
    let labels = l.labels();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut points = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels[idx(x, y, z)] != class {
                    continue;
                }
                let on_border =
                    x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
                let exposed = on_border
                    || labels[idx(x - 1, y, z)] != class
                    || labels[idx(x + 1, y, z)] != class
                    || labels[idx(x, y - 1, z)] != class
                    || labels[idx(x, y + 1, z)] != class
                    || labels[idx(x, y, z - 1)] != class
                    || labels[idx(x, y, z + 1)] != class;
                if exposed {
                    points.push([x as f64 * sx, y as f64 * sy, z as f64 * sz]);
                }
            }
        }
    }
    SurfaceSet { points }
}

/// Uniform spatial grid over a point set for exact nearest-neighbor queries.
struct PointGrid {
    cell: f64,
    origin: [f64; 3],
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
    points: Vec<[f64; 3]>,
}

impl PointGrid {
    fn build(points: &[[f64; 3]], cell: f64) -> PointGrid {
        debug_assert!(!points.is_empty() && cell > 0.0);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let mut dims = [0usize; 3];
        for k in 0..3 {
            dims[k] = ((hi[k] - lo[k]) / cell).floor() as usize + 1;
        }
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, p) in points.iter().enumerate() {
            let c = Self::cell_of(p, lo, cell, dims);
            buckets[c[0] + dims[0] * (c[1] + dims[1] * c[2])].push(i as u32);
        }
        PointGrid {
            cell,
            origin: lo,
            dims,
            buckets,
            points: points.to_vec(),
        }
    }

    fn cell_of(p: &[f64; 3], origin: [f64; 3], cell: f64, dims: [usize; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let v = ((p[k] - origin[k]) / cell).floor();
            c[k] = (v.max(0.0) as usize).min(dims[k] - 1);
        }
        c
    }

    /// Exact squared distance to the nearest stored point. Scans cells in
    /// expanding Chebyshev shells; a shell at radius r cannot contain a point
    /// closer than (r-1)*cell to a query inside the grid cell, which bounds
    /// the scan.
    fn nearest_dist2(&self, q: &[f64; 3]) -> f64 {
        let c = Self::cell_of(q, self.origin, self.cell, self.dims);
        let qc = [c[0] as i64, c[1] as i64, c[2] as i64];
        let max_shell = self.dims.iter().max().copied().unwrap_or(1) as i64 + 1;
        let mut best = f64::INFINITY;
        for r in 0..=max_shell {
            if best.is_finite() && ((r - 1).max(0) as f64 * self.cell).powi(2) > best {
                break;
            }
            let scan = |cx: i64, cy: i64, cz: i64, best: &mut f64| {
                if cx < 0
                    || cy < 0
                    || cz < 0
                    || cx >= self.dims[0] as i64
                    || cy >= self.dims[1] as i64
                    || cz >= self.dims[2] as i64
                {
                    return;
                }
                let b = &self.buckets
                    [cx as usize + self.dims[0] * (cy as usize + self.dims[1] * cz as usize)];
                for &i in b {
                    let p = &self.points[i as usize];
                    let d2 = (p[0] - q[0]) * (p[0] - q[0])
                        + (p[1] - q[1]) * (p[1] - q[1])
                        + (p[2] - q[2]) * (p[2] - q[2]);
                    if d2 < *best {
                        *best = d2;
                    }
                }
            };
            // all cells with Chebyshev distance exactly r from the query cell
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        scan(qc[0] + dx, qc[1] + dy, qc[2] + dz, &mut best);
                    }
                }
            }
        }
        best
    }
}

/// Directed distances from every point of `from` to its nearest neighbor in
/// `to`; returns (mean, max).
fn directed_distances(from: &SurfaceSet, to: &SurfaceSet, cell: f64) -> (f64, f64) {
    let grid = PointGrid::build(&to.points, cell);
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for p in &from.points {
        let d = grid.nearest_dist2(p).sqrt();
        sum += d;
        max = max.max(d);
    }
    (sum / from.points.len() as f64, max)
}

/// ADB and symmetric Hausdorff for one class, in millimetres.
pub fn surface_distances(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class: u8,
) -> Result<(f64, f64), MetricsError> {
    check_pair(pred.dims(), gt.dims())?;
    if pred.spacing() != gt.spacing() {
        return Err(MetricsError::SpacingMismatch(pred.spacing(), gt.spacing()));
    }
    let sp = extract_surface(pred, class);
    let sg = extract_surface(gt, class);
    if sp.points.is_empty() {
        return Err(MetricsError::EmptySurface {
            class,
            which: "prediction",
        });
    }
    if sg.points.is_empty() {
        return Err(MetricsError::EmptySurface {
            class,
            which: "ground truth",
        });
    }
    let (sx, sy, sz) = gt.spacing();
    let cell = 2.0 * sx.max(sy).max(sz);
    let (mean_pg, max_pg) = directed_distances(&sp, &sg, cell);
    let (mean_gp, max_gp) = directed_distances(&sg, &sp, cell);
    Ok(((mean_pg + mean_gp) / 2.0, max_pg.max(max_gp)))
}

/// Average symmetric surface distance in millimetres.
pub fn adb(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64, MetricsError> {
    surface_distances(pred, gt, class).map(|(a, _)| a)
}

/// Symmetric Hausdorff distance in millimetres.
pub fn hausdorff(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64, MetricsError> {
    surface_distances(pred, gt, class).map(|(_, h)| h)
}

/// Per-class evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub adb_mm: f64,
    pub hausdorff_mm: f64,
}

/// Rand merge/split scores and their harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandScores {
    pub merge: f64,
    pub split: f64,
    pub fscore: f64,
}

/// Full per-item report over the foreground classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub rand: Option<RandScores>,
}

/// Evaluates every foreground class (1..C) of `gt` against `pred`.
pub fn evaluate_labels(
    pred: &LabelVolume,
    gt: &LabelVolume,
    with_rand: bool,
) -> Result<MetricsReport, MetricsError> {
    check_pair(pred.dims(), gt.dims())?;
    let classes = gt.num_classes().max(pred.num_classes());
    let mut per_class = Vec::new();
    for class in 1..classes {
        let class = class as u8;
        let d = dice(pred, gt, class)?;
        let (a, h) = surface_distances(pred, gt, class)?;
        per_class.push(ClassMetrics {
            class,
            dice: d,
            adb_mm: a,
            hausdorff_mm: h,
        });
    }
    let rand = if with_rand {
        let pp = connected_components(pred, true);
        let gp = connected_components(gt, true);
        Some(rand_fscore(&pp, &gp, true)?)
    } else {
        None
    };
    Ok(MetricsReport { per_class, rand })
}

/// The ranking score over foreground classes:
/// S = sum over classes of (Dice/2 - ADB/4 - Hausdorff/30).
pub fn overall_score(per_class: &[ClassMetrics]) -> f64 {
    per_class
        .iter()
        .map(|m| 0.5 * m.dice - 0.25 * m.adb_mm - m.hausdorff_mm / 30.0)
        .sum()
}

/// A segment partition of a voxel grid; id 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub dims: Dims,
    pub ids: Vec<u32>,
}

/// 6-connected components of the non-background classes (or of all classes
/// when `exclude_background` is false). Component ids start at 1; background
/// voxels keep id 0 when excluded.
pub fn connected_components(l: &LabelVolume, exclude_background: bool) -> Partition {
    let (nx, ny, nz) = l.dims();
    let labels = l.labels();
    let n = voxel_count(l.dims());
    let mut ids = vec![0u32; n];
    let mut next = 1u32;
    let mut stack = Vec::new();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    for start in 0..n {
        if ids[start] != 0 {
            continue;
        }
        let lab = labels[start];
        if exclude_background && lab == 0 {
            continue;
        }
        let id = next;
        next += 1;
        ids[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            let mut visit = |j: usize| {
                if ids[j] == 0 && labels[j] == lab {
                    ids[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(idx(x - 1, y, z));
            }
            if x + 1 < nx {
                visit(idx(x + 1, y, z));
            }
            if y > 0 {
                visit(idx(x, y - 1, z));
            }
            if y + 1 < ny {
                visit(idx(x, y + 1, z));
            }
            if z > 0 {
                visit(idx(x, y, z - 1));
            }
            if z + 1 < nz {
                visit(idx(x, y, z + 1));
            }
        }
    }
    Partition { dims: l.dims(), ids }
}

/// Rand merge/split/F scores from the contingency counts between two
/// partitions. With `exclude_background`, voxels whose ground-truth id is 0
/// are dropped from the counting; prediction id 0 inside the kept set counts
/// as an ordinary segment.
pub fn rand_fscore(
    pred: &Partition,
    gt: &Partition,
    exclude_background: bool,
) -> Result<RandScores, MetricsError> {
    check_pair(pred.dims, gt.dims)?;
    use std::collections::HashMap;
    let mut n_ij: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pred_sizes: HashMap<u32, u64> = HashMap::new();
    let mut gt_sizes: HashMap<u32, u64> = HashMap::new();
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        if exclude_background && g == 0 {
            continue;
        }
        *n_ij.entry((p, g)).or_default() += 1;
        *pred_sizes.entry(p).or_default() += 1;
        *gt_sizes.entry(g).or_default() += 1;
    }
    let sum_sq: f64 = n_ij.values().map(|&c| (c * c) as f64).sum();
    let sum_pred_sq: f64 = pred_sizes.values().map(|&c| (c * c) as f64).sum();
    let sum_gt_sq: f64 = gt_sizes.values().map(|&c| (c * c) as f64).sum();
    let split = sum_sq / sum_gt_sq;
    let merge = sum_sq / sum_pred_sq;
    let fscore = 2.0 * split * merge / (split + merge);
    Ok(RandScores {
        merge,
        split,
        fscore,
    })
}
