//! Volumetric overlap and symmetric surface-distance measures for binary masks.
//!
//! The surface of a mask is the set of foreground voxel centers with at least
//! one background (or out-of-grid) face neighbor. Distances are Euclidean in
//! mm and pooled over both directions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;

/// A binary mask with per-axis spacing in mm, in `(D, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    labels: LabelVolume,
    spacing: [f64; 3],
}

impl Mask {
    pub fn new(labels: LabelVolume, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Param(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Mask { labels, spacing })
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn count(&self) -> usize {
        self.labels.count_foreground()
    }

    fn comparable(&self, other: &Mask) -> Result<()> {
        if self.labels.shape() != other.labels.shape() || self.spacing != other.spacing {
            return Err(Error::Shape(format!(
                "masks differ: {:?} @ {:?} mm vs {:?} @ {:?} mm",
                self.labels.shape(),
                self.spacing,
                other.labels.shape(),
                other.spacing
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    /// Volumetric overlap error, %.
    pub voe: f64,
    /// Signed relative volume difference against the reference, %.
    pub vd: f64,
    /// Average symmetric surface distance, mm.
    pub avgd: f64,
    /// Root-mean-square symmetric surface distance, mm.
    pub rmsd: f64,
    /// Maximum symmetric surface distance, mm.
    pub maxd: f64,
}

pub const CSV_HEADER: &str = "case_id,VOE,VD,AvgD,RMSD,MaxD";
pub const TABLE_HEADER: &str = "VOE[%] VD[%] AvgD[mm] RMSD[mm] MaxD[mm]";

impl SegMetrics {
    pub fn zero() -> Self {
        SegMetrics {
            voe: 0.0,
            vd: 0.0,
            avgd: 0.0,
            rmsd: 0.0,
            maxd: 0.0,
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.voe, self.vd, self.avgd, self.rmsd, self.maxd]
    }

    /// Space-separated row in the order of [`TABLE_HEADER`].
    pub fn table_row(&self) -> String {
        self.values().map(|v| format!("{v:.2}")).join(" ")
    }

    pub fn csv_row(&self, case_id: &str) -> String {
        let vals = self.values().map(|v| format!("{v:.2}"));
        format!("{case_id},{}", vals.join(","))
    }

    /// Per-field arithmetic mean; `None` for an empty slice.
    pub fn mean(all: &[SegMetrics]) -> Option<SegMetrics> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: fn(&SegMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(SegMetrics {
            voe: avg(|m| m.voe),
            vd: avg(|m| m.vd),
            avgd: avg(|m| m.avgd),
            rmsd: avg(|m| m.rmsd),
            maxd: avg(|m| m.maxd),
        })
    }
}

/// Renders `case_id,VOE,VD,AvgD,RMSD,MaxD` rows with two decimals.
pub fn metrics_csv(rows: &[(String, SegMetrics)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (id, m) in rows {
        out.push_str(&m.csv_row(id));
        out.push('\n');
    }
    out
}

pub fn voe(a: &Mask, reference: &Mask) -> Result<f64> {
    a.comparable(reference)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.labels.data().iter().zip(reference.labels.data()) {
        inter += usize::from(x & y);
        union += usize::from(x | y);
    }
    if union == 0 {
        return Err(Error::Param("overlap error undefined for two empty masks".into()));
    }
    Ok(100.0 * (1.0 - inter as f64 / union as f64))
}

pub fn vd(a: &Mask, reference: &Mask) -> Result<f64> {
    a.comparable(reference)?;
    let b = reference.count();
    if b == 0 {
        return Err(Error::Param("volume difference undefined for an empty reference".into()));
    }
    Ok(100.0 * (a.count() as f64 - b as f64) / b as f64)
}

/// Surface voxel centers in mm.
pub fn surface_voxels(m: &Mask) -> Result<Vec<[f64; 3]>> {
    let [d, h, w] = m.labels.shape();
    let data = m.labels.data();
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x] == 1;
    let mut pts = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d
                    && y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && at(z - 1, y, x)
                    && at(z + 1, y, x)
                    && at(z, y - 1, x)
                    && at(z, y + 1, x)
                    && at(z, y, x - 1)
                    && at(z, y, x + 1);
                if !interior {
                    pts.push([
                        z as f64 * m.spacing[0],
                        y as f64 * m.spacing[1],
                        x as f64 * m.spacing[2],
                    ]);
                }
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::Param("surface undefined for an empty mask".into()));
    }
    Ok(pts)
}

/// `(AvgD, RMSD, MaxD)` over the pooled nearest-surface distances in both directions.
pub fn surface_distances(a: &Mask, reference: &Mask) -> Result<(f64, f64, f64)> {
    a.comparable(reference)?;
    let sa = surface_voxels(a)?;
    let sb = surface_voxels(reference)?;
    let ta = KdTree::new(sa.clone());
    let tb = KdTree::new(sb.clone());
    let mut pooled: Vec<f64> = sa.par_iter().map(|p| tb.nearest_sq(p)).collect();
    pooled.par_extend(sb.par_iter().map(|q| ta.nearest_sq(q)));
    // A fixed summation order makes the result exactly symmetric in its arguments.
    pooled.sort_by(f64::total_cmp);
    Ok(summarize(&pooled))
}

/// Mean, root-mean-square and max of distances given as squares.
fn summarize(squared: &[f64]) -> (f64, f64, f64) {
    let n = squared.len() as f64;
    let mean = squared.iter().map(|s| s.sqrt()).sum::<f64>() / n;
    let rms = (squared.iter().sum::<f64>() / n).sqrt();
    let max = squared.iter().fold(0.0f64, |m, &s| m.max(s)).sqrt();
    (mean, rms, max)
}

pub fn evaluate(a: &Mask, reference: &Mask) -> Result<SegMetrics> {
    let (avgd, rmsd, maxd) = surface_distances(a, reference)?;
    Ok(SegMetrics {
        voe: voe(a, reference)?,
        vd: vd(a, reference)?,
        avgd,
        rmsd,
        maxd,
    })
}

/// Static 3-d tree for nearest-neighbor queries.
struct KdTree {
    points: Vec<[f64; 3]>,
}

impl KdTree {
    fn new(mut points: Vec<[f64; 3]>) -> Self {
        build(&mut points, 0);
        KdTree { points }
    }

    fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, &mut best);
        best
    }
}

fn build(pts: &mut [[f64; 3]], depth: usize) {
    if pts.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (left, right) = pts.split_at_mut(mid);
    build(left, depth + 1);
    build(&mut right[1..], depth + 1);
}

fn search(pts: &[[f64; 3]], depth: usize, q: &[f64; 3], best: &mut f64) {
    if pts.is_empty() {
        return;
    }
    let mid = pts.len() / 2;
    let p = &pts[mid];
    let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
    if d2 < *best {
        *best = d2;
    }
    let axis = depth % 3;
    let diff = q[axis] - p[axis];
    let (near, far) = if diff < 0.0 {
        (&pts[..mid], &pts[mid + 1..])
    } else {
        (&pts[mid + 1..], &pts[..mid])
    };
    search(near, depth + 1, q, best);
    if diff * diff < *best {
        search(far, depth + 1, q, best);
    }
}
