//! Point-cloud kernels: pinhole unprojection, farthest point sampling and
//! KNN grouping.
//!
//! Everything here is a pure function of its inputs and runs in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::DepthMap;

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Intrinsics for a `width×height` image with the given horizontal field
    /// of view and the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Camera-frame point for pixel `(u, v)` at depth `d`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        [(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d]
    }

    /// Pixel coordinates and depth of a camera-frame point.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
            p[2],
        )
    }
}

/// Non-empty set of finite 3D points, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("point cloud has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Argument(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud at the given indices.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(idx.iter().map(|&i| self.points[i]).collect())
    }
}

/// How a KNN group is rescaled after centering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GroupNorm {
    /// Divide by the largest member norm, so the farthest member lies on the unit sphere.
    #[default]
    MaxNorm,
    /// Divide each axis by its standard deviation over the group.
    AxisStd,
}

/// A point group: its center and `K+1` center-relative, normalized members.
/// `members[0]` is the center itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGroup {
    pub center: [f64; 3],
    pub members: Vec<[f64; 3]>,
    /// Cloud indices of the members, center first.
    pub indices: Vec<usize>,
    /// Per-axis scale that was divided out of the centered members.
    pub scale: [f64; 3],
}

impl PointGroup {
    /// Members mapped back to absolute coordinates.
    pub fn denormalize(&self, members: &[[f64; 3]]) -> Vec<[f64; 3]> {
        members
            .iter()
            .map(|m| std::array::from_fn(|a| m[a] * self.scale[a] + self.center[a]))
            .collect()
    }
}

#[inline]
pub fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Unprojects every `stride`-th pixel (in both axes) with a valid depth.
/// Depths that are non-positive or non-finite are skipped.
pub fn unproject_depth(
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    stride: usize,
) -> Result<PointCloud> {
    intr.validate()?;
    if depth.width() != intr.width || depth.height() != intr.height {
        return Err(Error::Config(format!(
            "depth map is {}x{} but intrinsics describe {}x{}",
            depth.width(),
            depth.height(),
            intr.width,
            intr.height
        )));
    }
    if stride == 0 {
        return Err(Error::Config("unprojection stride must be at least 1".into()));
    }
    let mut points = Vec::new();
    for v in (0..depth.height()).step_by(stride) {
        for u in (0..depth.width()).step_by(stride) {
            let d = depth.get(v, u) as f64;
            if d.is_finite() && d > 0.0 {
                points.push(intr.unproject(u as f64, v as f64, d));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud("no valid depth pixels".into()));
    }
    PointCloud::new(points)
}

/// Greedy farthest point sampling starting at `start`. Each step picks the
/// unselected point whose squared distance to the selected set is largest,
/// with ties going to the smallest index.
pub fn farthest_point_sampling(cloud: &PointCloud, n: usize, start: usize) -> Result<Vec<usize>> {
    let m = cloud.len();
    if n == 0 || n > m {
        return Err(Error::Argument(format!(
            "cannot sample {n} points from a cloud of {m}"
        )));
    }
    if start >= m {
        return Err(Error::Argument(format!(
            "start index {start} out of range for {m} points"
        )));
    }
    let pts = cloud.points();
    let mut min_d = vec![f64::INFINITY; m];
    let mut taken = vec![false; m];
    let mut out = Vec::with_capacity(n);
    let mut last = start;
    out.push(start);
    taken[start] = true;
    while out.len() < n {
        let anchor = pts[last];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist_sq(p, &anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        out.push(best);
        taken[best] = true;
        last = best;
    }
    Ok(out)
}

/// Uniform random FPS start index.
pub fn random_start<R: Rng>(cloud: &PointCloud, rng: &mut R) -> usize {
    rng.random_range(0..cloud.len())
}

/// Groups each center with its `k` nearest other points (ties to the smallest
/// index), centers the members and rescales them according to `norm`.
pub fn knn_group(
    cloud: &PointCloud,
    centers: &[usize],
    k: usize,
    norm: GroupNorm,
) -> Result<Vec<PointGroup>> {
    let m = cloud.len();
    if k + 1 > m {
        return Err(Error::Argument(format!(
            "groups of {} points need a cloud of at least that size, got {m}",
            k + 1
        )));
    }
    let pts = cloud.points();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(m);
    centers
        .iter()
        .map(|&c| {
            if c >= m {
                return Err(Error::Argument(format!("center index {c} out of range")));
            }
            let center = pts[c];
            order.clear();
            order.extend(
                pts.iter()
                    .enumerate()
                    .filter(|&(i, _)| i != c)
                    .map(|(i, p)| (dist_sq(p, &center), i)),
            );
            let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < order.len() {
                order.select_nth_unstable_by(k, by_key);
                order.truncate(k);
            }
            order.sort_unstable_by(by_key);

            let mut indices = Vec::with_capacity(k + 1);
            indices.push(c);
            indices.extend(order.iter().map(|&(_, i)| i));
            let centered: Vec<[f64; 3]> = indices
                .iter()
                .map(|&i| std::array::from_fn(|a| pts[i][a] - center[a]))
                .collect();
            let scale = group_scale(&centered, norm);
            let members = centered
                .iter()
                .map(|p| std::array::from_fn(|a| p[a] / scale[a]))
                .collect();
            Ok(PointGroup {
                center,
                members,
                indices,
                scale,
            })
        })
        .collect()
}

/// Scale that `norm` divides out of already-centered members; any zero
/// scale is replaced by 1.
pub fn group_scale(centered: &[[f64; 3]], norm: GroupNorm) -> [f64; 3] {
    let fix = |s: f64| if s > 0.0 && s.is_finite() { s } else { 1.0 };
    match norm {
        GroupNorm::MaxNorm => {
            let max = centered
                .iter()
                .map(|p| dist_sq(p, &[0.0; 3]).sqrt())
                .fold(0.0, f64::max);
            [fix(max); 3]
        }
        GroupNorm::AxisStd => {
            let n = centered.len() as f64;
            std::array::from_fn(|a| {
                let mean = centered.iter().map(|p| p[a]).sum::<f64>() / n;
                let var = centered.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / n;
                fix(var.sqrt())
            })
        }
    }
}
