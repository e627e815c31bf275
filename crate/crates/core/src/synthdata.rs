//! Procedural RGB-D tabletop scenes.
//!
//! A scene is a table plane with spheres and axis-aligned boxes on it,
//! viewed by a pinhole camera. Every pixel casts one ray; depth is the
//! optical-axis distance to the nearest hit, color is albedo times a
//! Lambertian term, and the point cloud is the unprojected depth map reduced
//! by farthest point sampling.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, unproject_depth, CameraIntrinsics, PointCloud};
use crate::tokenizer::{DepthMap, RgbImage};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectKind {
    Sphere { radius: f64 },
    /// Axis-aligned box (world axes).
    Cuboid { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

/// Infinite plane `{x : normal·x = offset}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
    pub albedo: [f64; 3],
}

impl Plane {
    /// Horizontal table top at world height `height` (world z is up).
    pub fn table(height: f64, albedo: [f64; 3]) -> Self {
        Self {
            normal: [0.0, 0.0, 1.0],
            offset: height,
            albedo,
        }
    }
}

/// Camera placement: world position and camera-to-world rotation whose
/// columns are the world directions of the camera's x (right), y (down)
/// and z (forward) axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

impl CameraPose {
    /// Camera at `position` looking along yaw `yaw_deg` (about world z) and
    /// pitched down by `pitch_deg`.
    pub fn looking(position: [f64; 3], yaw_deg: f64, pitch_deg: f64) -> Self {
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let forward = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin());
        // Right is horizontal; for a straight-down camera it follows yaw.
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        Self {
            position,
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
        }
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    /// World coordinates of a camera-frame point.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let w = self.matrix() * Vector3::from(p) + Vector3::from(self.position);
        [w.x, w.y, w.z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub plane: Option<Plane>,
    pub camera: CameraPose,
    pub intr: CameraIntrinsics,
    /// Unit vector pointing towards the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    /// Hits farther than this are treated as sensor dropouts (depth 0).
    pub d_max: f64,
    /// Point-cloud size after farthest point sampling.
    pub cloud_points: usize,
}

/// Parameters for random scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub hfov_deg: f64,
    pub max_objects: usize,
    pub d_max: f64,
    pub cloud_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            hfov_deg: 55.0,
            max_objects: 4,
            d_max: 2.0,
            cloud_points: 8192,
        }
    }
}

/// One synchronized observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub cloud: PointCloud,
    pub intr: CameraIntrinsics,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

impl SceneSpec {
    /// Random tabletop scene: a camera 0.5–0.75 m above the table pitched
    /// 60–75° down, and 1..=`max_objects` objects resting on the table
    /// inside the central part of the view.
    pub fn random(seed: u64, cfg: &SceneConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intr = CameraIntrinsics::from_fov(cfg.width, cfg.height, cfg.hfov_deg)?;
        let camera = CameraPose::looking(
            [0.0, 0.0, rng.random_range(0.5..0.75)],
            rng.random_range(-180.0..180.0),
            rng.random_range(60.0..75.0),
        );
        let table = Plane::table(0.0, random_color(&mut rng, 0.3, 0.7));
        let count = rng.random_range(1..=cfg.max_objects.max(1));
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let u = rng.random_range(0.2..0.8) * (cfg.width - 1) as f64;
            let v = rng.random_range(0.3..0.8) * (cfg.height - 1) as f64;
            let dir = camera.matrix() * Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
            let origin = v3(camera.position);
            let t = (table.offset - origin.z) / dir.z;
            let ground = origin + dir * t;
            let albedo = random_color(&mut rng, 0.2, 1.0);
            let obj = if rng.random_bool(0.5) {
                let radius = rng.random_range(0.03..0.08);
                SceneObject {
                    kind: ObjectKind::Sphere { radius },
                    center: [ground.x, ground.y, radius],
                    albedo,
                }
            } else {
                let half: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.025..0.06));
                SceneObject {
                    kind: ObjectKind::Cuboid { half_extents: half },
                    center: [ground.x, ground.y, half[2]],
                    albedo,
                }
            };
            objects.push(obj);
        }
        let light = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            1.0,
        )
        .normalize();
        Ok(Self {
            seed,
            objects,
            plane: Some(table),
            camera,
            intr,
            light_dir: [light.x, light.y, light.z],
            ambient: 0.25,
            d_max: cfg.d_max,
            cloud_points: cfg.cloud_points,
        })
    }

    /// Nearest hit along `origin + t·dir` with `t > 0`: `(t, unit normal, albedo)`.
    fn trace(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<(f64, Vector3<f64>, [f64; 3])> {
        let mut best: Option<(f64, Vector3<f64>, [f64; 3])> = None;
        let mut consider = |t: f64, n: Vector3<f64>, albedo: [f64; 3]| {
            if t > HIT_EPS && best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, n, albedo));
            }
        };
        if let Some(pl) = &self.plane {
            let n = v3(pl.normal);
            let denom = n.dot(&dir);
            if denom.abs() > 1e-12 {
                consider((pl.offset - n.dot(&origin)) / denom, n, pl.albedo);
            }
        }
        for obj in &self.objects {
            let c = v3(obj.center);
            match obj.kind {
                ObjectKind::Sphere { radius } => {
                    let oc = origin - c;
                    let a = dir.dot(&dir);
                    let b = dir.dot(&oc);
                    let cc = oc.dot(&oc) - radius * radius;
                    let disc = b * b - a * cc;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            if t > HIT_EPS {
                                let p = origin + dir * t;
                                consider(t, (p - c) / radius, obj.albedo);
                                break;
                            }
                        }
                    }
                }
                ObjectKind::Cuboid { half_extents } => {
                    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                    let mut axis = 0;
                    let mut hit = true;
                    for a in 0..3 {
                        let (lo, hi) = (c[a] - half_extents[a], c[a] + half_extents[a]);
                        if dir[a].abs() < 1e-15 {
                            if origin[a] < lo || origin[a] > hi {
                                hit = false;
                            }
                            continue;
                        }
                        let (mut t0, mut t1) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                        if t0 > t1 {
                            std::mem::swap(&mut t0, &mut t1);
                        }
                        if t0 > t_near {
                            t_near = t0;
                            axis = a;
                        }
                        t_far = t_far.min(t1);
                    }
                    if hit && t_near <= t_far && t_near > HIT_EPS {
                        let mut n = Vector3::zeros();
                        n[axis] = -dir[axis].signum();
                        consider(t_near, n, obj.albedo);
                    }
                }
            }
        }
        best
    }

    /// Smallest absolute signed distance from `p` (world) to any surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let p = v3(p);
        let mut best = f64::INFINITY;
        if let Some(pl) = &self.plane {
            best = best.min((v3(pl.normal).dot(&p) - pl.offset).abs());
        }
        for obj in &self.objects {
            let c = v3(obj.center);
            let d = match obj.kind {
                ObjectKind::Sphere { radius } => ((p - c).norm() - radius).abs(),
                ObjectKind::Cuboid { half_extents } => {
                    let q = (p - c).abs() - v3(half_extents);
                    let outside = q.map(|v| v.max(0.0)).norm();
                    let inside = q.x.max(q.y).max(q.z).min(0.0);
                    (outside + inside).abs()
                }
            };
            best = best.min(d);
        }
        best
    }
}

/// Camera-frame point cloud derived from a depth map: every valid pixel
/// unprojected, reduced to `points` by FPS from index 0 (or kept whole if
/// fewer), and rounded to `f32` precision.
pub fn cloud_from_depth(depth: &DepthMap, intr: &CameraIntrinsics, points: usize) -> Result<PointCloud> {
    let full = unproject_depth(depth, intr, 1)?;
    let n = points.min(full.len());
    let idx = farthest_point_sampling(&full, n, 0)?;
    PointCloud::new(
        idx.iter()
            .map(|&i| full.points()[i].map(|c| c as f32 as f64))
            .collect(),
    )
}

/// Renders one sample.
pub fn render(spec: &SceneSpec, id: u64) -> Result<Sample> {
    spec.intr.validate()?;
    let (w, h) = (spec.intr.width, spec.intr.height);
    let rot = spec.camera.matrix();
    let origin = v3(spec.camera.position);
    let light = v3(spec.light_dir).normalize();
    let mut rgb = RgbImage::zeros(h, w);
    let mut depth = DepthMap::zeros(h, w);
    let mut hits = 0usize;
    for v in 0..h {
        for u in 0..w {
            let dc = Vector3::new(
                (u as f64 - spec.intr.cx) / spec.intr.fx,
                (v as f64 - spec.intr.cy) / spec.intr.fy,
                1.0,
            );
            // Unnormalized direction: the ray parameter equals optical-axis depth.
            let dir = rot * dc;
            let Some((t, mut n, albedo)) = spec.trace(origin, dir) else { continue };
            if t > spec.d_max {
                continue;
            }
            if n.dot(&dir) > 0.0 {
                n = -n;
            }
            let shade = spec.ambient + (1.0 - spec.ambient) * n.dot(&light).max(0.0);
            for (c, a) in albedo.iter().enumerate() {
                rgb.set(c, v, u, (a * shade) as f32);
            }
            depth.set(v, u, t as f32);
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(Error::Generation(format!(
            "scene {} has no geometry within {} m of the camera",
            spec.seed, spec.d_max
        )));
    }
    let cloud = cloud_from_depth(&depth, &spec.intr, spec.cloud_points)?;
    Ok(Sample {
        id,
        rgb,
        depth,
        cloud,
        intr: spec.intr,
    })
}

/// Renders `count` random scenes; sample `i` uses scene seed `seed + i`.
pub fn generate(count: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| render(&SceneSpec::random(seed.wrapping_add(i), cfg)?, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frontal(objects: Vec<SceneObject>, plane_depth: Option<f64>) -> SceneSpec {
        // Camera at the world origin looking straight down (−z).
        let camera = CameraPose::looking([0.0, 0.0, 0.0], 0.0, 90.0);
        SceneSpec {
            seed: 0,
            objects,
            plane: plane_depth.map(|z| Plane::table(-z, [0.5; 3])),
            camera,
            intr: CameraIntrinsics::new(20.0, 20.0, 7.0, 5.0, 16, 12).unwrap(),
            light_dir: [0.0, 0.0, 1.0],
            ambient: 0.2,
            d_max: 10.0,
            cloud_points: 64,
        }
    }

    #[test]
    fn frontal_plane_has_constant_depth() {
        let s = render(&frontal(vec![], Some(1.25)), 0).unwrap();
        assert!(s.depth.data().iter().all(|&d| d == 1.25));
        assert_eq!(s.cloud.len(), 64);
    }

    #[test]
    fn sphere_on_axis_depth_is_distance_minus_radius() {
        let sphere = SceneObject {
            kind: ObjectKind::Sphere { radius: 0.2 },
            center: [0.0, 0.0, -1.5],
            albedo: [1.0, 0.0, 0.0],
        };
        let s = render(&frontal(vec![sphere], Some(3.0)), 0).unwrap();
        assert!((s.depth.get(5, 7) as f64 - 1.3).abs() < 1e-6);
        // Straight-on normal faces the light fully.
        assert!((s.rgb.get(0, 5, 7) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn box_occludes_plane() {
        let cube = SceneObject {
            kind: ObjectKind::Cuboid {
                half_extents: [0.1, 0.1, 0.1],
            },
            center: [0.0, 0.0, -1.0],
            albedo: [0.0, 1.0, 0.0],
        };
        let s = render(&frontal(vec![cube], Some(2.0)), 0).unwrap();
        assert!((s.depth.get(5, 7) as f64 - 0.9).abs() < 1e-6);
        assert_eq!(s.depth.get(0, 0), 2.0);
    }

    #[test]
    fn empty_view_is_a_generation_error() {
        assert!(matches!(
            render(&frontal(vec![], None), 0),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn camera_axes_are_orthonormal() {
        let pose = CameraPose::looking([0.0; 3], 37.0, 64.0);
        let m = pose.matrix();
        assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-12);
        assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_scenes_fill_the_view() {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            cloud_points: 256,
            ..SceneConfig::default()
        };
        let spec = SceneSpec::random(3, &cfg).unwrap();
        let s = render(&spec, 0).unwrap();
        assert!(s.depth.data().iter().all(|&d| d > 0.0 && d <= 2.0));
        assert_eq!(s.cloud.len(), 256);
        assert_eq!(s, render(&SceneSpec::random(3, &cfg).unwrap(), 0).unwrap());
    }
}
