//! Modal patchifiers: image/depth patch projection with fixed 2D sine-cosine
//! positions, and the point-group encoder (shared per-point MLP + max-pool)
//! with an MLP over group centers for positions.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::PointGroup;
use crate::nn::{self, Layout};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// The three input modalities, in their canonical concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Depth,
    Pc,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Pc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Pc => "pc",
        }
    }
}

/// `3×H×W` image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Argument(format!(
                "rgb buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Argument(format!(
                "rgb value {} at {i} is outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Values are clamped to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }
}

/// `1×H×W` metric depth map. Non-positive or non-finite entries mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument(format!(
                "depth buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::full(height, width, 0.0)
    }

    pub fn full(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }
}

/// Depth rescaling applied before patchification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScaling {
    /// Clamp to `[0, d_max]` then divide by `d_max`. When false, meters are
    /// used as-is.
    pub normalize: bool,
    pub d_max: f64,
}

impl Default for DepthScaling {
    fn default() -> Self {
        Self {
            normalize: true,
            d_max: 2.0,
        }
    }
}

impl DepthScaling {
    /// Invalid depths map to 0.
    pub fn apply(&self, d: f32) -> f64 {
        let d = d as f64;
        if !d.is_finite() || d <= 0.0 {
            return 0.0;
        }
        if self.normalize {
            d.min(self.d_max) / self.d_max
        } else {
            d
        }
    }
}

/// Per-modality token sequence with its positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub tokens: Tensor<T>,
    pub pos: Tensor<T>,
    pub modality: Modality,
}

impl<T: Scalar> TokenSet<T> {
    pub fn new(tokens: Tensor<T>, pos: Tensor<T>, modality: Modality) -> Result<Self> {
        if tokens.shape() != pos.shape() {
            return Err(Error::Internal(format!(
                "tokens {:?} and positions {:?} differ in shape",
                tokens.shape(),
                pos.shape()
            )));
        }
        if tokens.rows() == 0 {
            return Err(Error::Internal("token set is empty".into()));
        }
        Ok(Self {
            tokens,
            pos,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Fixed 2D sine-cosine embedding of a `grid_h×grid_w` patch grid, one row
/// per patch in row-major order. The first `dim/2` channels encode the row
/// index, the last `dim/2` the column index, each as `[sin(p·ω), cos(p·ω)]`
/// with `ω_k = 10000^(−k/(dim/4))`.
pub fn sincos_pos_2d<T: Scalar>(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "sine-cosine embedding dim {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-(k as f64) / quarter as f64))
        .collect();
    let mut out = Tensor::zeros(grid_h * grid_w, dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = out.row_mut(r * grid_w + c);
            for (half, p) in [(0, r as f64), (1, c as f64)] {
                let base = half * dim / 2;
                for (k, w) in omega.iter().enumerate() {
                    row[base + k] = T::of((p * w).sin());
                    row[base + quarter + k] = T::of((p * w).cos());
                }
            }
        }
    }
    Ok(out)
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

fn patches_from<T: Scalar>(
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
    value: impl Fn(usize, usize, usize) -> f64,
) -> Result<Tensor<T>> {
    check_divisible(height, width, patch)?;
    let (gh, gw) = (height / patch, width / patch);
    let per = channels * patch * patch;
    let mut out = Tensor::zeros(gh * gw, per);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut i = 0;
            for c in 0..channels {
                for y in 0..patch {
                    for x in 0..patch {
                        row[i] = T::of(value(c, py * patch + y, px * patch + x));
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Raw RGB patches, `L×(3·p²)`, flattened channel, row, column.
pub fn rgb_patches<T: Scalar>(img: &RgbImage, patch: usize) -> Result<Tensor<T>> {
    patches_from(3, img.height(), img.width(), patch, |c, y, x| {
        img.get(c, y, x) as f64
    })
}

/// Raw depth patches after `scaling`, `L×p²`.
pub fn depth_patches<T: Scalar>(
    depth: &DepthMap,
    patch: usize,
    scaling: &DepthScaling,
) -> Result<Tensor<T>> {
    patches_from(1, depth.height(), depth.width(), patch, |_, y, x| {
        scaling.apply(depth.get(y, x))
    })
}

/// Writes patch rows (as produced by [`rgb_patches`]) back into an image.
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<f64>> {
    check_divisible(height, width, patch)?;
    let gw = width / patch;
    if patches.rows() != (height / patch) * gw || patches.cols() != channels * patch * patch {
        return Err(Error::Argument("patch matrix does not match the image shape".into()));
    }
    let mut out = vec![0.0; channels * height * width];
    for (l, chunk) in (0..patches.rows()).map(|l| (l, patches.row(l))) {
        let (py, px) = (l / gw, l % gw);
        let mut i = 0;
        for c in 0..channels {
            for y in 0..patch {
                for x in 0..patch {
                    out[(c * height + py * patch + y) * width + px * patch + x] = chunk[i].f64();
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Point-encoder widths: per-point MLP `3 → hidden… → dim`, center MLP `3 → dim → dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEncoderShape {
    pub hidden: Vec<usize>,
    pub dim: usize,
}

impl PointEncoderShape {
    pub fn point_dims(&self) -> Vec<usize> {
        let mut d = vec![3];
        d.extend(&self.hidden);
        d.push(self.dim);
        d
    }
}

pub fn patch_projection_layout(l: &mut Layout, prefix: &str, in_dim: usize, dim: usize) {
    l.linear(prefix, in_dim, dim);
}

pub fn point_encoder_layout(l: &mut Layout, prefix: &str, shape: &PointEncoderShape) {
    l.mlp(&format!("{prefix}.mlp"), &shape.point_dims());
    l.mlp(&format!("{prefix}.center"), &[3, shape.dim, shape.dim]);
}

/// Graph-level patch projection: `raw · W + b`.
pub fn project_patches<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    raw: Var,
) -> Var {
    nn::linear(g, p, prefix, raw)
}

/// Flattens groups into `(G·(K+1))×3` members and `G×3` centers.
pub fn group_tensors<T: Scalar>(groups: &[PointGroup]) -> Result<(Tensor<T>, Tensor<T>)> {
    let Some(first) = groups.first() else {
        return Err(Error::Argument("no point groups".into()));
    };
    let size = first.members.len();
    if let Some(i) = groups.iter().position(|g| g.members.len() != size) {
        return Err(Error::Argument(format!(
            "point group {i} has {} members, expected {size}",
            groups[i].members.len()
        )));
    }
    let members: Vec<T> = groups
        .iter()
        .flat_map(|g| g.members.iter().flat_map(|m| m.map(T::of)))
        .collect();
    let centers: Vec<T> = groups.iter().flat_map(|g| g.center.map(T::of)).collect();
    Ok((
        Tensor::from_vec(groups.len() * size, 3, members),
        Tensor::from_vec(groups.len(), 3, centers),
    ))
}

/// Graph-level point-group encoding. Returns `(tokens, pos)`, each `G×dim`.
pub fn encode_groups_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    shape: &PointEncoderShape,
    members: Var,
    centers: Var,
    group_size: usize,
) -> (Var, Var) {
    let layers = shape.hidden.len() + 1;
    let per_point = nn::mlp(g, p, &format!("{prefix}.mlp"), layers, members);
    let tokens = g.max_pool_groups(per_point, group_size);
    let pos = nn::mlp(g, p, &format!("{prefix}.center"), 2, centers);
    (tokens, pos)
}

/// Projects an image or depth map into a [`TokenSet`]: one token per patch
/// in row-major order, with sine-cosine positions (no modality embedding).
/// `raw` must come from [`rgb_patches`] or [`depth_patches`].
pub fn patchify_image<T: Scalar>(
    raw: &Tensor<T>,
    grid: (usize, usize),
    p: &ParamStore<T>,
    prefix: &str,
    modality: Modality,
) -> Result<TokenSet<T>> {
    let w = p
        .get(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::Config(format!("missing projection `{prefix}`")))?;
    if w.rows() != raw.cols() {
        return Err(Error::Config(format!(
            "projection `{prefix}` expects {} inputs, patches have {}",
            w.rows(),
            raw.cols()
        )));
    }
    if grid.0 * grid.1 != raw.rows() {
        return Err(Error::Config("patch grid does not match patch count".into()));
    }
    let mut g = Graph::frozen();
    let x = g.constant(raw.clone());
    let tokens = project_patches(&mut g, p, prefix, x);
    let pos = sincos_pos_2d(grid.0, grid.1, w.cols())?;
    TokenSet::new(g.value(tokens).clone(), pos, modality)
}

/// Encodes point groups into a [`TokenSet`] (`L = number of groups`).
pub fn encode_point_groups<T: Scalar>(
    groups: &[PointGroup],
    p: &ParamStore<T>,
    prefix: &str,
    shape: &PointEncoderShape,
) -> Result<TokenSet<T>> {
    let (members, centers) = group_tensors::<T>(groups)?;
    let size = groups[0].members.len();
    let mut g = Graph::frozen();
    let m = g.constant(members);
    let c = g.constant(centers);
    let (tokens, pos) = encode_groups_graph(&mut g, p, prefix, shape, m, c, size);
    TokenSet::new(g.value(tokens).clone(), g.value(pos).clone(), Modality::Pc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn_group, GroupNorm, PointCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_image() -> RgbImage {
        // 4x4 image, values v = (c*16 + y*4 + x) / 64
        let data = (0..48).map(|i| i as f32 / 64.0).collect();
        RgbImage::new(4, 4, data).unwrap()
    }

    #[test]
    fn patch_count_for_224_images() {
        let img = RgbImage::zeros(224, 224);
        assert_eq!(rgb_patches::<f32>(&img, 16).unwrap().rows(), 196);
        assert!(matches!(rgb_patches::<f32>(&img, 15), Err(Error::Config(_))));
    }

    #[test]
    fn identity_projection_reproduces_hand_flattened_patches() {
        let raw = rgb_patches::<f64>(&toy_image(), 2).unwrap();
        let mut p = ParamStore::new();
        let mut eye = Tensor::zeros(12, 12);
        for i in 0..12 {
            eye.set(i, i, 1.0);
        }
        p.insert("proj.weight", eye);
        p.insert("proj.bias", Tensor::zeros(1, 12));
        let ts = patchify_image(&raw, (2, 2), &p, "proj", Modality::Rgb).unwrap();
        // Patch (0,1) covers x in {2,3}, y in {0,1}.
        let v = |c: usize, y: usize, x: usize| (c * 16 + y * 4 + x) as f64 / 64.0;
        let want: Vec<f64> = (0..3)
            .flat_map(|c| [v(c, 0, 2), v(c, 0, 3), v(c, 1, 2), v(c, 1, 3)])
            .collect();
        assert_eq!(ts.tokens.row(1), want.as_slice());
        assert_eq!(ts.len(), 4);
        assert_eq!(ts.pos, sincos_pos_2d(2, 2, 12).unwrap());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let raw = rgb_patches::<f64>(&RgbImage::zeros(8, 8), 4).unwrap();
        let mut p = ParamStore::new();
        p.insert("proj.weight", Tensor::full(48, 8, 0.3));
        p.insert("proj.bias", Tensor::zeros(1, 8));
        let ts = patchify_image(&raw, (2, 2), &p, "proj", Modality::Rgb).unwrap();
        assert!(ts.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_dimension_mismatch_is_a_config_error() {
        let raw = rgb_patches::<f64>(&RgbImage::zeros(8, 8), 4).unwrap();
        let mut p = ParamStore::new();
        p.insert("proj.weight", Tensor::zeros(16, 8));
        p.insert("proj.bias", Tensor::zeros(1, 8));
        assert!(matches!(
            patchify_image(&raw, (2, 2), &p, "proj", Modality::Rgb),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unpatchify_inverts_patch_extraction() {
        let img = toy_image();
        let raw = rgb_patches::<f64>(&img, 2).unwrap();
        let back = unpatchify(&raw, 3, 4, 4, 2).unwrap();
        let want: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        assert_eq!(back, want);
    }

    #[test]
    fn depth_scaling_clamps_and_zeroes_invalid() {
        let s = DepthScaling::default();
        assert_eq!(s.apply(1.0), 0.5);
        assert_eq!(s.apply(5.0), 1.0);
        assert_eq!(s.apply(-1.0), 0.0);
        assert_eq!(s.apply(f32::NAN), 0.0);
        let raw = DepthScaling {
            normalize: false,
            d_max: 2.0,
        };
        assert_eq!(raw.apply(3.0), 3.0);
    }

    #[test]
    fn sincos_origin_and_purity() {
        let e = sincos_pos_2d::<f64>(3, 4, 8).unwrap();
        let origin = e.row(0);
        assert_eq!(&origin[0..2], &[0.0, 0.0]);
        assert_eq!(&origin[2..4], &[1.0, 1.0]);
        assert_eq!(&origin[4..6], &[0.0, 0.0]);
        assert_eq!(&origin[6..8], &[1.0, 1.0]);
        assert_eq!(e, sincos_pos_2d::<f64>(3, 4, 8).unwrap());
        assert!(matches!(sincos_pos_2d::<f64>(2, 2, 6), Err(Error::Config(_))));
    }

    #[test]
    fn sincos_matches_scalar_formula() {
        // dim = 8 → quarter = 2, ω = [1, 10000^(-1/2) = 0.01].
        let e = sincos_pos_2d::<f64>(3, 3, 8).unwrap();
        let row = e.row(3 + 2); // grid position (row 1, col 2)
        let want = [
            (1.0f64).sin(),
            (0.01f64).sin(),
            (1.0f64).cos(),
            (0.01f64).cos(),
            (2.0f64).sin(),
            (0.02f64).sin(),
            (2.0f64).cos(),
            (0.02f64).cos(),
        ];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn point_params(shape: &PointEncoderShape, seed: u64) -> ParamStore<f64> {
        let mut l = Layout::new();
        point_encoder_layout(&mut l, "pts", shape);
        l.materialize(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn two_point_group_hand_computed_max() {
        // One linear layer 3 → 2, no hidden layers.
        let shape = PointEncoderShape {
            hidden: vec![],
            dim: 2,
        };
        let mut p = point_params(&shape, 0);
        p.insert(
            "pts.mlp.0.weight",
            Tensor::from_f64(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
        );
        p.insert("pts.mlp.0.bias", Tensor::from_f64(1, 2, &[0.5, 0.0]));
        let group = PointGroup {
            center: [0.0; 3],
            members: vec![[0.2, -0.4, 0.1], [-0.3, 0.6, 0.5]],
            indices: vec![0, 1],
            scale: [1.0; 3],
        };
        let ts = encode_point_groups(&[group], &p, "pts", &shape).unwrap();
        // Point a → (0.7, -0.5), point b → (0.2, 0.1); max → (0.7, 0.1).
        assert!((ts.tokens.get(0, 0) - 0.7).abs() < 1e-15);
        assert!((ts.tokens.get(0, 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_groups_share_one_token() {
        let shape = PointEncoderShape {
            hidden: vec![8],
            dim: 4,
        };
        let p = point_params(&shape, 1);
        let g = |c: f64| PointGroup {
            center: [c, 0.0, 0.0],
            members: vec![[0.0; 3]; 4],
            indices: vec![0; 4],
            scale: [1.0; 3],
        };
        let ts = encode_point_groups(&[g(0.0), g(1.0)], &p, "pts", &shape).unwrap();
        assert_eq!(ts.tokens.row(0), ts.tokens.row(1));
        assert_ne!(ts.pos.row(0), ts.pos.row(1));
    }

    #[test]
    fn ragged_groups_are_rejected() {
        let shape = PointEncoderShape {
            hidden: vec![],
            dim: 4,
        };
        let p = point_params(&shape, 2);
        let a = PointGroup {
            center: [0.0; 3],
            members: vec![[0.0; 3]; 3],
            indices: vec![0; 3],
            scale: [1.0; 3],
        };
        let mut b = a.clone();
        b.members.pop();
        assert!(matches!(
            encode_point_groups(&[a, b], &p, "pts", &shape),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn point_tokens_ignore_member_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let groups = knn_group(&cloud, &[0, 5, 17], 7, GroupNorm::MaxNorm).unwrap();
        let shape = PointEncoderShape {
            hidden: vec![16, 16],
            dim: 8,
        };
        let p = point_params(&shape, 3);
        let base = encode_point_groups(&groups, &p, "pts", &shape).unwrap();
        for _ in 0..10 {
            let mut shuffled = groups.clone();
            for g in &mut shuffled {
                for i in (1..g.members.len()).rev() {
                    let j = rng.random_range(0..=i);
                    g.members.swap(i, j);
                }
            }
            let t = encode_point_groups(&shuffled, &p, "pts", &shape).unwrap();
            assert_eq!(t.tokens, base.tokens);
        }
    }
}
