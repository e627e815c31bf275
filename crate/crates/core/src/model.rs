//! The full masked autoencoder: tokenizers, encoder, decoder and loss wired
//! into one forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{self, DecoderConfig, Reconstruction, ReconstructionVars};
use crate::encoder::{self, EncoderConfig, JointRepresentation};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, knn_group, GroupNorm, PointCloud};
use crate::losses::{mae_loss_graph, normalize_rows, LossBreakdown, TargetNorm};
use crate::masking::MaskPlan;
use crate::nn::Layout;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{
    self, depth_patches, encode_groups_graph, group_tensors, patch_projection_layout,
    point_encoder_layout, rgb_patches, DepthMap, DepthScaling, Modality, PointEncoderShape,
    RgbImage,
};

pub const RGB_PREFIX: &str = "patch.rgb";
pub const DEPTH_PREFIX: &str = "patch.depth";
pub const POINTS_PREFIX: &str = "points";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    /// Number of point groups (FPS centers).
    pub groups: usize,
    /// Neighbors per group; each group holds `k + 1` points.
    pub k: usize,
    pub group_norm: GroupNorm,
    pub point_hidden: Vec<usize>,
    pub depth: DepthScaling,
    /// Draw the FPS start index from the training RNG instead of using 0.
    pub fps_random_start: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            patch: 16,
            groups: 196,
            k: 31,
            group_norm: GroupNorm::MaxNorm,
            point_hidden: vec![64, 128],
            depth: DepthScaling::default(),
            fps_random_start: false,
        }
    }
}

impl TokenizerConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    /// Tokens per modality (rgb, depth, pc).
    pub fn sizes(&self) -> [usize; 3] {
        let (h, w) = self.grid();
        [h * w, h * w, self.groups]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config("points.groups must be at least 1".into()));
        }
        if self.depth.normalize && self.depth.d_max <= 0.0 {
            return Err(Error::Config("depth.d_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub target_norm: TargetNorm,
}

impl ModelConfig {
    /// Head output widths (rgb, depth, pc).
    pub fn out_dims(&self) -> [usize; 3] {
        let p2 = self.tokenizer.patch * self.tokenizer.patch;
        [3 * p2, p2, 3 * (self.tokenizer.k + 1)]
    }

    pub fn point_shape(&self) -> PointEncoderShape {
        PointEncoderShape {
            hidden: self.tokenizer.point_hidden.clone(),
            dim: self.encoder.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        // Sine-cosine tables split the width into four equal parts.
        if !self.encoder.dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "encoder.dim {} must be divisible by 4",
                self.encoder.dim
            )));
        }
        Ok(())
    }

    /// Tokenizer and encoder parameters.
    pub fn encoder_layout(&self) -> Layout {
        let c = self.encoder.dim;
        let p2 = self.tokenizer.patch * self.tokenizer.patch;
        let mut l = Layout::new();
        patch_projection_layout(&mut l, RGB_PREFIX, 3 * p2, c);
        patch_projection_layout(&mut l, DEPTH_PREFIX, p2, c);
        point_encoder_layout(&mut l, POINTS_PREFIX, &self.point_shape());
        l.extend(self.encoder.layout());
        l
    }

    pub fn layout(&self) -> Layout {
        let mut l = self.encoder_layout();
        l.extend(self.decoder.layout(self.encoder.dim, self.out_dims()));
        l
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        self.validate()?;
        Ok(self.layout().materialize(rng))
    }
}

/// Raw per-sample inputs for all three modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalInputs<T> {
    /// `L×3p²` rgb patches.
    pub rgb: Tensor<T>,
    /// `L×p²` scaled depth patches.
    pub depth: Tensor<T>,
    /// `(G·(K+1))×3` normalized group members.
    pub members: Tensor<T>,
    /// `G×3` group centers (camera frame, meters).
    pub centers: Tensor<T>,
    /// `G×3(K+1)` flattened members, one group per row.
    pub pc: Tensor<T>,
    /// Per-group scale divided out of the members.
    pub scales: Vec<[f64; 3]>,
    pub grid: (usize, usize),
}

impl<T: Scalar> ModalInputs<T> {
    pub fn raw(&self, m: Modality) -> &Tensor<T> {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
            Modality::Pc => &self.pc,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.rgb.rows(), self.depth.rows(), self.pc.rows()]
    }

    /// Same inputs with the rgb patches recomputed from `img`.
    pub fn with_rgb(&self, img: &RgbImage, patch: usize) -> Result<Self> {
        let rgb = rgb_patches(img, patch)?;
        if rgb.rows() != self.rgb.rows() {
            return Err(Error::Argument("replacement image has a different size".into()));
        }
        Ok(Self { rgb, ..self.clone() })
    }
}

/// Tokenizer preprocessing. `fps_start` is the first FPS center.
pub fn prepare_inputs<T: Scalar>(
    rgb: &RgbImage,
    depth: &DepthMap,
    cloud: &PointCloud,
    cfg: &TokenizerConfig,
    fps_start: usize,
) -> Result<ModalInputs<T>> {
    cfg.validate()?;
    for (name, h, w) in [
        ("rgb", rgb.height(), rgb.width()),
        ("depth", depth.height(), depth.width()),
    ] {
        if (h, w) != (cfg.image_height, cfg.image_width) {
            return Err(Error::Config(format!(
                "{name} image is {h}x{w} but the model expects {}x{}",
                cfg.image_height, cfg.image_width
            )));
        }
    }
    if cloud.len() < cfg.groups || cloud.len() < cfg.k + 1 {
        return Err(Error::Config(format!(
            "cloud of {} points cannot form {} groups of {}",
            cloud.len(),
            cfg.groups,
            cfg.k + 1
        )));
    }
    let centers = farthest_point_sampling(cloud, cfg.groups, fps_start)?;
    let groups = knn_group(cloud, &centers, cfg.k, cfg.group_norm)?;
    let (members, centers) = group_tensors::<T>(&groups)?;
    let pc = Tensor::from_vec(groups.len(), 3 * (cfg.k + 1), members.data().to_vec());
    Ok(ModalInputs {
        rgb: rgb_patches(rgb, cfg.patch)?,
        depth: depth_patches(depth, cfg.patch, &cfg.depth)?,
        members,
        centers,
        pc,
        scales: groups.iter().map(|g| g.scale).collect(),
        grid: cfg.grid(),
    })
}

/// Projects every token and adds its encoder position: `[rgb, depth, pc]`,
/// each `L_m×C`.
pub fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &ModalInputs<T>,
) -> Result<[Var; 3]> {
    let (gh, gw) = inputs.grid;
    let table = tokenizer::sincos_pos_2d::<T>(gh, gw, cfg.encoder.dim)?;
    let mut out = Vec::with_capacity(3);
    for (prefix, raw) in [(RGB_PREFIX, &inputs.rgb), (DEPTH_PREFIX, &inputs.depth)] {
        let x = g.constant(raw.clone());
        let tok = tokenizer::project_patches(g, p, prefix, x);
        let pos = g.constant(table.clone());
        out.push(g.add(tok, pos));
    }
    let members = g.constant(inputs.members.clone());
    let centers = g.constant(inputs.centers.clone());
    let (tok, pos) = encode_groups_graph(
        g,
        p,
        POINTS_PREFIX,
        &cfg.point_shape(),
        members,
        centers,
        cfg.tokenizer.k + 1,
    );
    out.push(g.add(tok, pos));
    Ok(out.try_into().expect("three modalities"))
}

/// Embeds, keeps the visible tokens of `plan` and runs the encoder.
pub fn encode_visible<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &ModalInputs<T>,
    plan: &MaskPlan,
    taps: &[usize],
) -> Result<JointRepresentation> {
    if plan.masks.iter().map(Vec::len).collect::<Vec<_>>() != inputs.sizes() {
        return Err(Error::Config(format!(
            "mask lengths {:?} do not match token counts {:?}",
            plan.masks.iter().map(Vec::len).collect::<Vec<_>>(),
            inputs.sizes()
        )));
    }
    let embedded = embed_tokens(g, p, cfg, inputs)?;
    let parts: Vec<Var> = Modality::ALL
        .iter()
        .map(|&m| {
            let (vis, _) = plan.partition(m);
            g.gather_rows(embedded[m.index()], &vis)
        })
        .collect();
    let visible = g.concat_rows(&parts);
    encoder::encode(g, p, &cfg.encoder, visible, plan.counts, taps)
}

/// Normalized loss targets at the hidden positions of `plan`.
pub fn targets_for<T: Scalar>(cfg: &ModelConfig, inputs: &ModalInputs<T>, plan: &MaskPlan) -> [Tensor<T>; 3] {
    Modality::ALL.map(|m| {
        let (_, hidden) = plan.partition(m);
        normalize_rows(
            &inputs.raw(m).gather_rows(&hidden),
            m,
            cfg.target_norm,
            cfg.tokenizer.group_norm,
        )
    })
}

#[derive(Debug, Clone)]
pub struct ForwardVars<T> {
    pub joint: JointRepresentation,
    pub recon: ReconstructionVars,
    pub terms: [Var; 3],
    pub loss: Var,
    pub targets: [Tensor<T>; 3],
}

/// Full masked-autoencoding forward pass for one sample.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &ModalInputs<T>,
    plan: &MaskPlan,
    taps: &[usize],
) -> Result<ForwardVars<T>> {
    let joint = encode_visible(g, p, cfg, inputs, plan, taps)?;
    let centers = g.constant(inputs.centers.clone());
    let pos = decoder::decoder_positions(g, p, &cfg.decoder, inputs.grid, centers)?;
    let queries = decoder::build_queries(g, p, &cfg.decoder, &joint, plan, &pos)?;
    let kv = decoder::build_kv(g, p, &joint);
    let recon = decoder::decode(g, p, &cfg.decoder, queries, kv, plan)?;
    let targets = targets_for(cfg, inputs, plan);
    let target_vars = std::array::from_fn(|i| g.constant(targets[i].clone()));
    let (terms, loss) = mae_loss_graph(g, &recon.rows, &target_vars)?;
    Ok(ForwardVars {
        joint,
        recon,
        terms,
        loss,
        targets,
    })
}

/// Inference-only forward pass.
pub fn reconstruct<T: Scalar>(
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &ModalInputs<T>,
    plan: &MaskPlan,
) -> Result<(Reconstruction<T>, LossBreakdown)> {
    let mut g = Graph::frozen();
    let f = forward(&mut g, p, cfg, inputs, plan, &[])?;
    let terms = f.terms.map(|t| g.value(t).item().f64());
    Ok((Reconstruction::from_graph(&g, &f.recon), LossBreakdown::from_terms(terms)))
}

/// Maps normalized patch predictions back to pixel space using the mean and
/// spread of the matching ground-truth patches.
pub fn denormalize_patches<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, mode: TargetNorm) -> Tensor<T> {
    let mut out = pred.clone();
    for r in 0..out.rows() {
        let gt: Vec<f64> = truth.row(r).iter().map(|v| v.f64()).collect();
        let n = gt.len() as f64;
        let (shift, scale) = match mode {
            TargetNorm::Standardize => {
                let mean = gt.iter().sum::<f64>() / n;
                let var = gt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, (var + crate::losses::TARGET_EPS).sqrt())
            }
            TargetNorm::UnitNorm => (
                0.0,
                gt.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::losses::TARGET_EPS),
            ),
        };
        for v in out.row_mut(r) {
            *v = T::of(v.f64() * scale + shift);
        }
    }
    out
}
