//! Cross-modal reconstruction probes on a trained model.
//!
//! Modes: near-total masking of two modalities (`a`), prediction of masked
//! modalities from a single visible one (`b`), and a re-color probe where
//! one visible rgb patch is recolored before encoding (`c`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::Reconstruction;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::masking::{materialize_masks, MaskPlan};
use crate::model::{denormalize_patches, prepare_inputs, reconstruct, ModalInputs, ModelConfig};
use crate::params::ParamStore;
use crate::synthdata::Sample;
use crate::tensor::Tensor;
use crate::tokenizer::{unpatchify, Modality, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// One visible token for each other modality, the rest of the budget on this one.
    NearTotal(Modality),
    /// The whole budget on this modality; the other two are fully masked.
    CrossModal(Modality),
    /// Balanced masking with one visible rgb patch recolored.
    Recolor,
    /// Every token visible.
    Unmasked,
}

impl ProbeMode {
    /// `mode` is `a`, `b`, `c` or `none`; `source` names the modality kept
    /// visible by `a` and `b` (default depth).
    pub fn parse(mode: &str, source: Option<&str>) -> Result<Self> {
        let m = match source.unwrap_or("depth") {
            "rgb" => Modality::Rgb,
            "depth" => Modality::Depth,
            "pc" => Modality::Pc,
            other => return Err(Error::Argument(format!("unknown modality `{other}`"))),
        };
        match mode {
            "a" => Ok(Self::NearTotal(m)),
            "b" => Ok(Self::CrossModal(m)),
            "c" => Ok(Self::Recolor),
            "none" => Ok(Self::Unmasked),
            other => Err(Error::Argument(format!("unknown masking mode `{other}`"))),
        }
    }

    pub fn counts(self, sizes: [usize; 3], budget: usize) -> [usize; 3] {
        match self {
            Self::NearTotal(m) => {
                let mut c = [1; 3];
                c[m.index()] = budget.saturating_sub(2);
                c
            }
            Self::CrossModal(m) => {
                let mut c = [0; 3];
                c[m.index()] = budget;
                c
            }
            Self::Recolor => {
                let base = budget / 3;
                let mut c = [base; 3];
                for i in 0..budget - 3 * base {
                    c[i] += 1;
                }
                c
            }
            Self::Unmasked => sizes,
        }
    }
}

/// Mask plan for `mode`; fails when the mode does not fit the budget.
pub fn probe_plan(mode: ProbeMode, sizes: [usize; 3], budget: usize, seed: u64) -> Result<MaskPlan> {
    if matches!(mode, ProbeMode::NearTotal(_)) && budget < 3 {
        return Err(Error::Config(format!("mode a needs a budget of at least 3, got {budget}")));
    }
    let plan = MaskPlan::from_counts(mode.counts(sizes, budget), sizes, budget)?;
    materialize_masks(plan, sizes, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Rotates the color channels of one patch.
pub fn recolor_patch(img: &RgbImage, patch: usize, index: usize) -> RgbImage {
    let gw = img.width() / patch;
    let (py, px) = (index / gw, index % gw);
    let mut out = img.clone();
    for y in py * patch..(py + 1) * patch {
        for x in px * patch..(px + 1) * patch {
            let (r, g, b) = (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            out.set(0, y, x, b);
            out.set(1, y, x, r);
            out.set(2, y, x, g);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub mode: ProbeMode,
    pub plan: MaskPlan,
    pub inputs: ModalInputs<f32>,
    pub recon: Reconstruction<f32>,
    pub loss: LossBreakdown,
    /// Index of the recolored patch for mode `c`.
    pub recolored: Option<usize>,
}

pub fn run_probe(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    sample: &Sample,
    mode: ProbeMode,
    budget: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let sizes = cfg.tokenizer.sizes();
    let plan = probe_plan(mode, sizes, budget, seed)?;
    let mut inputs = prepare_inputs(&sample.rgb, &sample.depth, &sample.cloud, &cfg.tokenizer, 0)?;
    let mut recolored = None;
    if mode == ProbeMode::Recolor {
        let idx = plan
            .mask(Modality::Rgb)
            .iter()
            .position(|&v| v)
            .ok_or_else(|| Error::Config("re-color probe needs a visible rgb patch".into()))?;
        inputs = inputs.with_rgb(&recolor_patch(&sample.rgb, cfg.tokenizer.patch, idx), cfg.tokenizer.patch)?;
        recolored = Some(idx);
    }
    let (recon, loss) = reconstruct(params, cfg, &inputs, &plan)?;
    Ok(ProbeResult {
        mode,
        plan,
        inputs,
        recon,
        loss,
        recolored,
    })
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[255; 3]; width * height],
        }
    }

    fn put(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Pixel-space patches with hidden ones replaced by predictions (or by
/// `fill` when `pred` is `None`).
fn compose(raw: &Tensor<f32>, mask: &[bool], pred: Option<&Tensor<f32>>, fill: f32) -> Tensor<f32> {
    let mut out = raw.clone();
    let mut next = 0;
    for (i, &vis) in mask.iter().enumerate() {
        if vis {
            continue;
        }
        match pred {
            Some(p) => out.row_mut(i).copy_from_slice(p.row(next)),
            None => out.row_mut(i).fill(fill),
        }
        next += 1;
    }
    out
}

/// Side-by-side grid: rows rgb and depth, columns input, masked input and
/// prediction (visible patches kept, masked ones predicted).
pub fn image_grid(result: &ProbeResult, cfg: &ModelConfig) -> Result<Raster> {
    let t = &cfg.tokenizer;
    let (h, w, p) = (t.image_height, t.image_width, t.patch);
    let gap = 2;
    let mut r = Raster::new(3 * w + 2 * gap, 2 * h + gap);
    for (row, m, channels) in [(0, Modality::Rgb, 3), (1, Modality::Depth, 1)] {
        let raw = result.inputs.raw(m);
        let mask = result.plan.mask(m);
        let (_, hidden) = result.plan.partition(m);
        let truth = raw.gather_rows(&hidden);
        let pred = denormalize_patches(result.recon.get(m), &truth, cfg.target_norm);
        let scale = if t.depth.normalize || m == Modality::Rgb { 1.0 } else { 1.0 / t.depth.d_max };
        let panels = [raw.clone(), compose(raw, mask, None, 0.5), compose(raw, mask, Some(&pred), 0.0)];
        for (col, panel) in panels.iter().enumerate() {
            let img = unpatchify(panel, channels, h, w, p)?;
            for y in 0..h {
                for x in 0..w {
                    let c: [f64; 3] = std::array::from_fn(|ch| img[((ch % channels) * h + y) * w + x] * scale);
                    r.put(col * (w + gap) + x, row * (h + gap) + y, c);
                }
            }
        }
    }
    Ok(r)
}

/// Text point list: `kind group x y z` per line, where `kind` is
/// `visible`, `truth` or `pred`. Coordinates are camera-frame meters.
pub fn point_list(result: &ProbeResult) -> String {
    let centers = &result.inputs.centers;
    let mut out = String::from("# kind group x y z\n");
    let mut emit = |kind: &str, g: usize, row: &[f32]| {
        let c = centers.row(g);
        let s = result.inputs.scales[g];
        for pt in row.chunks_exact(3) {
            let xyz: [f64; 3] = std::array::from_fn(|a| c[a] as f64 + pt[a] as f64 * s[a]);
            out.push_str(&format!("{kind} {g} {} {} {}\n", xyz[0], xyz[1], xyz[2]));
        }
    };
    let (visible, hidden) = result.plan.partition(Modality::Pc);
    for &g in &visible {
        emit("visible", g, result.inputs.pc.row(g));
    }
    for (i, &g) in hidden.iter().enumerate() {
        emit("truth", g, result.inputs.pc.row(g));
        emit("pred", g, result.recon.pc.row(i));
    }
    out
}
