//! Cross-attention fusion decoder.
//!
//! Queries cover every position of every modality: projected visible tokens
//! at visible positions, the modality's mask token elsewhere, plus
//! positional embeddings. Keys and values are the projected visible tokens
//! with a per-modality encoding added. One cross-attention layer fuses the
//! two, a shared self-attention trunk refines the result and per-modality
//! MLP heads read out the masked positions.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::JointRepresentation;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{self, BlockShape, Init, Layout};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::Modality;

pub const DECODER_PREFIX: &str = "decoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// One mask token for all modalities instead of one each.
    pub shared_mask_token: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            depth: 4,
            heads: 8,
            mlp_ratio: 4.0,
            shared_mask_token: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "decoder dim {} must be a multiple of 4 for sine-cosine positions",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            layerscale: None,
        }
    }

    pub fn mask_token_name(&self, m: Modality) -> String {
        if self.shared_mask_token {
            format!("{DECODER_PREFIX}.mask_token")
        } else {
            format!("{DECODER_PREFIX}.mask_token.{}", m.name())
        }
    }

    /// `enc_dim` is the encoder width, `out_dims` the head output sizes
    /// (rgb, depth, pc).
    pub fn layout(&self, enc_dim: usize, out_dims: [usize; 3]) -> Layout {
        let d = self.dim;
        let mut l = Layout::new();
        l.linear(&format!("{DECODER_PREFIX}.query_proj"), enc_dim, d);
        l.linear(&format!("{DECODER_PREFIX}.kv_proj"), enc_dim, d);
        if self.shared_mask_token {
            l.push(self.mask_token_name(Modality::Rgb), 1, d, Init::Normal(0.02));
        } else {
            for m in Modality::ALL {
                l.push(self.mask_token_name(m), 1, d, Init::Normal(0.02));
            }
        }
        l.push(
            format!("{DECODER_PREFIX}.modality_encoding"),
            3,
            d,
            Init::Normal(0.02),
        );
        l.mlp(&format!("{DECODER_PREFIX}.center"), &[3, d, d]);
        l.extend(self.trunk_layout());
        l.layer_norm(&format!("{DECODER_PREFIX}.norm"), d);
        for m in Modality::ALL {
            l.mlp(
                &format!("{DECODER_PREFIX}.head.{}", m.name()),
                &[d, d, out_dims[m.index()]],
            );
        }
        l
    }

    /// The modality-shared part: fusion layer and self-attention trunk.
    pub fn trunk_layout(&self) -> Layout {
        let mut l = Layout::new();
        let shape = self.block_shape();
        nn::cross_attention_block_layout(&mut l, &format!("{DECODER_PREFIX}.fusion"), &shape);
        for i in 0..self.depth {
            nn::self_attention_block_layout(&mut l, &format!("{DECODER_PREFIX}.blocks.{i}"), &shape);
        }
        l
    }
}

/// Decoder positional embeddings, one `L_m×C_d` matrix per modality.
/// Images use fixed sine-cosine tables; point groups run their centers
/// through the decoder's center MLP.
pub fn decoder_positions<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &DecoderConfig,
    grid: (usize, usize),
    centers: Var,
) -> Result<[Var; 3]> {
    let table = crate::tokenizer::sincos_pos_2d::<T>(grid.0, grid.1, cfg.dim)?;
    let rgb = g.constant(table.clone());
    let depth = g.constant(table);
    let pc = nn::mlp(g, p, &format!("{DECODER_PREFIX}.center"), 2, centers);
    Ok([rgb, depth, pc])
}

fn check_plan(joint: &JointRepresentation, plan: &MaskPlan, pos: &[Var; 3], g: &Graph<impl Scalar>) -> Result<()> {
    for m in Modality::ALL {
        let i = m.index();
        let mask = plan.mask(m);
        let vis = mask.iter().filter(|b| **b).count();
        if joint.slice(m).len() != vis || vis != plan.counts[i] {
            return Err(Error::Internal(format!(
                "{}: encoder has {} visible rows, plan says {} (mask {vis})",
                m.name(),
                joint.slice(m).len(),
                plan.counts[i]
            )));
        }
        if g.shape(pos[i]).0 != mask.len() {
            return Err(Error::Internal(format!(
                "{}: {} positions for a mask of length {}",
                m.name(),
                g.shape(pos[i]).0,
                mask.len()
            )));
        }
    }
    Ok(())
}

/// Query sequence of length `L_rgb + L_depth + L_pc`.
pub fn build_queries<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &DecoderConfig,
    joint: &JointRepresentation,
    plan: &MaskPlan,
    pos: &[Var; 3],
) -> Result<Var> {
    check_plan(joint, plan, pos, g)?;
    let mut segments = Vec::with_capacity(3);
    for m in Modality::ALL {
        let rows: Vec<usize> = joint.slice(m).collect();
        let visible = g.gather_rows(joint.h, &rows);
        let projected = nn::linear(g, p, &format!("{DECODER_PREFIX}.query_proj"), visible);
        let mask_token = g.param(p, &cfg.mask_token_name(m));
        let pool = g.concat_rows(&[projected, mask_token]);
        let mut next = 0;
        let idx: Vec<usize> = plan
            .mask(m)
            .iter()
            .map(|&vis| {
                if vis {
                    next += 1;
                    next - 1
                } else {
                    rows.len()
                }
            })
            .collect();
        let placed = g.gather_rows(pool, &idx);
        segments.push(g.add(placed, pos[m.index()]));
    }
    Ok(g.concat_rows(&segments))
}

/// Key/value sequence: projected visible tokens plus modality encodings.
pub fn build_kv<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, joint: &JointRepresentation) -> Var {
    let projected = nn::linear(g, p, &format!("{DECODER_PREFIX}.kv_proj"), joint.h);
    let encodings = g.param(p, &format!("{DECODER_PREFIX}.modality_encoding"));
    let which: Vec<usize> = Modality::ALL
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m.index(), joint.slice(m).len()))
        .collect();
    let per_row = g.gather_rows(encodings, &which);
    g.add(projected, per_row)
}

/// Head outputs at the masked positions of each modality.
#[derive(Debug, Clone)]
pub struct ReconstructionVars {
    pub rows: [Var; 3],
    pub hidden_idx: [Vec<usize>; 3],
    /// Cross-attention probabilities of the fusion layer, per head.
    pub fusion_attention: Vec<Var>,
}

/// Fusion, shared trunk and heads. Only masked positions are read out.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &DecoderConfig,
    queries: Var,
    kv: Var,
    plan: &MaskPlan,
) -> Result<ReconstructionVars> {
    let total: usize = plan.masks.iter().map(Vec::len).sum();
    if g.shape(queries).0 != total {
        return Err(Error::Internal(format!(
            "{} queries for {total} positions",
            g.shape(queries).0
        )));
    }
    let shape = cfg.block_shape();
    let (mut x, fusion_attention) =
        nn::cross_attention_block(g, p, &format!("{DECODER_PREFIX}.fusion"), &shape, queries, kv);
    for i in 0..cfg.depth {
        x = nn::self_attention_block(g, p, &format!("{DECODER_PREFIX}.blocks.{i}"), &shape, x).0;
    }
    let x = nn::layer_norm(g, p, &format!("{DECODER_PREFIX}.norm"), x);
    let mut offset = 0;
    let mut rows = Vec::with_capacity(3);
    let mut hidden = Vec::with_capacity(3);
    for m in Modality::ALL {
        let (_, hidden_idx) = plan.partition(m);
        let global: Vec<usize> = hidden_idx.iter().map(|i| offset + i).collect();
        let picked = g.gather_rows(x, &global);
        rows.push(nn::mlp(g, p, &format!("{DECODER_PREFIX}.head.{}", m.name()), 2, picked));
        offset += plan.mask(m).len();
        hidden.push(hidden_idx);
    }
    Ok(ReconstructionVars {
        rows: rows.try_into().expect("three modalities"),
        hidden_idx: hidden.try_into().expect("three modalities"),
        fusion_attention,
    })
}

/// Decoder outputs at masked positions: rgb rows are `3·p²` patches, depth
/// rows `p²` patches, pc rows `(K+1)·3` flattened group members.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub pc: Tensor<T>,
}

impl<T: Scalar> Reconstruction<T> {
    pub fn from_graph(g: &Graph<T>, vars: &ReconstructionVars) -> Self {
        Self {
            rgb: g.value(vars.rows[0]).clone(),
            depth: g.value(vars.rows[1]).clone(),
            pc: g.value(vars.rows[2]).clone(),
        }
    }

    pub fn get(&self, m: Modality) -> &Tensor<T> {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
            Modality::Pc => &self.pc,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.rgb.all_finite() && self.depth.all_finite() && self.pc.all_finite()
    }

    /// Point-head rows reshaped to `(K+1)` points each.
    pub fn pc_groups(&self) -> Vec<Vec<[f64; 3]>> {
        (0..self.pc.rows())
            .map(|r| {
                self.pc
                    .row(r)
                    .chunks_exact(3)
                    .map(|c| [c[0].f64(), c[1].f64(), c[2].f64()])
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::materialize_masks;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            shared_mask_token: false,
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    struct Setup {
        g: Graph<f64>,
        p: ParamStore<f64>,
        joint: JointRepresentation,
        plan: MaskPlan,
        pos: [Var; 3],
    }

    fn setup(counts: [usize; 3], sizes: [usize; 3], seed: u64) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg();
        let p = c.layout(6, [12, 4, 9]).materialize(&mut rng);
        let budget = counts.iter().sum();
        let plan = MaskPlan::from_counts(counts, sizes, budget).unwrap();
        let plan = materialize_masks(plan, sizes, &mut rng).unwrap();
        let mut g = Graph::new();
        let h = g.variable(random(&mut rng, budget, 6));
        let a = counts[0];
        let b = a + counts[1];
        let joint = JointRepresentation {
            h,
            slices: [0..a, a..b, b..budget],
            taps: vec![],
            attention: vec![],
        };
        let pos = std::array::from_fn(|i| g.constant(random(&mut rng, sizes[i], 8)));
        Setup {
            g,
            p,
            joint,
            plan,
            pos,
        }
    }

    #[test]
    fn query_segments_and_output_rows() {
        let Setup {
            mut g,
            p,
            joint,
            plan,
            pos,
        } = setup([4, 0, 2], [4, 3, 5], 0);
        let q = build_queries(&mut g, &p, &cfg(), &joint, &plan, &pos).unwrap();
        assert_eq!(g.shape(q), (12, 8));

        // Depth is fully masked: every row is the mask token plus its position.
        let token = p.get("decoder.mask_token.depth").unwrap();
        for r in 0..3 {
            for c in 0..8 {
                let want = token.get(0, c) + g.value(pos[1]).get(r, c);
                assert!((g.value(q).get(4 + r, c) - want).abs() < 1e-15);
            }
        }

        let kv = build_kv(&mut g, &p, &joint);
        assert_eq!(g.shape(kv), (6, 8));
        let out = decode(&mut g, &p, &cfg(), q, kv, &plan).unwrap();
        let rec = Reconstruction::from_graph(&g, &out);
        assert_eq!(rec.rgb.shape(), (0, 12));
        assert_eq!(rec.depth.shape(), (3, 4));
        assert_eq!(rec.pc.shape(), (3, 9));
        assert!(rec.all_finite());
        assert_eq!(rec.pc_groups()[0].len(), 3);
    }

    #[test]
    fn fully_visible_modality_is_projected_tokens() {
        let Setup {
            mut g,
            p,
            joint,
            plan,
            pos,
        } = setup([4, 0, 2], [4, 3, 5], 1);
        let q = build_queries(&mut g, &p, &cfg(), &joint, &plan, &pos).unwrap();
        let mut fg = Graph::frozen();
        let h = fg.constant(g.value(joint.h).gather_rows(&[0, 1, 2, 3]));
        let proj = nn::linear(&mut fg, &p, "decoder.query_proj", h);
        for r in 0..4 {
            for c in 0..8 {
                let want = fg.value(proj).get(r, c) + g.value(pos[0]).get(r, c);
                assert!((g.value(q).get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn modality_encodings_touch_only_their_rows() {
        let Setup {
            mut g,
            mut p,
            joint,
            ..
        } = setup([2, 3, 1], [4, 4, 4], 2);
        let base = build_kv(&mut g, &p, &joint);
        let base = g.value(base).clone();
        let enc = p.get("decoder.modality_encoding").unwrap().clone();
        let swapped = Tensor::from_rows(&[enc.row(1).to_vec(), enc.row(0).to_vec(), enc.row(2).to_vec()]);
        p.insert("decoder.modality_encoding", swapped);
        let mut g2 = Graph::new();
        let h = g2.constant(g.value(joint.h).clone());
        let j2 = JointRepresentation { h, ..joint.clone() };
        let kv = build_kv(&mut g2, &p, &j2);
        let kv = g2.value(kv);
        for r in 0..6 {
            let changed = kv.row(r) != base.row(r);
            assert_eq!(changed, r < 5, "row {r}");
        }

        // Zero encodings leave plain projections.
        p.insert("decoder.modality_encoding", Tensor::zeros(3, 8));
        let mut g3 = Graph::new();
        let h = g3.constant(g.value(joint.h).clone());
        let j3 = JointRepresentation { h, ..joint };
        let kv = build_kv(&mut g3, &p, &j3);
        let plain = nn::linear(&mut g3, &p, "decoder.kv_proj", h);
        assert_eq!(g3.value(kv), g3.value(plain));
    }

    #[test]
    fn inconsistent_plan_is_an_internal_error() {
        let Setup {
            mut g,
            p,
            mut joint,
            plan,
            pos,
        } = setup([2, 2, 2], [4, 4, 4], 3);
        joint.slices = [0..3, 3..4, 4..6];
        assert!(matches!(
            build_queries(&mut g, &p, &cfg(), &joint, &plan, &pos),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn shared_trunk_is_a_third_of_three_trunks() {
        let c = DecoderConfig::default();
        let shared = c.trunk_layout().num_elements();
        let three = 3 * shared;
        assert!((shared as f64 / three as f64 - 1.0 / 3.0).abs() < 1e-12);
        let full = c.layout(384, [768, 256, 96]);
        assert_eq!(
            full.count_prefix("decoder.fusion") + full.count_prefix("decoder.blocks"),
            shared
        );
    }

    #[test]
    fn shared_mask_token_flag() {
        let c = DecoderConfig {
            shared_mask_token: true,
            ..cfg()
        };
        let l = c.layout(6, [12, 4, 9]);
        assert_eq!(l.specs().iter().filter(|s| s.name.contains("mask_token")).count(), 1);
        assert_eq!(c.mask_token_name(Modality::Pc), "decoder.mask_token");
    }

    // Scalar re-implementation of the fusion block for a single head.
    fn scalar_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + nn::LN_EPS).sqrt() * g[i] + b[i])
            .collect()
    }

    fn scalar_linear(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        (0..w.cols())
            .map(|o| b.get(0, o) + x.iter().enumerate().map(|(i, v)| v * w.get(i, o)).sum::<f64>())
            .collect()
    }

    fn scalar_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn fusion_layer_matches_scalar_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = BlockShape {
            dim: 4,
            heads: 1,
            mlp_ratio: 2.0,
            layerscale: None,
        };
        let mut l = Layout::new();
        nn::cross_attention_block_layout(&mut l, "f", &shape);
        let mut p: ParamStore<f64> = l.materialize(&mut rng);
        for name in p.names().to_vec() {
            let (r, c) = p.get(&name).unwrap().shape();
            p.insert(name, random(&mut rng, r, c));
        }
        let qx = random(&mut rng, 3, 4);
        let kx = random(&mut rng, 5, 4);
        let mut g = Graph::new();
        let q = g.constant(qx.clone());
        let k = g.constant(kx.clone());
        let (out, _) = nn::cross_attention_block(&mut g, &p, "f", &shape, q, k);

        let t = |n: &str| p.get(n).unwrap().clone();
        let row = |t: &Tensor<f64>| t.row(0).to_vec();
        let kv_rows: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
            .map(|j| {
                let n = scalar_layer_norm(kx.row(j), &row(&t("f.norm_kv.gamma")), &row(&t("f.norm_kv.beta")));
                let kv = scalar_linear(&n, &t("f.attn.kv.weight"), &t("f.attn.kv.bias"));
                (kv[..4].to_vec(), kv[4..].to_vec())
            })
            .collect();
        for i in 0..3 {
            let n = scalar_layer_norm(qx.row(i), &row(&t("f.norm_q.gamma")), &row(&t("f.norm_q.beta")));
            let qi = scalar_linear(&n, &t("f.attn.q.weight"), &t("f.attn.q.bias"));
            let scores: Vec<f64> = kv_rows
                .iter()
                .map(|(k, _)| qi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let mut att = vec![0.0; 4];
            for (s, (_, v)) in scores.iter().zip(&kv_rows) {
                for c in 0..4 {
                    att[c] += (s - max).exp() / z * v[c];
                }
            }
            let a = scalar_linear(&att, &t("f.attn.proj.weight"), &t("f.attn.proj.bias"));
            let x: Vec<f64> = qx.row(i).iter().zip(&a).map(|(u, v)| u + v).collect();
            let n2 = scalar_layer_norm(&x, &row(&t("f.norm2.gamma")), &row(&t("f.norm2.beta")));
            let h: Vec<f64> = scalar_linear(&n2, &t("f.mlp.fc1.weight"), &t("f.mlp.fc1.bias"))
                .into_iter()
                .map(scalar_gelu)
                .collect();
            let f = scalar_linear(&h, &t("f.mlp.fc2.weight"), &t("f.mlp.fc2.bias"));
            for c in 0..4 {
                let want = x[c] + f[c];
                assert!((g.value(out).get(i, c) - want).abs() < 1e-12);
            }
        }
    }
}
