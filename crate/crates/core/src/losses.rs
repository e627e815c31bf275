//! Reconstruction targets and the per-modality MSE objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::Reconstruction;
use crate::error::{Error, Result};
use crate::geometry::{group_scale, GroupNorm};
use crate::masking::MaskedViews;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::Modality;

pub const TARGET_EPS: f64 = 1e-6;

/// Normalization of rgb/depth patch targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TargetNorm {
    /// Per-patch zero mean, unit variance: `(x − μ) / sqrt(σ² + ε)`.
    #[default]
    Standardize,
    /// Per-patch unit L2 norm: `x / max(‖x‖, ε)`.
    UnitNorm,
}

/// Per-modality loss terms and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub depth: f64,
    pub pc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(terms: [f64; 3]) -> Self {
        Self {
            rgb: terms[0],
            depth: terms[1],
            pc: terms[2],
            total: terms[0] + terms[1] + terms[2],
        }
    }

    pub fn term(&self, m: Modality) -> f64 {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Depth => self.depth,
            Modality::Pc => self.pc,
        }
    }
}

/// Normalizes every row of `rows` as an image patch.
pub fn normalize_patches<T: Scalar>(rows: &Tensor<T>, mode: TargetNorm) -> Tensor<T> {
    let mut out = rows.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let vals: Vec<f64> = row.iter().map(|v| v.f64()).collect();
        let n = vals.len() as f64;
        match mode {
            TargetNorm::Standardize => {
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let denom = (var + TARGET_EPS).sqrt();
                for (o, v) in row.iter_mut().zip(&vals) {
                    *o = T::of((v - mean) / denom);
                }
            }
            TargetNorm::UnitNorm => {
                let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt().max(TARGET_EPS);
                for (o, v) in row.iter_mut().zip(&vals) {
                    *o = T::of(v / norm);
                }
            }
        }
    }
    out
}

/// Normalizes every row of `rows` as a flattened `(K+1)×3` point group whose
/// first point is the group center: members are re-centered on it and
/// rescaled as in KNN grouping. Already-normalized groups are unchanged.
pub fn normalize_groups<T: Scalar>(rows: &Tensor<T>, norm: GroupNorm) -> Tensor<T> {
    let mut out = rows.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let pts: Vec<[f64; 3]> = row
            .chunks_exact(3)
            .map(|c| [c[0].f64(), c[1].f64(), c[2].f64()])
            .collect();
        let Some(&center) = pts.first() else { continue };
        let centered: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| std::array::from_fn(|a| p[a] - center[a]))
            .collect();
        let scale = group_scale(&centered, norm);
        for (chunk, p) in row.chunks_exact_mut(3).zip(&centered) {
            for a in 0..3 {
                chunk[a] = T::of(p[a] / scale[a]);
            }
        }
    }
    out
}

/// Loss targets for one modality's hidden positions.
pub fn normalize_targets<T: Scalar>(
    views: &MaskedViews<T>,
    mode: TargetNorm,
    group_norm: GroupNorm,
) -> Tensor<T> {
    normalize_rows(&views.hidden_targets, views.modality, mode, group_norm)
}

pub fn normalize_rows<T: Scalar>(
    rows: &Tensor<T>,
    modality: Modality,
    mode: TargetNorm,
    group_norm: GroupNorm,
) -> Tensor<T> {
    match modality {
        Modality::Rgb | Modality::Depth => normalize_patches(rows, mode),
        Modality::Pc => normalize_groups(rows, group_norm),
    }
}

/// Graph-level loss: one MSE term per modality (mean over its masked
/// entries, 0 when it has none) and their sum.
pub fn mae_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[Var; 3],
    targets: &[Var; 3],
) -> Result<([Var; 3], Var)> {
    for m in Modality::ALL {
        let i = m.index();
        if g.shape(preds[i]) != g.shape(targets[i]) {
            return Err(Error::Internal(format!(
                "{} prediction {:?} vs target {:?}",
                m.name(),
                g.shape(preds[i]),
                g.shape(targets[i])
            )));
        }
    }
    let terms: [Var; 3] = std::array::from_fn(|i| g.mse(preds[i], targets[i]));
    let partial = g.add(terms[0], terms[1]);
    let total = g.add(partial, terms[2]);
    Ok((terms, total))
}

/// Plain-tensor form of [`mae_loss_graph`].
pub fn mae_loss<T: Scalar>(pred: &Reconstruction<T>, targets: &[Tensor<T>; 3]) -> Result<LossBreakdown> {
    let mut g = Graph::frozen();
    let preds = Modality::ALL.map(|m| g.constant(pred.get(m).clone()));
    let tgts = std::array::from_fn(|i| g.constant(targets[i].clone()));
    let (terms, _) = mae_loss_graph(&mut g, &preds, &tgts)?;
    Ok(LossBreakdown::from_terms(terms.map(|t| g.value(t).item().f64())))
}
