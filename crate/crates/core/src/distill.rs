//! Feature-alignment distillation from a frozen teacher encoder.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::{encode_visible, forward, ForwardVars, ModalInputs, ModelConfig};
use crate::nn::{self, Layout};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const ALIGN_PREFIX: &str = "align";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignRole {
    Bottom,
    Middle,
    Top,
}

impl AlignRole {
    pub const ALL: [AlignRole; 3] = [AlignRole::Bottom, AlignRole::Middle, AlignRole::Top];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bottom => "bottom",
            Self::Middle => "middle",
            Self::Top => "top",
        }
    }

    pub fn projector(self) -> String {
        format!("{ALIGN_PREFIX}.{}", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignPair {
    pub role: AlignRole,
    pub teacher_tap: usize,
    pub student_tap: usize,
}

/// Bottom pairs the post-tokenizer embeddings, top the last blocks, and the
/// middle pair sits at three quarters of the student depth.
pub fn select_alignment_layers(teacher_depth: usize, student_depth: usize) -> Result<[AlignPair; 3]> {
    if teacher_depth == 0 || student_depth == 0 {
        return Err(Error::Argument(format!(
            "alignment needs non-empty encoders, got depths {teacher_depth} and {student_depth}"
        )));
    }
    let s = (0.75 * student_depth as f64).round() as usize;
    let t = (s as f64 * teacher_depth as f64 / student_depth as f64).round() as usize;
    Ok([
        AlignPair {
            role: AlignRole::Bottom,
            teacher_tap: 0,
            student_tap: 0,
        },
        AlignPair {
            role: AlignRole::Middle,
            teacher_tap: t,
            student_tap: s,
        },
        AlignPair {
            role: AlignRole::Top,
            teacher_tap: teacher_depth,
            student_tap: student_depth,
        },
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    pub pairs: Vec<AlignPair>,
    pub beta: f64,
    pub delta: f64,
}

impl AlignmentSpec {
    /// All three pairs for the given depths.
    pub fn new(teacher_depth: usize, student_depth: usize, beta: f64, delta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("distill.beta must be non-negative, got {beta}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("distill.delta must be positive, got {delta}")));
        }
        Ok(Self {
            pairs: select_alignment_layers(teacher_depth, student_depth)?.to_vec(),
            beta,
            delta,
        })
    }

    pub fn without(&self, role: AlignRole) -> Self {
        Self {
            pairs: self.pairs.iter().copied().filter(|p| p.role != role).collect(),
            ..self.clone()
        }
    }

    pub fn teacher_taps(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.teacher_tap).collect()
    }

    pub fn student_taps(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.student_tap).collect()
    }

    /// Projectors for every role, so that ablations keep the same parameter
    /// set.
    pub fn layout(student_dim: usize, teacher_dim: usize) -> Layout {
        let mut l = Layout::new();
        for role in AlignRole::ALL {
            l.linear(&role.projector(), student_dim, teacher_dim);
        }
        l
    }
}

/// Teacher and student must tokenize identically.
pub fn check_compatible(student: &ModelConfig, teacher: &ModelConfig) -> Result<()> {
    if student.tokenizer != teacher.tokenizer {
        return Err(Error::Config(format!(
            "teacher tokenizer ({:?} tokens) differs from student tokenizer ({:?} tokens)",
            teacher.tokenizer.sizes(),
            student.tokenizer.sizes()
        )));
    }
    Ok(())
}

/// Teacher hidden states at `taps`, computed without gradients.
pub fn teacher_taps<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &ModalInputs<T>,
    plan: &MaskPlan,
    taps: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::frozen();
    let joint = encode_visible(&mut g, params, cfg, inputs, plan, taps)?;
    taps.iter()
        .map(|&t| {
            joint
                .tap(t)
                .map(|v| g.value(v).clone())
                .ok_or_else(|| Error::Internal(format!("teacher tap {t} missing")))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DistillVars<T> {
    pub forward: ForwardVars<T>,
    pub pair_terms: Vec<(AlignRole, Var)>,
    pub align: Var,
    pub total: Var,
}

/// Student forward pass with alignment terms against precomputed teacher
/// taps (one per pair of `spec`, in order). The student store must hold the
/// `align.*` projectors.
pub fn distill_forward<T: Scalar>(
    g: &mut Graph<T>,
    student: &ParamStore<T>,
    cfg: &ModelConfig,
    spec: &AlignmentSpec,
    teacher: &[Tensor<T>],
    inputs: &ModalInputs<T>,
    plan: &MaskPlan,
) -> Result<DistillVars<T>> {
    if teacher.len() != spec.pairs.len() {
        return Err(Error::Internal(format!(
            "{} teacher taps for {} pairs",
            teacher.len(),
            spec.pairs.len()
        )));
    }
    let fwd = forward(g, student, cfg, inputs, plan, &spec.student_taps())?;
    let mut pair_terms = Vec::with_capacity(spec.pairs.len());
    for (pair, target) in spec.pairs.iter().zip(teacher) {
        let h = fwd
            .joint
            .tap(pair.student_tap)
            .ok_or_else(|| Error::Internal(format!("student tap {} missing", pair.student_tap)))?;
        let projected = nn::linear(g, student, &pair.role.projector(), h);
        if g.shape(projected) != (target.rows(), target.cols()) {
            return Err(Error::Internal(format!(
                "{} pair: projected student {:?} vs teacher {:?}",
                pair.role.name(),
                g.shape(projected),
                (target.rows(), target.cols())
            )));
        }
        let t = g.constant(target.clone());
        pair_terms.push((pair.role, g.smooth_l1(t, projected, spec.delta)));
    }
    let align = match pair_terms.split_first() {
        None => g.constant(Tensor::scalar(T::zero())),
        Some((first, rest)) => rest.iter().fold(first.1, |acc, &(_, v)| g.add(acc, v)),
    };
    let weighted = g.scale(align, T::of(spec.beta));
    let total = g.add(fwd.loss, weighted);
    Ok(DistillVars {
        forward: fwd,
        pair_terms,
        align,
        total,
    })
}
