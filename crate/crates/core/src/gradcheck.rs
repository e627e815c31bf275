//! Finite-difference verification of the analytic gradients.
//!
//! Runs in `f64` on a micro student with alignment projectors against a
//! deeper, wider micro teacher, so every parameter family (tokenizers,
//! encoder, decoder, mask tokens, modality encodings, heads and
//! projectors) receives a gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::config::Config;
use crate::distill::{distill_forward, teacher_taps, AlignmentSpec};
use crate::error::Result;
use crate::masking::{materialize_masks, MaskPlan};
use crate::model::{prepare_inputs, ModalInputs, ModelConfig};
use crate::params::ParamStore;
use crate::synthdata::{generate, SceneConfig};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Problem {
    cfg: ModelConfig,
    spec: AlignmentSpec,
    teacher: Vec<Tensor<f64>>,
    inputs: ModalInputs<f64>,
    plan: MaskPlan,
}

impl Problem {
    fn loss(&self, params: &ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let d = distill_forward(&mut g, params, &self.cfg, &self.spec, &self.teacher, &self.inputs, &self.plan)?;
        let grads = g.backward(d.total).param_grads_for(params);
        Ok((g.value(d.total).item(), grads))
    }
}

fn setup(seed: u64) -> Result<(Problem, ParamStore<f64>)> {
    let micro = Config::micro();
    let cfg = micro.model.clone();
    let mut tcfg = cfg.clone();
    tcfg.encoder.dim = 24;
    tcfg.encoder.depth = 4;
    let scene = SceneConfig {
        height: cfg.tokenizer.image_height,
        width: cfg.tokenizer.image_width,
        cloud_points: micro.data.cloud_points,
        ..SceneConfig::default()
    };
    let sample = generate(1, seed, &scene)?.remove(0);
    let inputs = prepare_inputs(&sample.rgb, &sample.depth, &sample.cloud, &cfg.tokenizer, 0)?;
    let sizes = cfg.tokenizer.sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = materialize_masks(MaskPlan::from_counts([2, 1, 2], sizes, 5)?, sizes, &mut rng)?;
    let teacher_params = tcfg.init_params::<f64, _>(&mut rng)?;
    let spec = AlignmentSpec::new(tcfg.encoder.depth, cfg.encoder.depth, 1.0, 1.0)?;
    let teacher = teacher_taps(&teacher_params, &tcfg, &inputs, &plan, &spec.teacher_taps())?;
    let mut params = cfg.init_params::<f64, _>(&mut rng)?;
    for (n, t) in AlignmentSpec::layout(cfg.encoder.dim, tcfg.encoder.dim)
        .materialize::<f64, _>(&mut rng)
        .iter()
    {
        params.insert(n, t.clone());
    }
    Ok((
        Problem {
            cfg,
            spec,
            teacher,
            inputs,
            plan,
        },
        params,
    ))
}

/// Compares analytic and central-difference gradients on up to
/// `per_tensor` entries of every parameter tensor.
pub fn run_gradcheck(seed: u64, per_tensor: usize) -> Result<GradcheckReport> {
    let (problem, mut params) = setup(seed)?;
    let (_, analytic) = problem.loss(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let names: Vec<String> = params.names().to_vec();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].data().len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_tensor).into_vec()
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: picks.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        for &j in &picks {
            let orig = params.get(name).unwrap().data()[j];
            params.get_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
            let (plus, _) = problem.loss(&params)?;
            params.get_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
            let (minus, _) = problem.loss(&params)?;
            params.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[j];
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tensors,
        max_rel_err,
        tolerance: TOLERANCE,
    })
}
