//! Deterministic pre-training and distillation loop.
//!
//! All randomness comes from ChaCha8 streams derived from the config seed:
//! stream 0 initializes the model, stream 1 the alignment projectors,
//! stream 2 draws masks and augmentations, and stream `3 + epoch` shuffles
//! the dataset for that epoch.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::Config;
use crate::distill::{check_compatible, distill_forward, teacher_taps, AlignRole, AlignmentSpec};
use crate::error::{Error, Result};
use crate::geometry::random_start;
use crate::masking::sample_plan;
use crate::model::{forward, prepare_inputs, ModalInputs, ModelConfig};
use crate::optim::{adamw_step, clip_grad_norm, AdamState};
use crate::params::ParamStore;
use crate::synthdata::Sample;
use crate::tensor::{Scalar, Tensor};

pub const CSV_HEADER: &str = "step,lr,rgb,depth,pc,align,total";
pub const LOSS_LOG: &str = "loss.csv";
pub const CONFIG_ECHO: &str = "config.txt";
pub const LAST_CHECKPOINT: &str = "checkpoint.bin";

const INIT_STREAM: u64 = 0;
const ALIGN_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn numbered_checkpoint(step: u64) -> String {
    format!("checkpoint-{step:06}.bin")
}

/// One row of the loss log. Terms are batch means; `total` is
/// `rgb + depth + pc + β·align`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub rgb: f64,
    pub depth: f64,
    pub pc: f64,
    pub align: f64,
    pub total: f64,
}

impl StepLog {
    pub fn mae(&self) -> f64 {
        self.rgb + self.depth + self.pc
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.rgb, self.depth, self.pc, self.align, self.total
        )
    }
}

/// Frozen teacher encoder plus the alignment it is distilled through.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub spec: AlignmentSpec,
}

impl Teacher {
    pub fn new(cfg: ModelConfig, params: ParamStore<f32>, student: &Config) -> Result<Self> {
        check_compatible(&student.model, &cfg)?;
        let d = &student.distill;
        let mut spec = AlignmentSpec::new(cfg.encoder.depth, student.model.encoder.depth, d.beta, d.delta)?;
        for (role, on) in [(AlignRole::Bottom, d.bottom), (AlignRole::Middle, d.middle), (AlignRole::Top, d.top)] {
            if !on {
                spec = spec.without(role);
            }
        }
        Ok(Self { cfg, params, spec })
    }

    /// Loads the teacher named by `distill.teacher`.
    pub fn load(student: &Config) -> Result<Self> {
        let path = student
            .distill
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Config("distill.teacher is not set".into()))?;
        if !path.exists() {
            return Err(Error::Config(format!("teacher checkpoint {} does not exist", path.display())));
        }
        let ckpt = Checkpoint::<f32>::load(path)?;
        let tcfg = Config::from_text(&ckpt.config)?;
        Self::new(tcfg.model, ckpt.params, student)
    }
}

pub struct Trainer {
    cfg: Config,
    samples: Vec<Sample>,
    cache: Vec<Option<ModalInputs<f32>>>,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    step: u64,
    teacher: Option<Teacher>,
    budget: usize,
    perm: (u64, Vec<usize>),
}

impl Trainer {
    /// Fresh run from the seed.
    pub fn new(cfg: Config, samples: Vec<Sample>, teacher: Option<Teacher>) -> Result<Self> {
        cfg.validate()?;
        let mut params = cfg.model.init_params::<f32, _>(&mut seeded(cfg.seed, INIT_STREAM))?;
        if let Some(t) = &teacher {
            let projectors = AlignmentSpec::layout(cfg.model.encoder.dim, t.cfg.encoder.dim)
                .materialize::<f32, _>(&mut seeded(cfg.seed, ALIGN_STREAM));
            for (n, v) in projectors.iter() {
                params.insert(n, v.clone());
            }
        }
        let adam = AdamState::new(&params);
        let rng = seeded(cfg.seed, TRAIN_STREAM);
        Self::assemble(cfg, samples, teacher, params, adam, rng, 0)
    }

    /// Continues the run stored in `ckpt`, which must have been written
    /// with the same configuration.
    pub fn resume(cfg: Config, samples: Vec<Sample>, teacher: Option<Teacher>, ckpt: Checkpoint<f32>) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config != cfg.to_text() {
            return Err(Error::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let rng = ckpt.rng.restore();
        Self::assemble(cfg, samples, teacher, ckpt.params, ckpt.adam, rng, ckpt.step)
    }

    fn assemble(
        cfg: Config,
        samples: Vec<Sample>,
        teacher: Option<Teacher>,
        params: ParamStore<f32>,
        adam: AdamState<f32>,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("dataset is empty".into()));
        }
        let expected = {
            let mut n = cfg.model.layout().specs().len();
            if teacher.is_some() {
                n += AlignRole::ALL.len() * 2;
            }
            n
        };
        if params.len() != expected {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, the configuration needs {expected}",
                params.len()
            )));
        }
        let tok = &cfg.model.tokenizer;
        let cache = samples
            .iter()
            .map(|s| {
                if tok.fps_random_start {
                    Ok(None)
                } else {
                    prepare_inputs(&s.rgb, &s.depth, &s.cloud, tok, 0).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let budget = cfg.budget(teacher.is_some());
        Ok(Self {
            cfg,
            samples,
            cache,
            params,
            adam,
            rng,
            step,
            teacher,
            budget,
            perm: (u64::MAX, Vec::new()),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            config: self.cfg.to_text(),
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    fn sample_index(&mut self, position: u64) -> usize {
        let n = self.samples.len() as u64;
        let epoch = position / n;
        if self.perm.0 != epoch {
            let mut order: Vec<usize> = (0..self.samples.len()).collect();
            order.shuffle(&mut seeded(self.cfg.seed, SHUFFLE_STREAM + epoch));
            self.perm = (epoch, order);
        }
        self.perm.1[(position % n) as usize]
    }

    /// One optimization step over a batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let k = self.step + 1;
        let b = self.cfg.train.batch_size;
        let sizes = self.cfg.model.tokenizer.sizes();
        let mut g = Graph::<f32>::new();
        let mut losses = Vec::with_capacity(b);
        let mut sums = [0.0f64; 4];
        for j in 0..b {
            let idx = self.sample_index((k - 1) * b as u64 + j as u64);
            let plan = sample_plan(self.cfg.train.alpha, self.budget, sizes, &mut self.rng)?;
            let s = &self.samples[idx];
            let mut inputs = match &self.cache[idx] {
                Some(x) => x.clone(),
                None => {
                    let start = random_start(&s.cloud, &mut self.rng);
                    prepare_inputs(&s.rgb, &s.depth, &s.cloud, &self.cfg.model.tokenizer, start)?
                }
            };
            if self.cfg.train.color_jitter {
                let img = self.cfg.train.jitter.apply(&s.rgb, &mut self.rng);
                inputs = inputs.with_rgb(&img, self.cfg.model.tokenizer.patch)?;
            }
            let (terms, align, loss) = match &self.teacher {
                None => {
                    let f = forward(&mut g, &self.params, &self.cfg.model, &inputs, &plan, &[])?;
                    (f.terms, None, f.loss)
                }
                Some(t) => {
                    let taps = teacher_taps(&t.params, &t.cfg, &inputs, &plan, &t.spec.teacher_taps())?;
                    let d = distill_forward(&mut g, &self.params, &self.cfg.model, &t.spec, &taps, &inputs, &plan)?;
                    (d.forward.terms, Some(d.align), d.total)
                }
            };
            for (i, t) in terms.iter().enumerate() {
                sums[i] += g.value(*t).item().f64();
            }
            if let Some(a) = align {
                sums[3] += g.value(a).item().f64();
            }
            losses.push(loss);
        }
        let summed = losses[1..].iter().fold(losses[0], |acc, &l| g.add(acc, l));
        let loss = g.scale(summed, 1.0 / b as f32);
        let value = g.value(loss).item();
        let [rgb, depth, pc, align] = sums.map(|s| s / b as f64);
        let beta = self.teacher.as_ref().map_or(0.0, |t| t.spec.beta);
        let log = StepLog {
            step: k,
            lr: self.cfg.train.schedule.lr_at(k),
            rgb,
            depth,
            pc,
            align,
            total: rgb + depth + pc + beta * align,
        };
        if !value.is_finite() || !log.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: k,
                detail: format!("rgb {rgb}, depth {depth}, pc {pc}, align {align}"),
            });
        }
        let mut grads: Vec<Tensor<f32>> = g.backward(loss).param_grads_for(&self.params);
        for (name, gr) in self.params.names().iter().zip(&grads) {
            if !gr.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        adamw_step(&mut self.params, &grads, &mut self.adam, log.lr, &self.cfg.train.adam)?;
        self.step = k;
        Ok(log)
    }
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub logs: Vec<StepLog>,
    pub final_step: u64,
    pub checkpoint: PathBuf,
}

fn keep_rows_through(path: &Path, step: u64) -> Result<()> {
    let mut kept = vec![CSV_HEADER.to_string()];
    if path.exists() {
        for line in fs::read_to_string(path)?.lines().skip(1) {
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(LOSS_LOG, format!("malformed row `{line}`")))?;
            if s <= step {
                kept.push(line.to_string());
            }
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

/// Runs until `train.total_steps`, writing the effective config, the loss
/// log and checkpoints into `out`. With `resume`, training continues from
/// that checkpoint and log rows after its step are discarded.
pub fn train(
    cfg: &Config,
    samples: Vec<Sample>,
    teacher: Option<Teacher>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_text())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), samples, teacher, Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone(), samples, teacher)?,
    };
    let log_path = out.join(LOSS_LOG);
    keep_rows_through(&log_path, trainer.step_count())?;
    let mut log_file = OpenOptions::new().append(true).open(&log_path)?;
    let total = cfg.train.schedule.total_steps;
    let every = cfg.train.checkpoint_every;
    let last = out.join(LAST_CHECKPOINT);
    let mut logs = Vec::new();
    while trainer.step_count() < total {
        let row = trainer.step()?;
        writeln!(log_file, "{}", row.csv_row())?;
        log::info!("step {} lr {:.3e} loss {:.5}", row.step, row.lr, row.total);
        logs.push(row);
        let k = trainer.step_count();
        if (every > 0 && k % every == 0) || k == total {
            let ckpt = trainer.checkpoint();
            ckpt.save(&out.join(numbered_checkpoint(k)))?;
            ckpt.save(&last)?;
        }
    }
    if !last.exists() {
        trainer.checkpoint().save(&last)?;
    }
    Ok(TrainSummary {
        logs,
        final_step: trainer.step_count(),
        checkpoint: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;

    fn data(cfg: &Config, n: usize) -> Vec<Sample> {
        generate(n, 1, &cfg.scene()).unwrap()
    }

    #[test]
    fn epochs_visit_every_sample_once() {
        let cfg = Config::micro();
        let mut t = Trainer::new(cfg.clone(), data(&cfg, 5), None).unwrap();
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..5).map(|i| t.sample_index(epoch * 5 + i)).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn seeded_steps_repeat() {
        let cfg = Config::micro();
        let samples = data(&cfg, 4);
        let mut a = Trainer::new(cfg.clone(), samples.clone(), None).unwrap();
        let mut b = Trainer::new(cfg, samples, None).unwrap();
        for _ in 0..3 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn resume_requires_same_config() {
        let cfg = Config::micro();
        let samples = data(&cfg, 2);
        let t = Trainer::new(cfg.clone(), samples.clone(), None).unwrap();
        let mut other = cfg;
        other.seed = 99;
        assert!(matches!(
            Trainer::resume(other, samples, None, t.checkpoint()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            Trainer::new(Config::micro(), Vec::new(), None),
            Err(Error::Argument(_))
        ));
    }
}
