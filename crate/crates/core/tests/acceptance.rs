//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use embodied_mae::autograd::Graph;
use embodied_mae::config::Config;
use embodied_mae::distill::{distill_forward, select_alignment_layers, teacher_taps, AlignRole, AlignmentSpec};
use embodied_mae::encoder::ScalePreset;
use embodied_mae::geometry::{farthest_point_sampling, unproject_depth, CameraIntrinsics, PointCloud};
use embodied_mae::gradcheck::run_gradcheck;
use embodied_mae::masking::{sample_plan, MaskPlan};
use embodied_mae::model::{prepare_inputs, reconstruct, ModalInputs, ModelConfig};
use embodied_mae::params::ParamStore;
use embodied_mae::probe::{run_probe, ProbeMode};
use embodied_mae::synthdata::{generate, Sample};
use embodied_mae::tokenizer::{DepthMap, Modality};
use embodied_mae::trainer::{numbered_checkpoint, train, Teacher, Trainer, LOSS_LOG};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut o = f();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed >= limit {
                o.pass = false;
                o.detail += &format!("; runtime limit {:.0?} exceeded", limit);
            }
        }
        println!(
            "criterion {id:>2} {} {name}: {} ({:.2}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
        if !o.pass {
            self.failed.push(id);
        }
    }
}

const SIZES: [usize; 3] = [196, 196, 196];

fn draw_plans() -> Vec<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..10_000).map(|_| sample_plan(1.0, 96, SIZES, &mut rng).unwrap()).collect()
}

fn budget_exactness() -> Outcome {
    let plans = draw_plans();
    let violations = plans
        .iter()
        .filter(|p| {
            let visible: usize = p.masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
            visible != 96 || p.counts.iter().sum::<usize>() != 96
        })
        .count();
    outcome(violations == 0, format!("{} plans, {violations} violations", plans.len()))
}

fn dirichlet_marginals() -> Outcome {
    let plans = draw_plans();
    let n = plans.len() as f64;
    let means: Vec<f64> = (0..3).map(|i| plans.iter().map(|p| p.lambda[i]).sum::<f64>() / n).collect();
    let mut rgb: Vec<f64> = plans.iter().map(|p| p.lambda[0]).collect();
    rgb.sort_by(f64::total_cmp);
    // Beta(1, 2) CDF.
    let cdf = |x: f64| 1.0 - (1.0 - x).powi(2);
    let ks = rgb
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let means_ok = means.iter().all(|m| (m - 1.0 / 3.0).abs() <= 0.02);
    outcome(
        means_ok && ks < 0.02,
        format!("means {:.4}/{:.4}/{:.4}, KS {ks:.4}", means[0], means[1], means[2]),
    )
}

/// Recomputes every distance to the selected set at each step.
fn fps_oracle(pts: &[[f64; 3]], n: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in pts.iter().enumerate() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel
                .iter()
                .map(|&s| (0..3).map(|a| (p[a] - pts[s][a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

fn fps_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let m = rng.random_range(1..=64);
        let pts: Vec<[f64; 3]> = (0..m)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0)])
            .collect();
        let n = rng.random_range(1..=m);
        let start = rng.random_range(0..m);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        if farthest_point_sampling(&cloud, n, start).unwrap() != fps_oracle(&pts, n, start) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 clouds, {mismatches} mismatches"))
}

fn geometry_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut count_ok = true;
    for _ in 0..20 {
        let (w, h) = (rng.random_range(8..48), rng.random_range(8..48));
        let intr = CameraIntrinsics::new(
            rng.random_range(20.0..200.0),
            rng.random_range(20.0..200.0),
            rng.random_range(0.0..w as f64 - 1.0),
            rng.random_range(0.0..h as f64 - 1.0),
            w,
            h,
        )
        .unwrap();
        let data: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.05f32..5.0)).collect();
        let depth = DepthMap::new(h, w, data).unwrap();
        let cloud = unproject_depth(&depth, &intr, 1).unwrap();
        count_ok &= cloud.len() == w * h;
        for (i, p) in cloud.points().iter().enumerate() {
            let (u, v, d) = ((i % w) as f64, (i / w) as f64, depth.data()[i] as f64);
            let ru = intr.fx * p[0] / p[2] + intr.cx;
            let rv = intr.fy * p[1] / p[2] + intr.cy;
            for (got, want) in [(ru, u), (rv, v), (p[2], d)] {
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
            }
            let lib = intr.project(*p);
            for (got, want) in [(lib.0, u), (lib.1, v), (lib.2, d)] {
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
            }
        }
    }
    outcome(count_ok && worst < 1e-6, format!("20 maps, max relative error {worst:.2e}"))
}

fn gradient_check() -> Outcome {
    let r = run_gradcheck(0, 16).unwrap();
    let families = ["decoder.mask_token", "decoder.modality_encoding", "align.", "patch.rgb", "points", "encoder"];
    let missing: Vec<&str> = families
        .iter()
        .filter(|f| !r.tensors.iter().any(|t| t.name.starts_with(**f)))
        .copied()
        .collect();
    let checked: usize = r.tensors.iter().map(|t| t.checked).sum();
    outcome(
        r.max_rel_err < 1e-3 && missing.is_empty(),
        format!(
            "{} tensors, {checked} entries, max relative error {:.2e}{}",
            r.tensors.len(),
            r.max_rel_err,
            if missing.is_empty() { String::new() } else { format!(", missing {missing:?}") }
        ),
    )
}

fn micro_samples(cfg: &Config) -> Vec<Sample> {
    generate(4, 7, &cfg.scene()).unwrap()
}

/// Mean loss over fixed (sample, plan) pairs drawn from a dedicated stream.
fn eval_loss(params: &ParamStore<f32>, cfg: &Config, inputs: &[ModalInputs<f32>]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7A1);
    let budget = cfg.budget(false);
    let sizes = cfg.model.tokenizer.sizes();
    let mut total = 0.0;
    let mut n = 0;
    for inp in inputs {
        for _ in 0..8 {
            let plan = sample_plan(cfg.train.alpha, budget, sizes, &mut rng).unwrap();
            total += reconstruct(params, &cfg.model, inp, &plan).unwrap().1.total;
            n += 1;
        }
    }
    total / n as f64
}

struct Overfit {
    cfg: Config,
    samples: Vec<Sample>,
    initial: ParamStore<f32>,
    trained: ParamStore<f32>,
}

fn overfit(state: &mut Option<Overfit>) -> Outcome {
    let cfg = Config::micro();
    let samples = micro_samples(&cfg);
    let inputs: Vec<ModalInputs<f32>> = samples
        .iter()
        .map(|s| prepare_inputs(&s.rgb, &s.depth, &s.cloud, &cfg.model.tokenizer, 0).unwrap())
        .collect();
    let mut t = Trainer::new(cfg.clone(), samples.clone(), None).unwrap();
    let initial = t.params().clone();
    let before = eval_loss(&initial, &cfg, &inputs);
    let mut first = None;
    let mut last = None;
    while t.step_count() < 500 {
        let row = t.step().unwrap();
        first.get_or_insert(row.total);
        last = Some(row.total);
    }
    let after = eval_loss(t.params(), &cfg, &inputs);
    let o = outcome(
        after < 0.2 * before,
        format!(
            "500 steps, eval loss {before:.4} -> {after:.4} (ratio {:.3}); batch loss {:.4} -> {:.4}",
            after / before,
            first.unwrap(),
            last.unwrap()
        ),
    );
    *state = Some(Overfit {
        trained: t.params().clone(),
        cfg,
        samples,
        initial,
    });
    o
}

fn distill_reduction() -> Outcome {
    let mut cfg = Config::micro();
    cfg.distill.beta = 0.0;
    let samples = micro_samples(&cfg);
    let mut tcfg = cfg.model.clone();
    tcfg.encoder.dim = 24;
    tcfg.encoder.depth = 4;
    let tparams = tcfg.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let teacher = Teacher::new(tcfg.clone(), tparams, &cfg).unwrap();
    let mut pre = Trainer::new(cfg.clone(), samples.clone(), None).unwrap();
    let mut dist = Trainer::new(cfg.clone(), samples.clone(), Some(teacher)).unwrap();
    let mut equal_steps = 0;
    let mut align_seen = 0.0;
    for _ in 0..20 {
        let a = pre.step().unwrap();
        let b = dist.step().unwrap();
        align_seen += b.align;
        if a.total.to_bits() == b.total.to_bits() && b.total.to_bits() == b.mae().to_bits() {
            equal_steps += 1;
        }
    }
    let shared_equal = pre.params().iter().all(|(n, t)| dist.params().get(n) == Some(t));

    // Additivity at beta = 1 in f64.
    let model = &cfg.model;
    let s = &samples[0];
    let inputs = prepare_inputs::<f64>(&s.rgb, &s.depth, &s.cloud, &model.tokenizer, 0).unwrap();
    let plan = sample_plan(1.0, 4, model.tokenizer.sizes(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tp = tcfg.init_params::<f64, _>(&mut rng).unwrap();
    let mut sp = model.init_params::<f64, _>(&mut rng).unwrap();
    for (n, t) in AlignmentSpec::layout(model.encoder.dim, tcfg.encoder.dim).materialize::<f64, _>(&mut rng).iter() {
        sp.insert(n, t.clone());
    }
    let align_terms = |spec: &AlignmentSpec| {
        let taps = teacher_taps(&tp, &tcfg, &inputs, &plan, &spec.teacher_taps()).unwrap();
        let mut g = Graph::new();
        let d = distill_forward(&mut g, &sp, model, spec, &taps, &inputs, &plan).unwrap();
        let terms: Vec<(AlignRole, f64)> = d.pair_terms.iter().map(|(r, v)| (*r, g.value(*v).item())).collect();
        (g.value(d.align).item(), terms)
    };
    let full_spec = AlignmentSpec::new(tcfg.encoder.depth, model.encoder.depth, 1.0, 1.0).unwrap();
    let (full, full_terms) = align_terms(&full_spec);
    let mut additive = true;
    let mut worst = 0.0f64;
    for role in AlignRole::ALL {
        let (reduced, terms) = align_terms(&full_spec.without(role));
        let removed = full_terms.iter().find(|(r, _)| *r == role).unwrap().1;
        additive &= terms.iter().all(|(r, v)| full_terms.iter().any(|(fr, fv)| fr == r && fv.to_bits() == v.to_bits()));
        additive &= reduced.to_bits() == terms.iter().map(|t| t.1).reduce(|a, b| a + b).unwrap().to_bits();
        let err = ((full - reduced) - removed).abs() / full.abs();
        worst = worst.max(err);
    }
    additive &= worst <= 1e-12;
    outcome(
        equal_steps == 20 && shared_equal && additive && align_seen > 0.0,
        format!(
            "beta=0: {equal_steps}/20 steps bit-identical, shared params identical: {shared_equal}; \
             beta=1: pair removal relative residual {worst:.1e}"
        ),
    )
}

fn layer_mapping() -> Outcome {
    let pairs = select_alignment_layers(24, 12).unwrap();
    let mid = pairs.iter().find(|p| p.role == AlignRole::Middle).unwrap();
    outcome(
        (mid.teacher_tap, mid.student_tap) == (18, 9),
        format!("(24, 12) -> middle pair ({}, {})", mid.teacher_tap, mid.student_tap),
    )
}

fn determinism_and_resume() -> Outcome {
    let mut cfg = Config::micro();
    cfg.train.schedule.total_steps = 30;
    cfg.train.checkpoint_every = 10;
    cfg.train.color_jitter = true;
    cfg.model.tokenizer.fps_random_start = true;
    let samples = micro_samples(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, resume: Option<&std::path::Path>| {
        let out = dir.path().join(name);
        train(&cfg, samples.clone(), None, &out, resume).unwrap();
        (fs::read_to_string(out.join(LOSS_LOG)).unwrap(), fs::read(out.join("checkpoint.bin")).unwrap())
    };
    let (a, ca) = run("a", None);
    let (b, cb) = run("b", None);
    let mid = dir.path().join("a").join(numbered_checkpoint(10));
    let (c, cc) = run("c", Some(&mid));
    let rows_a: Vec<&str> = a.lines().collect();
    let rows_c: Vec<&str> = c.lines().collect();
    let resumed = rows_c.len() - 1;
    let suffix_ok = resumed >= 10 && rows_c[1..] == rows_a[rows_a.len() - resumed..];
    outcome(
        a == b && ca == cb && suffix_ok && ca == cc,
        format!(
            "identical logs: {}, resumed {resumed} steps bit-exact: {suffix_ok}, final checkpoints equal: {}",
            a == b && ca == cb,
            ca == cc
        ),
    )
}

fn cross_modal(state: &Option<Overfit>) -> Outcome {
    let Some(o) = state else {
        return outcome(false, "criterion 6 did not produce a trained model");
    };
    let budget = o.cfg.budget(false);
    let s = &o.samples[0];
    let mode_b = ProbeMode::CrossModal(Modality::Depth);
    let trained = run_probe(&o.trained, &o.cfg.model, s, mode_b, budget, 1).unwrap().loss.rgb;
    let untrained = run_probe(&o.initial, &o.cfg.model, s, mode_b, budget, 1).unwrap().loss.rgb;
    let mut finite = true;
    for mode in [ProbeMode::NearTotal(Modality::Depth), mode_b, ProbeMode::Recolor] {
        let r = run_probe(&o.trained, &o.cfg.model, s, mode, budget, 1).unwrap();
        finite &= r.recon.all_finite() && r.loss.total.is_finite();
    }
    outcome(
        trained < untrained && finite,
        format!("depth->rgb mse trained {trained:.4} vs untrained {untrained:.4}; modes a/b/c finite: {finite}"),
    )
}

/// Transformer blocks, final norm and patch embedding of a plain ViT.
fn vit_oracle(dim: usize, depth: usize, patch: usize) -> usize {
    let c = dim;
    let block = (3 * c * c + 3 * c) + (c * c + c) + (4 * c * c + 4 * c) + (4 * c * c + c) + 4 * c;
    depth * block + 2 * c + (3 * patch * patch * c + c)
}

fn scale_presets() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in [ScalePreset::Small, ScalePreset::Base, ScalePreset::Large, ScalePreset::Giant] {
        let mut cfg: ModelConfig = Config::default().model;
        cfg.encoder = p.encoder();
        let enc = cfg.encoder.layout().num_elements() + cfg.encoder_layout().count_prefix("patch.rgb");
        let reference = p.reference_params().unwrap();
        let rel = (enc as f64 - reference) / reference;
        let oracle = vit_oracle(cfg.encoder.dim, cfg.encoder.depth, cfg.tokenizer.patch);
        ok &= rel.abs() <= 0.10 && enc == oracle;
        parts.push(format!("{} {:.1}M ({:+.1}%)", p.name(), enc as f64 / 1e6, 100.0 * rel));
    }
    outcome(ok, parts.join(", "))
}

fn main() {
    let mut r = Report { failed: Vec::new() };
    let secs = Duration::from_secs;
    r.run(1, "budget exactness", Some(secs(5)), budget_exactness);
    r.run(2, "dirichlet marginals", Some(secs(5)), dirichlet_marginals);
    r.run(3, "farthest point sampling oracle", Some(secs(1)), fps_agreement);
    r.run(4, "unproject/reproject round trip", Some(secs(1)), geometry_round_trip);
    r.run(5, "gradient verification", Some(secs(120)), gradient_check);
    let mut state = None;
    r.run(6, "overfit sanity", Some(secs(300)), || overfit(&mut state));
    r.run(7, "distillation reduction", None, distill_reduction);
    r.run(8, "alignment layer mapping", None, layer_mapping);
    r.run(9, "determinism and resume", None, determinism_and_resume);
    r.run(10, "cross-modal reconstruction", Some(secs(60)), || cross_modal(&state));
    r.run(11, "scale presets", None, scale_presets);
    if r.failed.is_empty() {
        println!("acceptance: all 11 criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", r.failed);
        std::process::exit(1);
    }
}
