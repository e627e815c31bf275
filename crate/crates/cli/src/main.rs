use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};

use embodied_mae::checkpoint::Checkpoint;
use embodied_mae::config::{parse_override, Config};
use embodied_mae::dataset::{read_dataset, write_dataset};
use embodied_mae::gradcheck::run_gradcheck;
use embodied_mae::masking::sample_plan;
use embodied_mae::probe::{image_grid, point_list, run_probe, ProbeMode};
use embodied_mae::synthdata::generate;
use embodied_mae::tokenizer::Modality;
use embodied_mae::trainer::{train, Teacher, CONFIG_ECHO};
use embodied_mae::{Error, Result};

#[derive(Parser)]
#[command(name = "emae", version, about = "Multi-modal masked autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pre-train with masked autoencoding.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Distill a student from the teacher named by `distill.teacher`.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one sample under a masking mode.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id from the dataset manifest.
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// a: two modalities almost fully masked; b: one modality visible;
        /// c: re-color probe; none: nothing masked.
        #[arg(long, default_value = "b")]
        mode: String,
        /// Modality kept visible in modes a and b.
        #[arg(long, default_value = "depth")]
        source: String,
        /// Visible-token budget (defaults to the training budget).
        #[arg(long)]
        budget: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Statistics of sampled mask allocations.
    MaskStats {
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 96)]
        budget: usize,
        #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
        draws: u64,
        /// Tokens per modality as `rgb,depth,pc`.
        #[arg(long, default_value = "196,196,196")]
        sizes: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference gradient check on the micro model.
    Gradcheck {
        /// Entries checked per parameter tensor.
        #[arg(long, default_value_t = 8)]
        per_tensor: usize,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn resolve(base: Config, run: &RunArgs) -> Result<Config> {
    let mut overrides = run
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = run.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let text = run.config.as_deref().map(fs::read_to_string).transpose()?;
    Config::resolve(base, text.as_deref(), &overrides)
}

fn echo(cfg: &Config, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_text())?;
    Ok(())
}

fn gen_data(count: u64, run: &RunArgs) -> Result<()> {
    let cfg = resolve(Config::default(), run)?;
    let out = run.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let samples = generate(count as usize, cfg.seed, &cfg.scene())?;
    let manifest = write_dataset(&samples, &out)?;
    echo(&cfg, &out)?;
    println!(
        "wrote {} samples to {} (shard sha256 {})",
        manifest.records.len(),
        out.display(),
        manifest.shard_digest
    );
    Ok(())
}

fn run_training(run: &RunArgs, resume: Option<&Path>, distill: bool) -> Result<()> {
    let cfg = resolve(Config::default(), run)?;
    let out = run
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(if distill { "runs/distill" } else { "runs/train" }));
    if !cfg.data.dir.join(embodied_mae::dataset::MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "no dataset at {} (run gen-data or set data.dir)",
            cfg.data.dir.display()
        )));
    }
    let teacher = if distill { Some(Teacher::load(&cfg)?) } else { None };
    let samples = read_dataset(&cfg.data.dir)?.read_all()?;
    let summary = train(&cfg, samples, teacher, &out, resume)?;
    match summary.logs.last() {
        Some(last) => println!(
            "step {} loss {} (rgb {}, depth {}, pc {}, align {}); checkpoint {}",
            last.step,
            last.total,
            last.rgb,
            last.depth,
            last.pc,
            last.align,
            summary.checkpoint.display()
        ),
        None => println!("nothing to do: already at step {}", summary.final_step),
    }
    Ok(())
}

fn reconstruct(
    checkpoint: &Path,
    sample: u64,
    mode: &str,
    source: &str,
    budget: Option<usize>,
    run: &RunArgs,
) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let cfg = resolve(Config::from_text(&ckpt.config)?, run)?;
    let mode = ProbeMode::parse(mode, Some(source))?;
    let budget = budget.unwrap_or_else(|| cfg.budget(cfg.distill.teacher.is_some()));
    let reader = read_dataset(&cfg.data.dir)?;
    let idx = reader
        .position(sample)
        .ok_or_else(|| Error::Argument(format!("sample {sample} is not in {}", cfg.data.dir.display())))?;
    let s = reader.get(idx)?;
    let result = run_probe(&ckpt.params, &cfg.model, &s, mode, budget, cfg.seed)?;
    if !result.recon.all_finite() {
        return Err(Error::Internal("reconstruction contains non-finite values".into()));
    }
    let out = run.out.clone().unwrap_or_else(|| PathBuf::from("runs/reconstruct"));
    echo(&cfg, &out)?;
    fs::write(out.join("grid.ppm"), image_grid(&result, &cfg.model)?.to_ppm())?;
    fs::write(out.join("points.txt"), point_list(&result))?;
    println!("visible tokens (rgb, depth, pc): {:?}", result.plan.counts);
    if let Some(p) = result.recolored {
        println!("recolored rgb patch {p}");
    }
    println!(
        "masked-token mse: rgb {} depth {} pc {} total {}",
        result.loss.rgb, result.loss.depth, result.loss.pc, result.loss.total
    );
    println!("wrote {} and {}", out.join("grid.ppm").display(), out.join("points.txt").display());
    Ok(())
}

fn ks_statistic(values: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn mask_stats(alpha: f64, budget: usize, draws: u64, sizes: &str, run: &RunArgs) -> Result<()> {
    let cfg = resolve(Config::default(), run)?;
    let parsed: Vec<usize> = sizes
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Argument(format!("invalid sizes `{sizes}`"))))
        .collect::<Result<_>>()?;
    let sizes: [usize; 3] = parsed
        .try_into()
        .map_err(|_| Error::Argument("--sizes needs three values".into()))?;
    let marginal = Beta::new(alpha, 2.0 * alpha)
        .map_err(|e| Error::Argument(format!("alpha {alpha}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lambdas: [Vec<f64>; 3] = Default::default();
    let mut violations = 0u64;
    for _ in 0..draws {
        let plan = sample_plan(alpha, budget, sizes, &mut rng)?;
        let visible: usize = plan.masks.iter().flatten().filter(|&&v| v).count();
        if plan.total_visible() != budget || visible != budget {
            violations += 1;
        }
        for (i, l) in plan.lambda.iter().enumerate() {
            lambdas[i].push(*l);
        }
    }
    let mut report = format!("alpha {alpha}, budget {budget}, sizes {sizes:?}, draws {draws}\n");
    for m in Modality::ALL {
        let v = &mut lambdas[m.index()];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let ks = ks_statistic(v, |x| marginal.cdf(x));
        let mut hist = [0u64; 10];
        for &x in v.iter() {
            hist[((x * 10.0) as usize).min(9)] += 1;
        }
        report += &format!("{:<5} mean lambda {mean:.4}  KS vs Beta({alpha}, {}) {ks:.4}\n", m.name(), 2.0 * alpha);
        for (b, c) in hist.iter().enumerate() {
            let bar = "#".repeat((*c as f64 / draws as f64 * 200.0).round() as usize);
            report += &format!("  [{:.1}, {:.1}) {c:>7} {bar}\n", b as f64 / 10.0, (b + 1) as f64 / 10.0);
        }
    }
    report += &format!("budget violations: {violations}\n");
    print!("{report}");
    if let Some(out) = &run.out {
        echo(&cfg, out)?;
        fs::write(out.join("mask_stats.txt"), &report)?;
    }
    Ok(())
}

fn gradcheck(per_tensor: usize, run: &RunArgs) -> Result<bool> {
    let cfg = resolve(Config::micro(), run)?;
    let report = run_gradcheck(cfg.seed, per_tensor.max(1))?;
    let mut text = String::new();
    for t in &report.tensors {
        text += &format!("{:<40} {:>3} entries  max rel err {:.3e}\n", t.name, t.checked, t.max_rel_err);
    }
    text += &format!(
        "max relative error {:.3e} (tolerance {:.0e}): {}\n",
        report.max_rel_err,
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    print!("{text}");
    if let Some(out) = &run.out {
        echo(&cfg, out)?;
        fs::write(out.join("gradcheck.txt"), &text)?;
    }
    Ok(report.passed())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { count, run } => gen_data(*count, run),
        Command::Train { run, resume } => run_training(run, resume.as_deref(), false),
        Command::Distill { run, resume } => run_training(run, resume.as_deref(), true),
        Command::Reconstruct {
            checkpoint,
            sample,
            mode,
            source,
            budget,
            run,
        } => reconstruct(checkpoint, *sample, mode, source, *budget, run),
        Command::MaskStats {
            alpha,
            budget,
            draws,
            sizes,
            run,
        } => mask_stats(*alpha, *budget, *draws, sizes, run),
        Command::Gradcheck { per_tensor, run } => match gradcheck(*per_tensor, run) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
