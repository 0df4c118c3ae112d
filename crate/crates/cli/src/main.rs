//! `mef`: batch fusion, training, evaluation and ablation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mef_core::color::{load_image, luma, save_image, save_plane};
use mef_core::config::FusionConfig;
use mef_core::gcm::{estimate_curves, gamma_iterations, gcm_curve_count, init_gcm_params};
use mef_core::pipeline::{forward_pipeline, init_model};
use mef_core::report::{
    ablation_csv, evaluate_dirs, holdout_split, metrics_csv, run_ablation, trace_row, TRACE_HEADER,
};
use mef_core::tensor::ModelParams;
use mef_core::trainer::{
    load_pairs, load_weights, save_weights, synthetic_pair, Checkpoint, LumaPair, Trainer,
};
use mef_core::Error;

#[derive(Parser)]
#[command(name = "mef", version, about = "Multi-exposure image fusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON configuration (defaults apply to missing keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the small desk-scale training preset.
    #[arg(long)]
    toy: bool,
}

impl ConfigArg {
    fn load(&self) -> Result<FusionConfig> {
        let cfg = match &self.config {
            Some(p) => FusionConfig::load(p)?,
            None => FusionConfig::default(),
        };
        Ok(if self.toy { cfg.toy() } else { cfg })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fuse an under- and an over-exposed image.
    Fuse {
        #[arg(long)]
        under: PathBuf,
        #[arg(long)]
        over: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `<stem>_under` / `<stem>_over` pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score fused images against their sources.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        under: PathBuf,
        #[arg(long)]
        over: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every gamma iteration of one image's luma.
    Gamma {
        #[arg(long = "in")]
        input: PathBuf,
        /// Weights with a curve estimator; a zero estimator when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out_prefix: String,
    },
    /// Train and score every entry of the ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic `<stem>_under.png` / `<stem>_over.png` pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write initial weights for a configuration.
    Init {
        #[command(flatten)]
        config: ConfigArg,
        /// All parameters zero instead of random.
        #[arg(long)]
        zero: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        }
        .into());
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory"),
        }
        .into());
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fuse(under: &Path, over: &Path, weights: &Path, cfg: &FusionConfig, out: &Path) -> Result<()> {
    for p in [under, over, weights] {
        require_file(p)?;
    }
    let start = Instant::now();
    let u = load_image::<f32>(under)?;
    let o = load_image::<f32>(over)?;
    let params: ModelParams<f32> = load_weights(weights)?;
    println!("load: {:.3}s", start.elapsed().as_secs_f64());
    let result = forward_pipeline(&o, &u, &params, cfg)?;
    for (stage, d) in &result.timings {
        println!("{stage}: {:.3}s", d.as_secs_f64());
    }
    save_image(&result.image, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train(data: &Path, cfg: &FusionConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    require_dir(data)?;
    if let Some(r) = resume {
        require_file(r)?;
    }
    let pairs = load_pairs::<f32>(data)?;
    let lumas: Vec<LumaPair<f32>> = pairs.iter().map(LumaPair::from).collect();
    let total = cfg.train.total_steps(lumas.len());
    let mut trainer = match resume {
        Some(r) => Trainer::from_checkpoint(cfg.clone(), &Checkpoint::load(r)?, total)?,
        None => {
            let params = init_model::<f32>(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            Trainer::new(cfg.clone(), params, total)
        }
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    log::info!("training on {} pairs for {total} steps", pairs.len());
    let every = cfg.train.checkpoint_every;
    let trace = trainer.run(&lumas, |r, t| {
        log::info!("step {} total {:.4}", r.step, r.losses.total);
        let done = r.step + 1;
        if every > 0 && done % every as u64 == 0 {
            t.checkpoint()
                .save(out.join(format!("checkpoint_{done:06}.bhfw")))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(out.join("final.bhfw"))?;
    let trace_path = out.join("loss_trace.csv");
    let mut csv = format!("{TRACE_HEADER}\n");
    if resume.is_some() && trace_path.is_file() {
        // keep the earlier rows, dropping any the resumed run repeats
        let first = trace.first().map_or(u64::MAX, |r| r.step);
        let old = fs::read_to_string(&trace_path)
            .with_context(|| format!("reading {}", trace_path.display()))?;
        for line in old.lines().skip(1) {
            let step = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
            if step.is_some_and(|s| s < first) {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    for r in &trace {
        csv.push_str(&trace_row(r));
    }
    write_text(&trace_path, &csv)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "steps {}..{} total loss {:.4} -> {:.4}",
            first.step, last.step, first.losses.total, last.losses.total
        );
    }
    println!("wrote {}", out.join("final.bhfw").display());
    Ok(())
}

fn eval(fused: &Path, under: &Path, over: &Path, cfg: &FusionConfig, out: &Path) -> Result<()> {
    for d in [fused, under, over] {
        require_dir(d)?;
    }
    let (rows, skipped) = evaluate_dirs(fused, under, over, cfg)?;
    for s in &skipped {
        log::warn!("{s}: not present in all three directories; skipped");
        eprintln!("warning: skipped unmatched image {s}");
    }
    if rows.is_empty() {
        bail!("no image names matched across the three directories");
    }
    write_text(out, &metrics_csv(&rows))?;
    println!("wrote {} ({} images)", out.display(), rows.len());
    Ok(())
}

fn gamma(input: &Path, weights: Option<&Path>, n: usize, prefix: &str) -> Result<()> {
    require_file(input)?;
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let params: ModelParams<f32> = match weights {
        Some(w) => {
            require_file(w)?;
            load_weights(w)?
        }
        None => {
            let mut p = ModelParams::new();
            init_gcm_params(&mut p, n, &mut ChaCha8Rng::seed_from_u64(0))?;
            p.zero_all();
            p
        }
    };
    match gcm_curve_count(&params) {
        Some(k) if k == n => {}
        Some(k) => bail!("weights estimate {k} curves but --n is {n}"),
        None => bail!("weights contain no curve estimator"),
    }
    let y = luma(&load_image::<f32>(input)?);
    let curves = estimate_curves(&y, &params)?;
    for (i, plane) in gamma_iterations(&y, &curves)?.iter().enumerate() {
        let path = PathBuf::from(format!("{prefix}{:02}.png", i + 1));
        save_plane(plane, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn ablate(data: &Path, cfg: &FusionConfig, out: &Path) -> Result<()> {
    require_dir(data)?;
    let pairs = load_pairs::<f32>(data)?;
    let (train, held) = holdout_split(&pairs);
    if pairs.len() < 2 {
        log::warn!("only one pair: training and scoring on the same image");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    println!("{} training pairs, {} held out", train.len(), held.len());
    let rows = run_ablation(&train, &held, cfg, &cfg.ablation_grid, |r| {
        println!(
            "{}: L_exp {:.4} PSNR {:.4}",
            r.name, r.l_exp, r.metrics.psnr
        );
    })?;
    let path = out.join("ablation.csv");
    write_text(&path, &ablation_csv(&rows))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if count == 0 || size == 0 {
        bail!("--count and --size must be positive");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count as u64 {
        let pair = synthetic_pair::<f32>(size, size, seed + i);
        save_image(&pair.under, out.join(format!("{}_under.png", pair.name)))?;
        save_image(&pair.over, out.join(format!("{}_over.png", pair.name)))?;
    }
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn init(cfg: &FusionConfig, zero: bool, out: &Path) -> Result<()> {
    let mut params = init_model::<f32>(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if zero {
        params.zero_all();
    }
    save_weights(&params, out)?;
    println!(
        "wrote {} ({} parameters)",
        out.display(),
        params.total_len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Fuse {
            under,
            over,
            weights,
            config,
            out,
        } => fuse(&under, &over, &weights, &config.load()?, &out),
        Command::Train {
            data,
            config,
            out,
            resume,
        } => train(&data, &config.load()?, &out, resume.as_deref()),
        Command::Eval {
            fused,
            under,
            over,
            config,
            out,
        } => eval(&fused, &under, &over, &config.load()?, &out),
        Command::Gamma {
            input,
            weights,
            n,
            out_prefix,
        } => gamma(&input, weights.as_deref(), n, &out_prefix),
        Command::Ablate { data, config, out } => ablate(&data, &config.load()?, &out),
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => synth(&out, count, size, seed),
        Command::Init { config, zero, out } => init(&config.load()?, zero, &out),
    }
}

/// Missing inputs exit with 2, every other failure with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let missing = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
    });
    if missing {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // causes are often already embedded in the outer message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
