use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stylegan::checkpoint::load_trainer;
use stylegan::dataset::load_dataset;
use stylegan::experiment::{run_experiment, write_sheets, Evaluator, ExperimentPlan, RunOptions, CHECKPOINT_FILE};
use stylegan::images::{save_grid, save_png};
use stylegan::latent::LatentSpace;
use stylegan::metrics::{write_reports, MetricReport};
use stylegan::report::emit_report;
use stylegan::sampling::{
    generate_images, mixing_grid, truncation_cutoff, truncation_sweep, w_center, DEFAULT_TRUNCATION_MAX_RESOLUTION,
};
use stylegan::{Generator, TruncationParams};

#[derive(Parser)]
#[command(name = "stylegan", version, about = "Train, sample and evaluate style-based generators")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "STYLEGAN_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a plan (file or preset) and write curves, sheets and reports.
    Train(TrainArgs),
    /// Write one PNG per seed.
    Generate(GenerateArgs),
    /// Coarse/middle/fine style-mixing sheet.
    Mix(MixArgs),
    /// Truncation sheet, one row per seed and one column per psi.
    TruncateSweep(SweepArgs),
    /// Evaluate FID-proxy, path lengths and separability for a run.
    Metrics(MetricsArgs),
    /// Curves and summary table across run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Plan file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset, `config_a` .. `config_f`.
    #[arg(long)]
    preset: Option<String>,
    /// Override a plan key, e.g. `--set train.batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl PlanArgs {
    fn plan(&self) -> Result<ExperimentPlan> {
        Ok(match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentPlan::load(path, &self.overrides)?,
            (None, Some(p)) => {
                let mut table = toml::Table::new();
                table.insert("preset".into(), toml::Value::String(p.clone()));
                ExperimentPlan::from_table(table, &self.overrides)?
            }
            (None, None) => bail!("pass --config or --preset"),
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    plan: PlanArgs,
    /// Continue from the run's checkpoint when present.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps (the run stays resumable).
    #[arg(long)]
    stop_after_steps: Option<u64>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Trainer checkpoint; the EMA generator is used.
    #[arg(long)]
    checkpoint: PathBuf,
}

impl CheckpointArgs {
    fn generator(&self) -> Result<Generator<f64>> {
        let (trainer, _) = load_trainer::<f32>(&self.checkpoint)
            .with_context(|| format!("loading {}", self.checkpoint.display()))?;
        Ok(trainer.gen_ema.cast())
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Seeds, e.g. `0-7` or `1,5,9`.
    #[arg(long, default_value = "0-7")]
    seeds: String,
    #[arg(long)]
    psi: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TRUNCATION_MAX_RESOLUTION)]
    truncation_max_resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, default_value = "0-3")]
    sources: String,
    #[arg(long, default_value = "100-101")]
    destinations: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, default_value = "0-3")]
    seeds: String,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,-0.5,0,0.5,0.7,1")]
    psis: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_TRUNCATION_MAX_RESOLUTION)]
    truncation_max_resolution: usize,
    #[arg(long, default_value_t = 4096)]
    w_center_samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Run directory holding `plan.toml` and the checkpoint.
    #[arg(long)]
    run: PathBuf,
    /// Override a plan key (metrics settings only matter here).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Also write sample, mixing and truncation sheets.
    #[arg(long)]
    sheets: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to compare.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
                if b < a {
                    bail!("empty seed range `{part}`");
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse()?),
        }
    }
    if seeds.is_empty() {
        bail!("no seeds in `{spec}`");
    }
    Ok(seeds)
}

fn train(root: &Path, args: &TrainArgs) -> Result<()> {
    let plan = args.plan.plan()?;
    let outcome = run_experiment(
        &plan,
        root,
        &RunOptions {
            resume: args.resume,
            stop_after_steps: args.stop_after_steps,
        },
    )?;
    if outcome.completed {
        println!(
            "{}: {} steps, {} images, checkpoint {}",
            outcome.dir.display(),
            outcome.step,
            outcome.images_seen,
            outcome.checkpoint_hash
        );
    } else {
        println!("{}: stopped at step {} (resumable)", outcome.dir.display(), outcome.step);
    }
    Ok(())
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let gen = args.ckpt.generator()?;
    let seeds = parse_seeds(&args.seeds)?;
    let truncation = match args.psi {
        Some(psi) => Some(TruncationParams {
            psi,
            w_bar: w_center(&gen, 4096, 0)?,
            layer_cutoff: truncation_cutoff(gen.config(), args.truncation_max_resolution),
        }),
        None => None,
    };
    let images = generate_images(&gen, &seeds, truncation.as_ref())?;
    std::fs::create_dir_all(&args.out)?;
    for (seed, img) in seeds.iter().zip(&images) {
        save_png(&args.out.join(format!("seed{seed:05}.png")), img)?;
    }
    println!("wrote {} images to {}", images.len(), args.out.display());
    Ok(())
}

fn mix(args: &MixArgs) -> Result<()> {
    let gen = args.ckpt.generator()?;
    let grid = mixing_grid(&gen, &parse_seeds(&args.sources)?, &parse_seeds(&args.destinations)?)?;
    save_grid(&args.out, &grid)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let gen = args.ckpt.generator()?;
    let w_bar = w_center(&gen, args.w_center_samples, 0)?;
    let cutoff = truncation_cutoff(gen.config(), args.truncation_max_resolution);
    let grid = truncation_sweep(&gen, &parse_seeds(&args.seeds)?, &args.psis, &w_bar, cutoff)?;
    save_grid(&args.out, &grid)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn metrics(args: &MetricsArgs) -> Result<()> {
    let plan = ExperimentPlan::load(&args.run.join("plan.toml"), &args.overrides)?;
    let (trainer, _) = load_trainer::<f32>(&args.run.join(CHECKPOINT_FILE))?;
    let gen: Generator<f64> = trainer.gen_ema.cast();
    let data = load_dataset(&plan.dataset)?;
    let eval = Evaluator::new(&plan.metrics, &data, &args.run.join("classifiers"))?;
    let hash = plan.config_hash()?;
    let cfg = plan.config_echo()?;
    let mut reports = Vec::new();
    let mut push = |metric: &str, space: &str, value: f64, started: std::time::Instant| {
        println!("{metric}{}{space} = {value:.6}", if space.is_empty() { "" } else { "_" });
        reports.push(MetricReport {
            metric: metric.into(),
            space: space.into(),
            value,
            config_hash: hash.clone(),
            seed: plan.metrics.seed,
            config: cfg.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    };
    let t = std::time::Instant::now();
    push("fid_proxy", "", eval.fid(&gen)?, t);
    for space in [LatentSpace::Z, LatentSpace::W] {
        let t = std::time::Instant::now();
        push("ppl", space.as_str(), eval.ppl(&gen, space)?, t);
        let t = std::time::Instant::now();
        if let Some(s) = eval.separability(&gen, space)? {
            push("separability", space.as_str(), s, t);
        }
    }
    let out = args.run.join("metrics");
    write_reports(&out, &reports)?;
    if args.sheets {
        write_sheets(&gen, &plan.outputs, &out)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => train(&cli.output_root, a),
        Command::Generate(a) => generate(a),
        Command::Mix(a) => mix(a),
        Command::TruncateSweep(a) => sweep(a),
        Command::Metrics(a) => metrics(a),
        Command::Report(a) => {
            let r = emit_report(&a.runs, &a.out)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} files to {}", r.files.len(), a.out.display());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0-3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("5, 1,2-3").unwrap(), vec![5, 1, 2, 3]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["stylegan", "truncate-sweep", "--checkpoint", "c", "--psis", "-1,0.5", "--out", "o"]).unwrap();
        match cli.command {
            Command::TruncateSweep(a) => assert_eq!(a.psis, vec![-1.0, 0.5]),
            _ => panic!("wrong subcommand"),
        }
    }
}
