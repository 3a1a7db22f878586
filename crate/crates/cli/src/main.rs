use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use regalign::par;
use regalign::pipeline::{Run, RunConfig};
use regalign::vlm::VlmVariant;

#[derive(Parser)]
#[command(name = "regalign", version, about = "Region-attribute alignment lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory.
    #[arg(long, visible_alias = "out", default_value = "runs/default")]
    run_dir: PathBuf,
    /// Config file; defaults to the run directory's config.txt when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set vlm.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set gen.c=...`.
    #[arg(long)]
    c: Option<f64>,
    /// Shorthand for `--set gen.b=...`.
    #[arg(long)]
    b: Option<usize>,
    /// Shorthand for `--set gen.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "VILLA_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset.
    Generate(Common),
    /// Train the region-attribute mapping model.
    TrainMap(Common),
    /// Write trained-mapping, zero-shot and random region-attribute pairs.
    Assign(Common),
    /// Train VLM variants.
    TrainVlm {
        #[command(flatten)]
        common: Common,
        /// Variant to train; repeatable. Defaults to `vlm.variants`.
        #[arg(long, value_parser = parse_variant)]
        variant: Vec<VlmVariant>,
    },
    /// Retrieval and mapping-quality metrics for every configured variant.
    Evaluate(Common),
    /// Complexity sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Seeds averaged per point.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Render the comparison table.
    Report(Common),
    /// Every stage in order.
    RunAll {
        #[command(flatten)]
        common: Common,
        /// Also run the complexity sweep.
        #[arg(long)]
        sweep: bool,
    },
}

fn parse_variant(s: &str) -> Result<VlmVariant, String> {
    VlmVariant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = VlmVariant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let file = common
        .config
        .clone()
        .or_else(|| Some(common.run_dir.join("config.txt")).filter(|p| p.exists()));
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(c) = common.c {
        cfg.set("gen.c", &c.to_string())?;
    }
    if let Some(b) = common.b {
        cfg.set("gen.b", &b.to_string())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("gen.seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn open(common: &Common, tweak: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<Run> {
    let mut cfg = load_config(common)?;
    tweak(&mut cfg)?;
    Ok(Run::new(&common.run_dir, cfg)?)
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate(common) => {
            let run = open(&common, |_| Ok(()))?;
            let ds = par::with_threads(common.threads, || run.generate())?;
            println!(
                "{} samples, {} pairs, s = {:.3} -> {}",
                ds.samples.len(),
                ds.total_pairs(),
                ds.realized_s,
                show(&run.path("dataset"))
            );
        }
        Command::TrainMap(common) => {
            let run = open(&common, |_| Ok(()))?;
            let curve = par::with_threads(common.threads, || run.train_map())?;
            println!(
                "mapping: {} epochs, loss {:.4} -> {:.4}",
                curve.len(),
                curve.first().copied().unwrap_or(f64::NAN),
                curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Assign(common) => {
            let run = open(&common, |_| Ok(()))?;
            let rec = par::with_threads(common.threads, || run.assign())?;
            println!(
                "pairs: villa {}, zero-shot {}, random {}",
                rec.villa_pairs, rec.zs_pairs, rec.random_pairs
            );
        }
        Command::TrainVlm { common, variant } => {
            let run = open(&common, |_| Ok(()))?;
            let variants = if variant.is_empty() {
                run.cfg.variants.clone()
            } else {
                variant
            };
            for v in variants {
                let curve = par::with_threads(common.threads, || run.train_vlm(v))?;
                match (curve.first(), curve.last()) {
                    (Some(a), Some(b)) => println!("{v}: {} epochs, loss {a:.4} -> {b:.4}", curve.len()),
                    _ => println!("{v}: untrained"),
                }
            }
        }
        Command::Evaluate(common) => {
            let run = open(&common, |_| Ok(()))?;
            par::with_threads(common.threads, || run.evaluate())?;
            println!("wrote {}", show(&run.path("metrics.csv")));
        }
        Command::Sweep { common, seeds } => {
            let run = open(&common, |cfg| {
                if let Some(n) = seeds {
                    cfg.set("eval.seeds", &n.to_string())?;
                }
                Ok(())
            })?;
            par::with_threads(common.threads, || run.sweep())?;
            println!("wrote {}", show(&run.path("sweep.csv")));
        }
        Command::Report(common) => {
            let run = open(&common, |_| Ok(()))?;
            print!("{}", run.report()?);
        }
        Command::RunAll { common, sweep } => {
            let run = open(&common, |_| Ok(()))?;
            print!("{}", par::with_threads(common.threads, || run.run_all(sweep))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<regalign::Error>()
                .map_or(1, regalign::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
