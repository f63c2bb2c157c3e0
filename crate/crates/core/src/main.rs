use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gladmamba::checkpoint::{atomic_write, Checkpoint};
use gladmamba::config::{parse_seed_list, RunConfig, DATA_ROOT_ENV};
use gladmamba::model::Variant;
use gladmamba::report::{self, BenchRow};
use gladmamba::train::{self, run_dir};

#[derive(Parser)]
#[command(name = "gladmamba", version, about = "Unsupervised graph-level anomaly detection on TU datasets")]
struct Cli {
    /// Directory holding one sub-directory of TU text files per dataset.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Repeat for more detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config file, e.g. `encoder.kind = "gin"`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; defaults to `out_dir` from the config (`runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one dataset.
    Train {
        #[arg(long)]
        dataset: String,
        /// Single seed; overrides the configured seed list.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed list such as `0..4` or `0,3`.
        #[arg(long)]
        seeds: Option<String>,
        /// Ablation variant: vfm, sgm, mamba, vf-ssm, sg-ssm (or the no-* names).
        #[arg(long)]
        ablate: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-score the test split stored in a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<String>,
        /// Write per-graph scores and embeddings as CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Per-class spectral energy curves of the node features.
    Spectral {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// AUC table over datasets, variants and an optional hyper-parameter grid.
    Bench {
        /// Comma-separated dataset names.
        #[arg(long, value_delimiter = ',', required = true)]
        datasets: Vec<String>,
        #[arg(long, default_value = "0..4")]
        seeds: String,
        /// Comma-separated variants; `all` runs every ablation.
        #[arg(long, value_delimiter = ',', default_value = "none")]
        variants: Vec<String>,
        /// `key=v1,v2,...`; repeatable, swept as a Cartesian product.
        #[arg(long, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Train { dataset, seed, seeds, ablate, cfg } => {
            let mut overrides = cfg.overrides.clone();
            if let Some(v) = ablate {
                overrides.push(format!("variant=\"{}\"", v.parse::<Variant>()?));
            }
            let mut run = resolve(&dataset, &cfg, &overrides)?;
            if let Some(s) = seed {
                run.seeds = vec![s];
            } else if let Some(s) = seeds {
                run.seeds = parse_seed_list(&s)?;
            }
            let ds = train::load_dataset(&run, root).with_context(|| format!("loading {}", run.dataset_dir(root).display()))?;
            let out = run_dir(&run);
            let m = train::run_experiment(&run, &ds, Some(&out))?;
            for s in &m.seeds {
                println!("seed {}: AUC {:.4}  final loss {}  ({:.1}s)", s.seed, s.auc, s.final_loss.map_or("-".into(), |l| format!("{l:.5}")), s.wall_clock_secs);
            }
            println!("{} [{}] AUC {:.2}±{:.2} over {} seed(s); artifacts in {}", m.dataset, m.variant, 100.0 * m.auc_mean, 100.0 * m.auc_std, m.seeds.len(), out.display());
        }
        Command::Eval { checkpoint, dataset, scores } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let mut run = ckpt.run.clone();
            if let Some(d) = dataset {
                if d != run.dataset {
                    log::warn!("checkpoint was trained on {}, evaluating on {d}", run.dataset);
                }
                run.dataset = d;
            }
            let ds = train::load_dataset(&run, root).with_context(|| format!("loading {}", run.dataset_dir(root).display()))?;
            let report = train::evaluate_checkpoint(&ckpt, &ds)?;
            if let Some(path) = scores {
                atomic_write(&path, train::scores_csv(&report).as_bytes())?;
            }
            println!("{}: AUC {:.4} on {} test graphs", run.dataset, report.auc, report.scores.len());
        }
        Command::Spectral { dataset, out, config, overrides } => {
            let run = RunConfig::resolve(Some(&dataset), config.as_deref(), &overrides)?;
            let ds = train::load_dataset(&run, root).with_context(|| format!("loading {}", run.dataset_dir(root).display()))?;
            let s = report::spectral_summary(&ds, &run)?;
            report::write_spectral_report(&s, &out)?;
            println!(
                "{}: top-quartile energy anomaly {:.4} vs normal {:.4} ({}); max |sum-1| {:.2e}; skipped {} zero-signal, {} oversized",
                s.dataset,
                s.anomaly.mean_top_quartile_energy,
                s.normal.mean_top_quartile_energy,
                s.top_quartile_direction(),
                s.max_energy_sum_error,
                s.skipped_zero_signal,
                s.skipped_too_large
            );
        }
        Command::Bench { datasets, seeds, variants, grid, cfg } => {
            let seeds = parse_seed_list(&seeds)?;
            let variants: Vec<Variant> = if variants.iter().any(|v| v == "all") {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
            };
            let cells = grid_cells(&grid)?;
            let mut rows = Vec::new();
            let mut out_root = None;
            for name in &datasets {
                for cell in &cells {
                    for &variant in &variants {
                        let mut overrides = cfg.overrides.clone();
                        overrides.extend(cell.iter().cloned());
                        overrides.push(format!("variant=\"{variant}\""));
                        let mut run = resolve(name, &cfg, &overrides)?;
                        run.seeds = seeds.clone();
                        if !cell.is_empty() {
                            run.out_dir = run.out_dir.join(cell.join("_").replace(['=', '"', '/'], "-"));
                        }
                        out_root.get_or_insert_with(|| run.out_dir.clone());
                        let ds = train::load_dataset(&run, root).with_context(|| format!("loading {}", run.dataset_dir(root).display()))?;
                        let m = train::run_experiment(&run, &ds, Some(&run_dir(&run)))?;
                        println!("{name} [{variant}] {} AUC {:.2}±{:.2}", cell.join(" "), 100.0 * m.auc_mean, 100.0 * m.auc_std);
                        rows.push(BenchRow::from_metrics(&m, cell));
                    }
                }
            }
            let out = cfg.out.clone().or(out_root).unwrap_or_else(|| PathBuf::from("runs"));
            write_bench(&rows, &out)?;
            print!("{}", report::bench_markdown(&rows));
        }
    }
    Ok(())
}

fn resolve(dataset: &str, cfg: &ConfigArgs, overrides: &[String]) -> Result<RunConfig> {
    let mut run = RunConfig::resolve(Some(dataset), cfg.config.as_deref(), overrides)?;
    if let Some(out) = &cfg.out {
        run.out_dir = out.clone();
    }
    Ok(run)
}

/// Cartesian product of `key=v1,v2` specs as lists of `key=value` overrides.
fn grid_cells(specs: &[String]) -> Result<Vec<Vec<String>>> {
    let mut cells = vec![Vec::new()];
    for spec in specs {
        let Some((key, values)) = spec.split_once('=') else { bail!("grid spec {spec:?} is not key=v1,v2") };
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            bail!("grid spec {spec:?} has no values");
        }
        cells = cells.into_iter().flat_map(|c| values.iter().map(move |v| [c.clone(), vec![format!("{}={v}", key.trim())]].concat())).collect();
    }
    Ok(cells)
}

fn write_bench(rows: &[BenchRow], out: &Path) -> Result<()> {
    atomic_write(&out.join("bench.md"), report::bench_markdown(rows).as_bytes())?;
    atomic_write(&out.join("bench.csv"), report::bench_csv(rows).as_bytes())?;
    atomic_write(&out.join("bench.json"), &serde_json::to_vec_pretty(rows)?)?;
    Ok(())
}
