//! `gipo`: training runs, exact bias-variance studies, bound checks and
//! figures.

mod config;
mod plots;
mod svg;
mod table;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};

use gipo_core::diagnostics::{window_mean, MetricRow, DEFAULT_WINDOW_FRAC};
use gipo_core::mdp::{default_baselines, gridworld, log_grid, pareto_sweep, write_points_csv, BehaviorCase};
use gipo_core::policy::SoftmaxTabularPolicy;
use gipo_core::registry::Params;
use gipo_core::runtime::{train, TrainReport};
use gipo_core::surrogate::SurrogateKind;
use gipo_core::verify;

use config::RunConfig;
use table::Table;

#[derive(Parser)]
#[command(name = "gipo", version, about = "Gaussian importance-weighted policy optimization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training job from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long, env = "GIPO_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Exact bias and variance on the 2x2 grid for each behavior case.
    Biasvar {
        /// A, B or C; all three when omitted.
        #[arg(long)]
        case: Option<String>,
        /// `lo:hi:n` (log-spaced) or a comma-separated list.
        #[arg(long, default_value = "0.05:50:25")]
        sigma_grid: String,
        #[arg(long, env = "GIPO_OUT_DIR", default_value = "runs/biasvar")]
        out: PathBuf,
    },
    /// Train GIPO once per sigma (and seed) and summarise the final window.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0.25,0.5,1,2,4")]
        sigma_grid: String,
        /// Comma-separated seeds; the config seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long, env = "GIPO_OUT_DIR", default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Render a figure to SVG.
    Plot {
        /// Figure kind; run with an unknown kind to list them.
        kind: String,
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Numerical checks of the weight and its bounds.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.output.dir = out;
            }
            let report = run_training(&cfg)?;
            let summary = Summary::of(&report)?;
            println!(
                "completed {} updates, {} env steps; final-window return {}, near-zero {:.4}, d95 {:.4}",
                report.manifest.updates,
                report.manifest.end_env_steps,
                fmt_opt(summary.final_return),
                summary.near_zero_frac,
                summary.d95,
            );
            println!("artifacts in {}", cfg.output.dir.display());
        }
        Command::Biasvar { case, sigma_grid, out } => biasvar(case.as_deref(), &parse_grid(&sigma_grid)?, &out)?,
        Command::Sweep {
            config,
            sigma_grid,
            seed,
            out,
        } => sweep(&RunConfig::load(&config)?, &parse_grid(&sigma_grid)?, &seed, &out)?,
        Command::Plot {
            kind,
            inputs,
            output,
            sigma,
            eps,
        } => plot(&kind, &inputs, &output, sigma, eps)?,
        Command::Verify { seed } => {
            let outcomes = verify::run_all(seed);
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} checks, {failed} failed", outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Writes the resolved config next to the run artifacts, then trains.
fn run_training(cfg: &RunConfig) -> Result<TrainReport> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let report = train(&cfg.regime, &cfg.learner, &cfg.env, cfg.seed, &cfg.train_options(dir))
        .with_context(|| format!("training run in {}", dir.display()))?;
    Ok(report)
}

/// Accepts `lo:hi:n` for a log-spaced grid or a comma-separated list.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let grid = match spec.split(':').collect::<Vec<_>>().as_slice() {
        [lo, hi, n] => log_grid(
            lo.trim().parse().context("grid lower end")?,
            hi.trim().parse().context("grid upper end")?,
            n.trim().parse().context("grid size")?,
        )?,
        [list] => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("invalid sigma {v:?}")))
            .collect::<Result<_>>()?,
        _ => bail!("sigma grid must be `lo:hi:n` or a comma list, got {spec:?}"),
    };
    ensure!(
        grid.iter().all(|s| s.is_finite() && *s > 0.0),
        "sigma values must be positive and finite"
    );
    Ok(grid)
}

fn biasvar(case: Option<&str>, grid: &[f64], out: &Path) -> Result<()> {
    let cases = match case {
        Some(id) => vec![BehaviorCase::by_id(id)?],
        None => BehaviorCase::standard().to_vec(),
    };
    let mdp = gridworld(2, 2, 0.99)?;
    let target = SoftmaxTabularPolicy::uniform_logits(mdp.n_states(), &[0.0, 1.0, 0.0, 1.0])?;
    let sweeps = cases
        .iter()
        .map(|c| {
            let mu = c.table(mdp.n_states())?;
            pareto_sweep(&mdp, &target, &c.id, &mu, grid, &default_baselines(), 0)
        })
        .collect::<gipo_core::Result<Vec<_>>>()?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("biasvar.csv");
    write_points_csv(BufWriter::new(File::create(&csv_path)?), &sweeps.iter().collect::<Vec<_>>(), true)?;
    plot("biasvar_pareto", &[csv_path.clone()], &out.join("biasvar_pareto.svg"), None, None)?;

    for s in &sweeps {
        let frontier = s.gipo_frontier().len();
        let noclip = s.point("no_clip").map(|p| p.bias).unwrap_or(f64::NAN);
        println!("case {}: {frontier} GIPO frontier points, no-clip bias {noclip:.3e}", s.case);
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// Final-window summaries of one run.
struct Summary {
    final_return: Option<f64>,
    near_zero_frac: f64,
    d95: f64,
    old_frac: f64,
}

impl Summary {
    fn of(report: &TrainReport) -> Result<Self> {
        let column = |f: fn(&MetricRow) -> Option<f64>| -> Result<Option<f64>> {
            let pts: Vec<(u64, f64)> = report.metrics.iter().filter_map(|r| Some((r.env_steps, f(r)?))).collect();
            Ok(if pts.is_empty() {
                None
            } else {
                Some(window_mean(&pts, DEFAULT_WINDOW_FRAC)?)
            })
        };
        let need = |v: Option<f64>| v.context("run produced no metric rows");
        // Without an exact evaluator, fall back to the tail of episode returns.
        let final_return = column(|r| r.avg_return)?.or_else(|| {
            let eps = &report.episode_returns;
            let tail = &eps[eps.len() - (eps.len() as f64 * DEFAULT_WINDOW_FRAC).ceil() as usize..];
            (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
        });
        Ok(Self {
            final_return,
            near_zero_frac: need(column(|r| Some(r.near_zero_frac))?)?,
            d95: need(column(|r| Some(r.d95))?)?,
            old_frac: need(column(|r| Some(r.old_frac))?)?,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn sweep(base: &RunConfig, grid: &[f64], seeds: &[u64], out: &Path) -> Result<()> {
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("sigma_sweep.csv");
    let mut csv = csv::Writer::from_path(&csv_path)?;
    csv.write_record(["sigma", "seed", "final_return", "near_zero_frac", "d95", "old_frac"])?;
    for &sigma in grid {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.learner.surrogate = SurrogateKind::Gipo { sigma };
            cfg.output.dir = out.join(format!("sigma_{sigma}_seed_{seed}"));
            cfg.validate()?;
            let s = Summary::of(&run_training(&cfg)?)?;
            let final_return = s
                .final_return
                .with_context(|| format!("sigma {sigma}, seed {seed}: no return was recorded"))?;
            println!("sigma {sigma} seed {seed}: final-window return {final_return:.4}");
            csv.write_record([
                sigma.to_string(),
                seed.to_string(),
                final_return.to_string(),
                s.near_zero_frac.to_string(),
                s.d95.to_string(),
                s.old_frac.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    drop(csv);
    plot("sigma_sensitivity", &[csv_path.clone()], &out.join("sigma_sensitivity.svg"), None, None)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn plot(kind: &str, inputs: &[PathBuf], output: &Path, sigma: Option<f64>, eps: Option<f64>) -> Result<()> {
    let params: Params = [("sigma", sigma), ("eps", eps)]
        .into_iter()
        .filter_map(|(k, v)| Some((k.to_string(), v?)))
        .collect();
    let figure = plots::registry().build(kind, &params)?;
    ensure!(
        inputs.len() >= figure.min_inputs(),
        "plot `{kind}` needs at least {} --input file(s)",
        figure.min_inputs()
    );
    let tables = inputs.iter().map(|p| Table::read(p)).collect::<Result<Vec<_>>>()?;
    let svg = figure.render(&tables)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(output, svg).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let g = parse_grid("0.1:10:3").unwrap();
        assert!((g[1] - 1.0).abs() < 1e-12 && g.len() == 3);
        assert_eq!(parse_grid("0.5, 2").unwrap(), vec![0.5, 2.0]);
        assert!(parse_grid("0:1:3").is_err());
        assert!(parse_grid("1,-2").is_err());
        assert!(parse_grid("1:2").is_err());
    }
}
