//! `gmfs`: train, execute, sweep, diagnose and inspect.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 budget
//! exceeded, 4 a diagnostic suite failed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gmfs_core::bellman::{load_qtable, save_qtable, Mode};
use gmfs_core::execution::{episode_seed, run_episode, Observation};
use gmfs_core::harness::{
    load_config, parse_config, run_diagnostics, run_sweep, threads_from_env, train, with_threads, write_sweep,
    ExperimentConfig, Suite,
};
use gmfs_core::Error;

#[derive(Parser)]
#[command(name = "gmfs", version, about = "Graphon mean-field subsampling experiments")]
struct Cli {
    /// Worker threads (overrides GMFS_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment file; defaults reproduce the warehouse benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run value iteration at one kappa and write the Q-table.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        kappa: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the n-agent system under a trained table.
    Execute {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        qtable: PathBuf,
        /// Half-open range `a..b` or a single seed index.
        #[arg(long, default_value = "0..30")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ObservationArg::Sampled)]
        observation: ObservationArg,
    },
    /// Train and evaluate every kappa in the config.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run diagnostic suites and write one CSV per suite.
    Diagnose {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated suites, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print a Q-table header and value statistics.
    Inspect { qtable: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ObservationArg {
    Sampled,
    Exact,
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    err: anyhow::Error,
}

fn classify(err: anyhow::Error) -> Exit {
    let code = match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::Budget { .. }) => 3,
        _ => 1,
    };
    Exit { code, err }
}

fn config_failure(err: anyhow::Error) -> Exit {
    Exit { code: 2, err }
}

fn read_config(arg: &ConfigArg) -> Result<ExperimentConfig, Exit> {
    match &arg.config {
        Some(p) => load_config(p)
            .with_context(|| format!("loading {}", p.display()))
            .map_err(config_failure),
        None => parse_config("").map_err(|e| config_failure(e.into())),
    }
}

fn parse_seeds(text: &str) -> anyhow::Result<std::ops::Range<usize>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().context("seed range start")?;
        let b: usize = b.trim().parse().context("seed range end")?;
        if a >= b {
            bail!("empty seed range {text}");
        }
        Ok(a..b)
    } else {
        let a: usize = text.parse().context("seed index")?;
        Ok(a..a + 1)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(cfg: &ExperimentConfig, kappa: u32, out: &Path) -> Result<(), Exit> {
    if kappa == 0 || kappa as usize >= cfg.n {
        return Err(config_failure(anyhow::anyhow!(
            "kappa {kappa} outside [1, n - 1] = [1, {}]",
            cfg.n - 1
        )));
    }
    let t0 = Instant::now();
    let outcome = train(cfg, kappa).map_err(|e| classify(e.into()))?;
    let q = &outcome.table;
    save_qtable(q, out).map_err(|e| classify(e.into()))?;
    println!(
        "kappa={kappa} entries={} sweeps={} residual={:.3e} converged={} wall={:.1}ms -> {}",
        q.values().len(),
        q.meta.iterations,
        q.meta.residual,
        outcome.converged,
        t0.elapsed().as_secs_f64() * 1e3,
        out.display()
    );
    Ok(())
}

fn cmd_execute(
    cfg: &ExperimentConfig,
    qtable: &Path,
    seeds: &str,
    out: &Path,
    observation: ObservationArg,
) -> Result<(), Exit> {
    let seeds = parse_seeds(seeds).map_err(config_failure)?;
    let q = load_qtable(qtable).map_err(|e| classify(e.into()))?;
    let env = cfg.environment().map_err(|e| classify(e.into()))?;
    let weights = cfg.weights().map_err(|e| classify(e.into()))?;
    let obs = match observation {
        ObservationArg::Sampled => Observation::Sampled,
        ObservationArg::Exact => Observation::Exact,
    };
    let ecfg = cfg.execution_config(obs);
    let mut csv = String::from("seed,kappa,horizon,discounted_return,wall_time_ms\n");
    let mut total = 0.0;
    let count = seeds.len();
    for k in seeds {
        let t0 = Instant::now();
        let ep = run_episode(env.as_ref(), &weights, &q, &ecfg, episode_seed(cfg.master_seed, k))
            .map_err(|e| classify(e.into()))?;
        total += ep.discounted_return;
        writeln!(
            csv,
            "{k},{},{},{},{:.3}",
            q.kappa(),
            ecfg.horizon,
            ep.discounted_return,
            t0.elapsed().as_secs_f64() * 1e3
        )
        .expect("string write");
    }
    write_file(out, csv.as_bytes()).map_err(classify)?;
    println!("{count} episodes, mean return {:.4} -> {}", total / count as f64, out.display());
    Ok(())
}

fn cmd_sweep(mut cfg: ExperimentConfig, out_dir: Option<PathBuf>) -> Result<(), Exit> {
    if let Some(d) = out_dir {
        cfg.output.dir = d;
    }
    let report = run_sweep(&cfg).map_err(|e| classify(e.into()))?;
    let (csv, json) = write_sweep(&cfg, &report).map_err(|e| classify(e.into()))?;
    for r in &report.rows {
        println!(
            "kappa={:>3} {:<7} entries={:>6} sweeps={:>4} mean={:>10} se={:>8} {}",
            r.kappa,
            r.observation,
            r.table_size,
            r.train_iterations.map_or("-".into(), |v| v.to_string()),
            r.mean_return.map_or("-".into(), |v| format!("{v:.3}")),
            r.stderr_return.map_or("-".into(), |v| format!("{v:.3}")),
            r.status
        );
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn cmd_diagnose(mut cfg: ExperimentConfig, suite: &str, out_dir: Option<PathBuf>) -> Result<(), Exit> {
    if let Some(d) = out_dir {
        cfg.output.dir = d;
    }
    let suites: Vec<Suite> = if suite.trim() == "all" {
        Suite::ALL.to_vec()
    } else {
        suite
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_, Error>>()
            .map_err(|e| config_failure(e.into()))?
    };
    if suites.is_empty() {
        return Err(config_failure(anyhow::anyhow!("no diagnostic suite selected")));
    }
    let reports = run_diagnostics(&cfg, &suites).map_err(|e| classify(e.into()))?;
    let mut failed = Vec::new();
    for r in &reports {
        let path = cfg.output.dir.join(format!("diag_{}.csv", r.suite));
        write_file(&path, &r.csv).map_err(classify)?;
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.suite, r.summary);
        if !r.passed {
            failed.push(r.suite.name());
        }
    }
    if !failed.is_empty() {
        return Err(Exit {
            code: 4,
            err: anyhow::anyhow!("failed suites: {}", failed.join(", ")),
        });
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), Exit> {
    let q = load_qtable(path).map_err(|e| classify(e.into()))?;
    let l = q.layout();
    let v = q.values();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    println!("file:      {}", path.display());
    println!(
        "mode:      {}",
        match l.mode() {
            Mode::Joint => "joint",
            Mode::Marginal => "marginal",
        }
    );
    println!("states:    {}", l.n_states());
    println!("actions:   {}", l.n_actions());
    println!("kappa:     {}", l.kappa());
    println!("gamma:     {}", q.meta.gamma);
    println!("env:       {}", q.meta.env_name);
    println!("seed:      {}", q.meta.seed);
    println!("residual:  {:.6e}", q.meta.residual);
    println!("entries:   {}", v.len());
    println!("values:    min {lo:.6} max {hi:.6} mean {mean:.6}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Exit> {
    let threads = cli.threads.or_else(threads_from_env);
    let body = move || -> Result<(), Exit> {
        match cli.command {
            Command::Train { config, kappa, out } => cmd_train(&read_config(&config)?, kappa, &out),
            Command::Execute {
                config,
                qtable,
                seeds,
                out,
                observation,
            } => cmd_execute(&read_config(&config)?, &qtable, &seeds, &out, observation),
            Command::Sweep { config, out_dir } => cmd_sweep(read_config(&config)?, out_dir),
            Command::Diagnose {
                config,
                suite,
                out_dir,
            } => cmd_diagnose(read_config(&config)?, &suite, out_dir),
            Command::Inspect { qtable } => cmd_inspect(&qtable),
        }
    };
    with_threads(threads, body).map_err(|e| classify(e.into()))?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
