use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

use daro_lab::config::{TrainConfig, KEYS};
use daro_lab::diagnostics::reports::weight_chart;
use daro_lab::diagnostics::{
    compare_schemes, loss_scale_report, normalized_length_report, verify_suite, MetricsTable,
    Mutation, VerifyOptions,
};
use daro_lab::trainer::run_with;
use daro_lab::{Result, SchemeKind};

/// Desk-scale RLVR loss-weighting experiments.
#[derive(Parser, Debug)]
#[command(name = "daro-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write metrics, checkpoints and charts.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run several schemes over shared seeds and tabulate pass rates.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated schemes; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
        /// First seed of the sweep.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        n_seeds: u64,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the property suite; exits non-zero if any property fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject a sign error into the negative advantage.
        #[arg(long)]
        mutate: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Charts and tables from an existing metrics CSV.
    Report {
        /// A metrics CSV, or a run directory containing `metrics.csv`.
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
    },
}

/// Config keys not already covered by a dedicated flag.
fn override_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter()
        .copied()
        .filter(|k| !matches!(*k, "scheme" | "seed"))
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for sub in ["train", "compare"] {
        cmd = cmd.mut_subcommand(sub, |mut s| {
            for key in override_keys() {
                s = s.arg(
                    Arg::new(key)
                        .long(key)
                        .value_name("VALUE")
                        .help(format!("Override config key `{key}`")),
                );
            }
            s
        });
    }
    cmd
}

fn build_config(
    matches: &ArgMatches,
    config: Option<&Path>,
    scheme: Option<&str>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for key in override_keys() {
        if let Some(v) = matches.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if let Some(s) = scheme {
        cfg.set("scheme", s)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_reports(table: &MetricsTable, out: &Path, window: usize, alpha: f64) -> Result<()> {
    fs::create_dir_all(out)?;
    if table.rows.is_empty() {
        return Ok(());
    }
    let scale = loss_scale_report(table, window, alpha)?;
    fs::write(out.join("loss_scale.svg"), &scale.svg)?;
    fs::write(out.join("loss_scale_windows.csv"), scale.table_csv())?;
    let lengths = normalized_length_report(table, alpha)?;
    fs::write(out.join("normalized_lengths.svg"), &lengths.svg)?;
    fs::write(
        out.join("weights.svg"),
        weight_chart(table, &format!("{} weights per pass rate", table.scheme)),
    )?;
    println!(
        "windows of {window} steps: {:.0}% have a bucket >= 2x the median |L_mu|",
        100.0 * scale.fraction_windows_with(2.0)
    );
    Ok(())
}

fn train(cfg: TrainConfig, out: &Path) -> Result<()> {
    println!("training {} for {} steps (seed {}) -> {}", cfg.scheme, cfg.total_steps, cfg.seed, out.display());
    let every = (cfg.total_steps / 10).max(1);
    let output = run_with(&cfg, Some(out), |m| {
        if (m.step + 1) % every == 0 {
            println!(
                "step {:>5}  pass_rate {:.3}  entropy {:.3}  kept {:>3}/{:<3} tokens {}",
                m.step + 1,
                m.pass_rate,
                m.entropy,
                m.groups_kept,
                m.groups_sampled,
                m.tokens
            );
        }
    })?;
    write_reports(&output.metrics, out, 10, 0.1)?;
    if let Some(w) = &output.daro_weights {
        let ws: Vec<String> = w.iter().map(|(mu, v)| format!("{mu}:{v:.3}")).collect();
        println!("final weights {}", ws.join(" "));
    }
    Ok(())
}

fn compare(cfg: TrainConfig, schemes: &[String], seeds: Vec<u64>, out: &Path) -> Result<()> {
    let kinds: Vec<SchemeKind> = if schemes.is_empty() {
        SchemeKind::ALL.to_vec()
    } else {
        schemes.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let configs: Vec<TrainConfig> = kinds
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.scheme = k;
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let cmp = compare_schemes(&configs, &seeds, |scheme, seed| {
        println!("running {scheme} seed {seed}");
    })?;
    cmp.write_artifacts(out, 0.1)?;
    print!("{}", cmp.table_csv());
    Ok(())
}

fn verify(seed: u64, mutate: bool, out: Option<&Path>) -> Result<bool> {
    let options = VerifyOptions {
        seed,
        mutation: mutate.then_some(Mutation::FlipAdvNegSign),
        ..VerifyOptions::default()
    };
    let report = verify_suite(&options)?;
    for p in &report.properties {
        println!(
            "{} {:<28} measured {:.3e} tolerance {:.1e}  {}",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            p.measured,
            p.tolerance,
            p.detail
        );
    }
    if let Some(path) = out {
        fs::write(path, report.to_json())?;
    }
    Ok(report.all_passed())
}

fn dispatch(matches: &ArgMatches) -> Result<bool> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| daro_lab::Error::Config(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match cli.command {
        Command::Train {
            config,
            scheme,
            seed,
            out,
            steps,
        } => {
            let cfg = build_config(sub, config.as_deref(), scheme.as_deref(), seed, steps)?;
            train(cfg, &out)?;
        }
        Command::Compare {
            config,
            schemes,
            seed,
            n_seeds,
            out,
            steps,
        } => {
            let cfg = build_config(sub, config.as_deref(), None, None, steps)?;
            compare(cfg, &schemes, (seed..seed + n_seeds).collect(), &out)?;
        }
        Command::Verify { seed, mutate, out } => return verify(seed, mutate, out.as_deref()),
        Command::Report {
            metrics,
            out,
            window,
            alpha,
        } => {
            let path = if metrics.is_dir() { metrics.join("metrics.csv") } else { metrics };
            let table = MetricsTable::read_csv_file(&path)?;
            let out = out.unwrap_or_else(|| path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            write_reports(&table, &out, window, alpha)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    match dispatch(&matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
