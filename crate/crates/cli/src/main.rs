use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use lpvgain::par::Execution;
use lpvgain_cli::{self as cli, GammaUbSource, RunConfig, Setup};

#[derive(Parser)]
#[command(name = "lpvgain", version, about = "Induced L2 gain bounds for gridded LPV systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "example")]
    config: Option<PathBuf>,
    /// Built-in example: harald, scaled-lti, rotated, twopar.
    #[arg(long, value_name = "NAME")]
    example: Option<String>,
    /// Rate bound for the scaled-lti example.
    #[arg(long, value_name = "MU")]
    mu_bar: Option<f64>,
    /// Upper bound: a number, a file written by the LMI tool, or "skip".
    #[arg(long, value_name = "VALUE|PATH")]
    gamma_ub: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Frozen-parameter lower bound over the grid.
    Frozen(Common),
    /// Norm bracket of one periodic trajectory.
    PltvNorm {
        #[command(flatten)]
        common: Common,
        /// Decision vector, comma separated; defaults to a built-in start.
        #[arg(long, value_name = "C", allow_hyphen_values = true)]
        decision: Option<String>,
    },
    /// Optimize the trajectory for a lower bound.
    LowerBound {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "C", allow_hyphen_values = true)]
        decision: Option<String>,
    },
    /// Worst-case input along one trajectory.
    WcInput {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "C", allow_hyphen_values = true)]
        decision: Option<String>,
        /// Level to synthesize at; defaults to the lower end of the norm bracket.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Frozen bound, lower bound and worst-case input; writes report.json and signals.csv.
    Full {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "C", allow_hyphen_values = true)]
        decision: Option<String>,
    },
    /// Write the model file read by the LMI upper-bound tool.
    ExportModel(Common),
}

struct Prepared {
    setup: Setup,
    out: Option<PathBuf>,
}

fn prepare(common: &Common) -> anyhow::Result<Prepared> {
    let (mut cfg, base) = match (&common.config, &common.example) {
        (Some(path), _) => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (RunConfig::load(path)?, base)
        }
        (None, Some(name)) => (RunConfig::for_example(name), PathBuf::from(".")),
        (None, None) => {
            return Err(cli::ConfigError("give --config PATH or --example NAME".into()).into())
        }
    };
    if common.mu_bar.is_some() {
        cfg.mu_bar = common.mu_bar;
    }
    if let Some(g) = &common.gamma_ub {
        cfg.gamma_ub = Some(GammaUbSource::parse(g));
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    let execution = match common.threads {
        Some(0) => return Err(cli::ConfigError("--threads must be at least 1".into()).into()),
        Some(1) => Execution::Sequential,
        Some(n) => {
            set_threads(n)?;
            Execution::Parallel
        }
        None => Execution::default(),
    };
    let out = common.out.clone().or_else(|| cfg.out.clone());
    // a relative γ_ub path on the command line is relative to the working directory
    let base = if common.gamma_ub.is_some() { PathBuf::from(".") } else { base };
    Ok(Prepared {
        setup: Setup::new(&cfg, &base, execution)?,
        out,
    })
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

#[cfg(not(feature = "parallel"))]
fn set_threads(n: usize) -> anyhow::Result<()> {
    log::warn!("built without parallel support; ignoring --threads {n}");
    Ok(())
}

fn decision(setup: &Setup, text: &Option<String>) -> anyhow::Result<Vec<f64>> {
    let given = text.as_deref().map(cli::parse_vector).transpose()?;
    setup.decision(given.as_deref())
}

fn emit(out: &Option<PathBuf>, name: &str, json: &str) -> anyhow::Result<()> {
    if let Some(dir) = out {
        cli::write_file(dir, name, json)?;
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{json}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing to stdout"),
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Frozen(common) => {
            let p = prepare(&common)?;
            let r = cli::run_frozen(&p.setup)?;
            emit(&p.out, "frozen.json", &serde_json::to_string_pretty(&r)?)
        }
        Command::PltvNorm { common, decision: d } => {
            let p = prepare(&common)?;
            let c = decision(&p.setup, &d)?;
            let r = cli::run_pltv_norm(&p.setup, &c)?;
            emit(&p.out, "pltv_norm.json", &serde_json::to_string_pretty(&r)?)
        }
        Command::LowerBound { common, decision: d } => {
            let p = prepare(&common)?;
            let c = decision(&p.setup, &d)?;
            let r = cli::run_lower_bound(&p.setup, &c)?;
            emit(&p.out, "lower_bound.json", &serde_json::to_string_pretty(&r)?)
        }
        Command::WcInput {
            common,
            decision: d,
            gamma,
        } => {
            let p = prepare(&common)?;
            let c = decision(&p.setup, &d)?;
            let gamma = match gamma {
                Some(g) => g,
                None => cli::run_pltv_norm(&p.setup, &c)?.lower,
            };
            let sig = cli::run_worst_case(&p.setup, &c, gamma)?;
            let summary = serde_json::json!({
                "gamma": gamma,
                "eigenvalue": sig.window_start.is_none().then_some([sig.lambda.re, sig.lambda.im]),
                "window_start": sig.window_start,
                "achieved_ratio": sig.ratio,
                "identity_error": sig.identity_error(gamma),
                "k": sig.k,
            });
            emit(&p.out, "wc_input.json", &serde_json::to_string_pretty(&summary)?)?;
            if let Some(dir) = &p.out {
                cli::write_file(dir, "signals.csv", &cli::signals_csv(&p.setup, &c, &sig)?)?;
            }
            Ok(())
        }
        Command::Full { common, decision: d } => {
            let p = prepare(&common)?;
            let given = d.as_deref().map(cli::parse_vector).transpose()?;
            let full = cli::run_full(&p.setup, given.as_deref())?;
            emit(&p.out, "report.json", &serde_json::to_string_pretty(&full.report)?)?;
            if let (Some(dir), Some(csv)) = (&p.out, &full.csv) {
                cli::write_file(dir, "signals.csv", csv)?;
            }
            Ok(())
        }
        Command::ExportModel(common) => {
            let p = prepare(&common)?;
            emit(&p.out, "model.json", &cli::export_model(&p.setup))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
