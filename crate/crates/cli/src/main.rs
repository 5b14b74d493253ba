mod pipeline;
mod rundir;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tcgpn::config::{key_spec, key_table, RunConfig};
use tcgpn::model::ModelConfig;
use tcgpn::train::{model_gradcheck, tiny_gradcheck_model};
use tcgpn::Error;

use rundir::RunDir;

const OVERRIDES_HELP: &str = "Any configuration key can be overridden as `--key value` or `--key=value` \
(hyphens and underscores are interchangeable). Precedence: defaults < --config file < overrides. \
Run `tcgpn keys` for the key table.";

#[derive(Parser, Debug)]
#[command(name = "tcgpn", version, about = "Correlation-graph pretraining for panel time series", after_help = OVERRIDES_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file of `key = value` pairs.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory (default runs/<timestamp>-s<seed>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Only write progress to the run log.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Size {
    Tiny,
    Small,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic lead-lag panel and its ground-truth graph.
    SynthData(Common),
    /// Build the correlation graph selected by graph_kind.
    BuildGraph(Common),
    /// Masked pretraining of the encoder and both decoders.
    Pretrain(Common),
    /// Train the prediction head (and optionally the encoder).
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; a fresh initialisation when omitted.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Score the test split with a fine-tuned checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// IC series, top-k strategy and metrics from predictions and returns.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        predictions: PathBuf,
        #[arg(long, value_name = "FILE")]
        returns: PathBuf,
    },
    /// Finite-difference check of the pretraining and fine-tune gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "tiny")]
        size: Size,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Pretrain, fine-tune and predict for every point of a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis `key=v1,v2,...`; aliases rt, rg, nl, nh, lr, lambda. Repeatable.
        #[arg(long, required = true, value_name = "AXIS")]
        grid: Vec<String>,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the configuration key table.
    Keys,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } | Error::NonScalarLoss(_) => "shape",
        Error::Invalid(_) => "invalid",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::ZeroVariance(_) => "zero-variance",
        Error::NonFinite { .. } => "non-finite",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(text)) => {
            eprint!("{text}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            let msg = match &e {
                Error::Config(m) => m.clone(),
                other => other.to_string(),
            };
            let msg = msg.replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::from(if matches!(e, Error::Config(_)) { 3 } else { 1 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error[gradcheck]: {msg}");
            ExitCode::from(1)
        }
    }
}

type Overrides = Vec<(String, String)>;

/// Removes `--key value` / `--key=value` pairs naming configuration keys
/// from `argv`, returning the remaining arguments and the pairs in order.
fn split_overrides(argv: &[String]) -> Result<(Vec<String>, Overrides), Failure> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg.clone());
            rest.extend(it.by_ref().cloned());
            break;
        }
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (body, None),
        };
        let key = name.replace('-', "_");
        match key_spec(&key) {
            Some(spec) => {
                let value = match inline {
                    Some(v) => v,
                    None => it
                        .next()
                        .cloned()
                        .ok_or_else(|| Failure::Usage(format!("error: --{name} needs a value\n")))?,
                };
                overrides.push((spec.name.to_string(), value));
            }
            None => rest.push(arg.clone()),
        }
    }
    Ok((rest, overrides))
}

fn resolve_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            RunConfig::from_toml(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set_from_str(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(argv: &[String]) -> Result<(), Failure> {
    let (rest, overrides) = split_overrides(argv)?;
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return Err(Failure::Usage(e.render().to_string())),
        Err(e) => {
            print!("{}", e.render());
            return Ok(());
        }
    };
    let open = |common: &Common| -> Result<(RunConfig, RunDir), Failure> {
        let cfg = resolve_config(common, &overrides)?;
        let mut dir = RunDir::create(common.out.as_deref(), &cfg, argv, common.quiet)?;
        if let Some(p) = &common.config {
            dir.add_input(p)?;
        }
        Ok((cfg, dir))
    };
    match &cli.command {
        Command::Keys => {
            if !overrides.is_empty() {
                return Err(Failure::Usage("error: keys takes no overrides\n".into()));
            }
            print!("{}", key_table());
        }
        Command::SynthData(common) => {
            let (cfg, mut dir) = open(common)?;
            pipeline::synth_data(&cfg, &mut dir)?;
            println!("{}", dir.path.display());
        }
        Command::BuildGraph(common) => {
            let (cfg, mut dir) = open(common)?;
            pipeline::build_graph(&cfg, &mut dir)?;
            println!("{}", dir.path.display());
        }
        Command::Pretrain(common) => {
            let (cfg, mut dir) = open(common)?;
            let prep = pipeline::prepare(&cfg, &mut dir)?;
            pipeline::pretrain(&cfg, &prep, &mut dir)?;
            println!("{}", dir.path.display());
        }
        Command::Finetune { common, checkpoint } => {
            let (cfg, mut dir) = open(common)?;
            let prep = pipeline::prepare(&cfg, &mut dir)?;
            let start = pipeline::start_params(&cfg, &prep, checkpoint.as_deref(), &mut dir)?;
            pipeline::finetune(&cfg, &prep, &start, &mut dir)?;
            println!("{}", dir.path.display());
        }
        Command::Predict { common, checkpoint } => {
            let (cfg, mut dir) = open(common)?;
            let prep = pipeline::prepare(&cfg, &mut dir)?;
            let params = pipeline::start_params(&cfg, &prep, Some(checkpoint), &mut dir)?;
            pipeline::predict_test(&prep, &params, &mut dir)?;
            println!("{}", dir.path.display());
        }
        Command::Backtest {
            common,
            predictions,
            returns,
        } => {
            let (cfg, mut dir) = open(common)?;
            pipeline::backtest(&cfg, predictions, returns, &mut dir)?;
            println!("{}", dir.path.display());
        }
        Command::Gradcheck { common, size, eps, tol } => {
            let (cfg, mut dir) = open(common)?;
            gradcheck(&cfg, *size, *eps, *tol, &mut dir)?;
        }
        Command::Sweep { common, grid, jobs } => {
            let (cfg, mut dir) = open(common)?;
            let axes = grid.iter().map(|g| sweep::parse_axis(g)).collect::<Result<Vec<_>, _>>()?;
            let csv = sweep::run(&cfg, &axes, *jobs, argv, &mut dir)?;
            print!("{}", sweep::table(&csv));
            println!("{}", dir.path.display());
        }
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, size: Size, eps: f64, tol: f64, dir: &mut RunDir) -> Result<(), Failure> {
    let (model, nodes) = match size {
        Size::Tiny => (tiny_gradcheck_model(), 4),
        Size::Small => (
            ModelConfig {
                t: 12,
                d_model: 16,
                gat_dim: 8,
                tgm_heads: 4,
                ffn_dim: 32,
                sigma_h: 3.0,
                d_a: 8,
                head_hidden: 16,
                ..tiny_gradcheck_model()
            },
            6,
        ),
    };
    let report = model_gradcheck(&model, nodes, cfg.int("seed") as u64, eps, tol)?;
    let mut csv = String::from("loss,path,numel,max_rel_err,flagged\n");
    for (name, r) in [("pretrain", &report.pretrain), ("finetune", &report.finetune)] {
        for p in &r.paths {
            println!("{name:<8} {:<40} {:>6} {:.3e}{}", p.path, p.numel, p.max_rel_err, if p.flagged { "  FAIL" } else { "" });
            csv.push_str(&format!("{name},{},{},{},{}\n", p.path, p.numel, p.max_rel_err, p.flagged || p.unprobeable));
        }
    }
    dir.write("gradcheck.csv", &csv)?;
    let worst = report.pretrain.max_rel_err().max(report.finetune.max_rel_err());
    println!("max relative error {worst:.3e} (tol {tol:e})");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("max relative error {worst:e} exceeds {tol:e}")))
    }
}
