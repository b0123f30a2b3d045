//! Command-line experiment runner.
//!
//! Subcommands:
//!   toy-gen            write the raw toy dataset as CSV
//!   init-only          initialize and evaluate without training
//!   train              one (initializer, seed) training run
//!   eval <checkpoint>  score a saved checkpoint on the test split
//!   sweep              every configured initializer x seed, plus summary
//!
//! Flags: --config <path>  --seed <int>  --out <dir>  --init <name>
//!        --iters <n>

use std::path::PathBuf;
use std::process::ExitCode;

use vbnet::net::{load_checkpoint, Likelihood};
use vbnet::rng::Rng;
use vbnet::train::{metric_error_rate, metric_mnll, metric_rmse};

use vbnet_cli::config::{load_config, ExperimentConfig};
use vbnet_cli::data::generate_toy_raw;
use vbnet_cli::error::{CliError, Result};
use vbnet_cli::experiment::{load_dataset, run_experiment, run_single};

struct Args {
    command: String,
    positional: Vec<String>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    init: Option<String>,
    iters: Option<u64>,
}

fn parse_args(mut argv: std::env::Args) -> Result<Args> {
    let _program = argv.next();
    let command = argv
        .next()
        .ok_or_else(|| CliError::Config(usage().into()))?;
    let mut args = Args {
        command,
        positional: Vec::new(),
        config: None,
        seed: None,
        out: None,
        init: None,
        iters: None,
    };
    let mut iter = argv.peekable();
    while let Some(flag) = iter.next() {
        let mut take = |name: &str| -> Result<String> {
            iter.next()
                .ok_or_else(|| CliError::Config(format!("{name} needs a value")))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(take("--config")?)),
            "--seed" => {
                args.seed = Some(
                    take("--seed")?
                        .parse()
                        .map_err(|_| CliError::Config("--seed expects an integer".into()))?,
                )
            }
            "--out" => args.out = Some(PathBuf::from(take("--out")?)),
            "--init" => args.init = Some(take("--init")?),
            "--iters" => {
                args.iters = Some(
                    take("--iters")?
                        .parse()
                        .map_err(|_| CliError::Config("--iters expects an integer".into()))?,
                )
            }
            other if other.starts_with("--") => {
                return Err(CliError::Config(format!("unknown flag {other}")))
            }
            other => args.positional.push(other.to_string()),
        }
    }
    Ok(args)
}

fn usage() -> &'static str {
    "usage: vbnet <toy-gen|init-only|train|eval|sweep> \
     [--config <path>] [--seed <int>] [--out <dir>] [--init <name>] [--iters <n>]"
}

fn effective_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(init) = &args.init {
        cfg.inits = vec![init.clone()];
    }
    if let Some(iters) = args.iters {
        cfg.iters = iters;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = match parse_args(std::env::args()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(args: &Args) -> Result<()> {
    match args.command.as_str() {
        "toy-gen" => toy_gen(args),
        "init-only" => {
            let mut cfg = effective_config(args)?;
            cfg.iters = 0;
            run_and_print(&cfg)
        }
        "train" => {
            let cfg = effective_config(args)?;
            // one run: first configured initializer and seed
            let init = cfg.inits.first().cloned().unwrap();
            let seed = *cfg.seeds.first().unwrap();
            std::fs::create_dir_all(&cfg.out_dir)?;
            let run = run_single(&cfg, &init, seed)?;
            print_run(&run);
            Ok(())
        }
        "eval" => eval(args),
        "sweep" => {
            let cfg = effective_config(args)?;
            run_and_print(&cfg)
        }
        other => Err(CliError::Config(format!("unknown command '{other}'; {}", usage()))),
    }
}

fn toy_gen(args: &Args) -> Result<()> {
    let cfg = effective_config(args)?;
    let n = match cfg.dataset {
        vbnet_cli::config::DatasetSource::Toy { n } => n,
        _ => 1000,
    };
    let seed = *cfg.seeds.first().unwrap();
    let (xs, ys) = generate_toy_raw(n, seed);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("toy.csv");
    let mut out = String::from("x,y\n");
    for (x, y) in xs.iter().zip(&ys) {
        out.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(&path, out)?;
    println!("wrote {} samples to {}", n, path.display());
    Ok(())
}

fn eval(args: &Args) -> Result<()> {
    let ckpt = args
        .positional
        .first()
        .ok_or_else(|| CliError::Config("eval needs a checkpoint path".into()))?;
    let cfg = effective_config(args)?;
    let seed = *cfg.seeds.first().unwrap();
    let net = load_checkpoint(std::path::Path::new(ckpt))?;
    let split = load_dataset(&cfg, seed)?;
    if split.test_x.rows() == 0 {
        return Err(CliError::Config("test split is empty".into()));
    }
    let rng = Rng::new(seed).derive(0xe7a1);
    let mnll = metric_mnll(&net, &split.test_x, &split.test_y, cfg.n_mc_test, &rng.derive(1));
    match net.likelihood {
        Likelihood::Regression { .. } => {
            let rmse = metric_rmse(&net, &split.test_x, &split.test_y, cfg.n_mc_test, &rng.derive(0));
            println!("test_rmse {rmse}");
        }
        Likelihood::Classification { .. } => {
            let err =
                metric_error_rate(&net, &split.test_x, &split.test_y, cfg.n_mc_test, &rng.derive(0));
            println!("test_error_rate {err}");
        }
    }
    println!("test_mnll {mnll}");
    Ok(())
}

fn run_and_print(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(cfg)?;
    for run in &report.runs {
        print_run(run);
    }
    println!("summary written to {}", report.summary_path.display());
    Ok(())
}

fn print_run(run: &vbnet_cli::RunResult) {
    let status = if run.nc { "NC" } else { "ok" };
    println!(
        "{} seed {}: post-init {:.4}, final {:.4}, mnll {:.4} [{status}]",
        run.init, run.seed, run.post_init_metric, run.final_metric, run.final_mnll
    );
}
