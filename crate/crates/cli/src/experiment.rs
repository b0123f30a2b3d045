//! End-to-end experiment orchestration: build the network, initialize,
//! train, and emit curve files, checkpoints and the summary table.

use std::path::{Path, PathBuf};

use vbnet::conv::PatchGeometry;
use vbnet::init::{initialize, LayerDiagnostics};
use vbnet::net::{save_checkpoint, Activation, Likelihood, Network, VariationalLayer};
use vbnet::train::{train_loop, CurveRecord};

use crate::config::{init_spec_from_name, Arch, DatasetSource, ExperimentConfig, LayerSpecToken};
use crate::data::{generate_toy, load_csv, DatasetSplit, Task};
use crate::error::{CliError, Result};

/// Outcome of one (initializer, seed) job.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub init: String,
    pub seed: u64,
    pub post_init_metric: f64,
    pub final_metric: f64,
    pub final_mnll: f64,
    pub diverged: bool,
    /// Non-converged: diverged, or the final metric is 10x worse than the
    /// post-init metric.
    pub nc: bool,
    pub records: Vec<CurveRecord>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub summary_path: PathBuf,
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetSplit> {
    match &cfg.dataset {
        DatasetSource::Toy { n } => generate_toy(*n, seed),
        DatasetSource::Csv { path, label_columns } => {
            load_csv(path, cfg.task, *label_columns, seed)
        }
    }
}

/// Builds the configured architecture around the dataset's input and
/// output widths. Hidden layers use the configured activation; the output
/// layer is always identity.
pub fn build_network(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<Network> {
    let d_in = split.train_x.cols();
    let d_out = split.train_y.cols();
    let act = cfg.activation;
    let mut layers: Vec<VariationalLayer> = Vec::new();
    let mut width = d_in;
    let push_dense = |layers: &mut Vec<VariationalLayer>, width: &mut usize, units: usize| {
        layers.push(VariationalLayer::dense(*width, units, act));
        *width = units;
    };
    match &cfg.arch {
        Arch::Shallow => {
            push_dense(&mut layers, &mut width, 100);
        }
        Arch::Deep => {
            for _ in 0..4 {
                push_dense(&mut layers, &mut width, 100);
            }
        }
        Arch::ConvDemo => {
            let (mut c, mut h, mut w) = (cfg.channels, cfg.height, cfg.width);
            if c * h * w != d_in {
                return Err(CliError::Config(format!(
                    "dataset.channels*height*width = {} does not match {d_in} features",
                    c * h * w
                )));
            }
            for out_channels in [16usize, 32] {
                let geom = PatchGeometry {
                    in_channels: c,
                    in_height: h,
                    in_width: w,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                };
                layers.push(VariationalLayer::conv(geom, out_channels, act)?);
                c = out_channels;
                h = geom.out_height();
                w = geom.out_width();
            }
            width = c * h * w;
        }
        Arch::Custom(tokens) => {
            let (mut c, mut h, mut w) = (cfg.channels, cfg.height, cfg.width);
            let mut spatial_ok = c * h * w == d_in;
            for token in tokens {
                match token {
                    LayerSpecToken::Dense { units } => {
                        push_dense(&mut layers, &mut width, *units);
                        spatial_ok = false;
                    }
                    LayerSpecToken::Conv { out_channels, kernel, stride, padding } => {
                        if !spatial_ok {
                            return Err(CliError::Config(
                                "conv layer needs image geometry (dataset.channels/height/width) \
                                 and must precede dense layers"
                                    .into(),
                            ));
                        }
                        let geom = PatchGeometry {
                            in_channels: c,
                            in_height: h,
                            in_width: w,
                            kernel_h: *kernel,
                            kernel_w: *kernel,
                            stride: *stride,
                            padding: *padding,
                        };
                        layers.push(VariationalLayer::conv(geom, *out_channels, act)?);
                        c = *out_channels;
                        h = geom.out_height();
                        w = geom.out_width();
                        width = c * h * w;
                    }
                }
            }
        }
    }
    layers.push(VariationalLayer::dense(width, d_out, Activation::Identity));
    let likelihood = match cfg.task {
        Task::Regression => Likelihood::Regression { log_noise_variance: 0.0 },
        Task::Classification => Likelihood::Classification {
            classes: d_out,
            alpha: cfg.init_alpha,
        },
    };
    Ok(Network::new(layers, likelihood)?)
}

/// Runs every configured (initializer, seed) pair, writing per-run curve
/// files, checkpoints and initializer diagnostics, then the summary table.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    // fail on bad names before any computation
    for name in &cfg.inits {
        init_spec_from_name(name, cfg, 0)?;
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("no seeds configured".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut runs = Vec::new();
    for init_name in &cfg.inits {
        for &seed in &cfg.seeds {
            let run = run_single(cfg, init_name, seed)?;
            runs.push(run);
        }
    }
    let summary_path = cfg.out_dir.join("summary.csv");
    write_summary_csv(&summary_path, &runs)?;
    Ok(ExperimentReport { runs, summary_path })
}

pub fn run_single(cfg: &ExperimentConfig, init_name: &str, seed: u64) -> Result<RunResult> {
    let split = load_dataset(cfg, seed)?;
    if split.test_x.rows() == 0 {
        return Err(CliError::Config("test split is empty".into()));
    }
    let mut net = build_network(cfg, &split)?;
    let spec = init_spec_from_name(init_name, cfg, seed)?;
    let diagnostics = initialize(&mut net, &spec, &split.train_x, &split.train_y)?;
    if let Some(diags) = &diagnostics {
        write_diagnostics_csv(
            &cfg.out_dir.join(format!("diagnostics_{init_name}_{seed}.csv")),
            diags,
        )?;
    }
    let train_cfg = cfg.train_config(seed);
    let run = train_loop(
        &mut net,
        &split.train_x,
        &split.train_y,
        &split.test_x,
        &split.test_y,
        &train_cfg,
    )?;
    write_curves_csv(
        &cfg.out_dir.join(format!("curves_{init_name}_{seed}.csv")),
        &run.records,
    )?;
    save_checkpoint(
        &net,
        &cfg.out_dir.join(format!("checkpoint_{init_name}_{seed}.ckpt")),
    )?;

    let post_init_metric = run.records.first().map(|r| r.test_metric).unwrap_or(f64::NAN);
    let (final_metric, final_mnll) = run
        .records
        .last()
        .map(|r| (r.test_metric, r.test_mnll))
        .unwrap_or((f64::NAN, f64::NAN));
    let nc = run.diverged
        || !final_metric.is_finite()
        || final_metric > 10.0 * post_init_metric;
    Ok(RunResult {
        init: init_name.to_string(),
        seed,
        post_init_metric,
        final_metric,
        final_mnll,
        diverged: run.diverged,
        nc,
        records: run.records,
    })
}

pub const CURVES_HEADER: &str =
    "iteration,wall_ms,train_nelbo,train_nll,train_kl,test_metric,test_mnll";

pub fn write_curves_csv(path: &Path, records: &[CurveRecord]) -> Result<()> {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.wall_ms, r.train_nelbo, r.train_nll, r.train_kl, r.test_metric, r.test_mnll
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CURVES_HEADER => {}
        _ => return Err(CliError::Config(format!("{}: bad curves header", path.display()))),
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CliError::RaggedRow {
                line: idx + 1,
                expected: 7,
                got: fields.len(),
            });
        }
        let parse_f = |c: usize| -> Result<f64> {
            fields[c].parse().map_err(|_| CliError::Parse {
                line: idx + 1,
                column: c + 1,
                content: fields[c].to_string(),
            })
        };
        let parse_u = |c: usize| -> Result<u64> {
            fields[c].parse().map_err(|_| CliError::Parse {
                line: idx + 1,
                column: c + 1,
                content: fields[c].to_string(),
            })
        };
        records.push(CurveRecord {
            iteration: parse_u(0)?,
            wall_ms: parse_u(1)?,
            train_nelbo: parse_f(2)?,
            train_nll: parse_f(3)?,
            train_kl: parse_f(4)?,
            test_metric: parse_f(5)?,
            test_mnll: parse_f(6)?,
        });
    }
    Ok(records)
}

fn write_diagnostics_csv(path: &Path, diags: &[LayerDiagnostics]) -> Result<()> {
    let mut out = String::from("layer,neuron,residual_variance,condition_estimate,layer_elapsed_ms\n");
    for layer in diags {
        for (j, n) in layer.neurons.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                layer.layer, j, n.residual_variance, n.condition_estimate, layer.elapsed_ms
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub const SUMMARY_HEADER: &str =
    "init,metric_mean,metric_std,mnll_mean,mnll_std,n_seeds,nc_count";

/// Mean and sample standard deviation of the final test metric and MNLL
/// per initializer, over the seeds that converged; runs that did not
/// converge are counted and excluded (an all-NC row prints `NC`).
pub fn write_summary_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let mut inits: Vec<&str> = Vec::new();
    for run in runs {
        if !inits.contains(&run.init.as_str()) {
            inits.push(&run.init);
        }
    }
    for init in inits {
        let all: Vec<&RunResult> = runs.iter().filter(|r| r.init == init).collect();
        let ok: Vec<&RunResult> = all.iter().filter(|r| !r.nc).copied().collect();
        let nc_count = all.len() - ok.len();
        if ok.is_empty() {
            out.push_str(&format!("{init},NC,NC,NC,NC,{},{nc_count}\n", all.len()));
            continue;
        }
        let stats = |select: &dyn Fn(&RunResult) -> f64| {
            let vals: Vec<f64> = ok.iter().map(|r| select(r)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (vals.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            (mean, std)
        };
        let (m_mean, m_std) = stats(&|r| r.final_metric);
        let (l_mean, l_std) = stats(&|r| r.final_mnll);
        out.push_str(&format!(
            "{init},{m_mean},{m_std},{l_mean},{l_std},{},{nc_count}\n",
            all.len()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
