//! Experiment configuration: a flat `key = value` text format with
//! dotted sections, e.g. `train.lr = 0.001`. Lines starting with `#` are
//! comments. Anything unspecified takes the defaults below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vbnet::blm::BlrPrior;
use vbnet::init::{InitSpec, InitStrategy, Propagation};
use vbnet::net::Activation;
use vbnet::train::{AnnealSchedule, TrainConfig};

use crate::data::Task;
use crate::error::{CliError, Result};

pub const ALL_INITS: [&str; 6] = [
    "iblm",
    "uninformative",
    "heuristic",
    "xavier",
    "orthogonal",
    "lsuv",
];

#[derive(Debug, Clone)]
pub enum DatasetSource {
    Toy { n: usize },
    Csv { path: PathBuf, label_columns: usize },
}

#[derive(Debug, Clone)]
pub enum Arch {
    /// One hidden layer of 100 units.
    Shallow,
    /// Four hidden layers of 100 units.
    Deep,
    /// Two 3x3 conv layers (16 then 32 channels, stride 1, pad 1) and a
    /// dense head; needs `dataset.channels/height/width`.
    ConvDemo,
    /// Hidden layers given explicitly, e.g. `dense:50,dense:20`.
    Custom(Vec<LayerSpecToken>),
}

#[derive(Debug, Clone)]
pub enum LayerSpecToken {
    Dense { units: usize },
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub task: Task,
    pub arch: Arch,
    pub activation: Activation,
    /// Image geometry for conv architectures.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub inits: Vec<String>,
    pub init_batch_size: usize,
    pub init_alpha: f64,
    pub init_prior_precision: f64,
    pub init_noise_variance: f64,
    pub init_propagation: Propagation,
    pub lsuv_tol: f64,
    pub lsuv_max_iter: usize,
    pub lr: f64,
    pub train_batch_size: usize,
    pub n_mc_train: usize,
    pub n_mc_test: usize,
    pub eval_interval: u64,
    pub iters: u64,
    pub anneal: AnnealSchedule,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Toy { n: 1000 },
            task: Task::Regression,
            arch: Arch::Deep,
            activation: Activation::Relu,
            channels: 1,
            height: 0,
            width: 0,
            inits: ALL_INITS.iter().map(|s| s.to_string()).collect(),
            init_batch_size: 64,
            init_alpha: 0.01,
            init_prior_precision: 1.0,
            init_noise_variance: 1.0,
            init_propagation: Propagation::FreshPerUnit,
            lsuv_tol: 0.1,
            lsuv_max_iter: 10,
            lr: 1e-3,
            train_batch_size: 64,
            n_mc_train: 16,
            n_mc_test: 128,
            eval_interval: 50,
            iters: 5000,
            anneal: AnnealSchedule::default(),
            seeds: vec![1],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.train_batch_size,
            n_mc_train: self.n_mc_train,
            n_mc_test: self.n_mc_test,
            eval_interval: self.eval_interval,
            max_iterations: self.iters,
            anneal: self.anneal,
            seed,
        }
    }
}

/// Builds the [`InitSpec`] for a named initializer. Unknown names fail
/// here, before any computation runs.
pub fn init_spec_from_name(name: &str, cfg: &ExperimentConfig, seed: u64) -> Result<InitSpec> {
    let strategy = match name {
        "iblm" => InitStrategy::IBlm {
            batch_size: cfg.init_batch_size,
            alpha: cfg.init_alpha,
            blr_prior: BlrPrior {
                precision: cfg.init_prior_precision,
            },
            blr_noise_variance: cfg.init_noise_variance,
            propagation: cfg.init_propagation,
        },
        "uninformative" => InitStrategy::Uninformative,
        "heuristic" => InitStrategy::Heuristic,
        "xavier" => InitStrategy::XavierNormal,
        "orthogonal" => InitStrategy::Orthogonal,
        "lsuv" => InitStrategy::Lsuv {
            tol: cfg.lsuv_tol,
            max_iter: cfg.lsuv_max_iter,
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown initializer '{other}' (expected one of {})",
                ALL_INITS.join(", ")
            )))
        }
    };
    Ok(InitSpec { strategy, seed })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {}: expected key = value, got '{line}'",
                i + 1
            )));
        };
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    config_from_pairs(kv)
}

fn config_from_pairs(kv: BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let bad = |key: &str, val: &str| CliError::Config(format!("bad value '{val}' for {key}"));
    for (key, val) in &kv {
        match key.as_str() {
            "dataset.source" => {
                cfg.dataset = if val == "toy" {
                    let n = match &cfg.dataset {
                        DatasetSource::Toy { n } => *n,
                        _ => 1000,
                    };
                    DatasetSource::Toy { n }
                } else {
                    DatasetSource::Csv {
                        path: PathBuf::from(val),
                        label_columns: 1,
                    }
                };
            }
            "dataset.toy_n" => {
                let n = val.parse().map_err(|_| bad(key, val))?;
                if let DatasetSource::Toy { .. } = cfg.dataset {
                    cfg.dataset = DatasetSource::Toy { n };
                }
            }
            "dataset.label_columns" => {
                let c = val.parse().map_err(|_| bad(key, val))?;
                if let DatasetSource::Csv { path, .. } = &cfg.dataset {
                    cfg.dataset = DatasetSource::Csv {
                        path: path.clone(),
                        label_columns: c,
                    };
                }
            }
            "dataset.channels" => cfg.channels = val.parse().map_err(|_| bad(key, val))?,
            "dataset.height" => cfg.height = val.parse().map_err(|_| bad(key, val))?,
            "dataset.width" => cfg.width = val.parse().map_err(|_| bad(key, val))?,
            "task" => {
                cfg.task = match val.as_str() {
                    "regression" => Task::Regression,
                    "classification" => Task::Classification,
                    _ => return Err(bad(key, val)),
                }
            }
            "arch" => cfg.arch = parse_arch(val)?,
            "activation" => {
                cfg.activation = match val.as_str() {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(bad(key, val)),
                }
            }
            "init" => {
                cfg.inits = if val == "all" {
                    ALL_INITS.iter().map(|s| s.to_string()).collect()
                } else {
                    val.split(',').map(|s| s.trim().to_string()).collect()
                };
                for name in &cfg.inits {
                    if !ALL_INITS.contains(&name.as_str()) {
                        return Err(CliError::Config(format!("unknown initializer '{name}'")));
                    }
                }
            }
            "init.batch_size" => cfg.init_batch_size = val.parse().map_err(|_| bad(key, val))?,
            "init.alpha" => cfg.init_alpha = val.parse().map_err(|_| bad(key, val))?,
            "init.prior_precision" => {
                cfg.init_prior_precision = val.parse().map_err(|_| bad(key, val))?
            }
            "init.noise_variance" => {
                cfg.init_noise_variance = val.parse().map_err(|_| bad(key, val))?
            }
            "init.propagation" => {
                cfg.init_propagation = match val.as_str() {
                    "fresh" => Propagation::FreshPerUnit,
                    "shared" => Propagation::SharedPerLayer,
                    _ => return Err(bad(key, val)),
                }
            }
            "init.lsuv_tol" => cfg.lsuv_tol = val.parse().map_err(|_| bad(key, val))?,
            "init.lsuv_max_iter" => cfg.lsuv_max_iter = val.parse().map_err(|_| bad(key, val))?,
            "train.lr" => cfg.lr = val.parse().map_err(|_| bad(key, val))?,
            "train.batch_size" => {
                cfg.train_batch_size = val.parse().map_err(|_| bad(key, val))?
            }
            "train.mc_train" => cfg.n_mc_train = val.parse().map_err(|_| bad(key, val))?,
            "train.mc_test" => cfg.n_mc_test = val.parse().map_err(|_| bad(key, val))?,
            "train.eval_interval" => {
                cfg.eval_interval = val.parse().map_err(|_| bad(key, val))?
            }
            "train.iters" => cfg.iters = val.parse().map_err(|_| bad(key, val))?,
            "train.anneal.enabled" => {
                cfg.anneal.enabled = val.parse().map_err(|_| bad(key, val))?
            }
            "train.anneal.rate" => cfg.anneal.rate = val.parse().map_err(|_| bad(key, val))?,
            "train.anneal.midpoint" => {
                cfg.anneal.midpoint = val.parse().map_err(|_| bad(key, val))?
            }
            "train.anneal.max_weight" => {
                cfg.anneal.max_weight = val.parse().map_err(|_| bad(key, val))?
            }
            "seeds" => {
                cfg.seeds = val
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad(key, val)))
                    .collect::<Result<Vec<u64>>>()?;
                if cfg.seeds.is_empty() {
                    return Err(CliError::Config("seeds must be nonempty".into()));
                }
            }
            "out" => cfg.out_dir = PathBuf::from(val),
            other => return Err(CliError::Config(format!("unknown key '{other}'"))),
        }
    }
    if cfg.eval_interval == 0 {
        return Err(CliError::Config("train.eval_interval must be >= 1".into()));
    }
    Ok(cfg)
}

fn parse_arch(val: &str) -> Result<Arch> {
    match val {
        "shallow" => Ok(Arch::Shallow),
        "deep" => Ok(Arch::Deep),
        "conv-demo" => Ok(Arch::ConvDemo),
        custom => {
            let mut tokens = Vec::new();
            for part in custom.split(',') {
                let fields: Vec<&str> = part.trim().split(':').collect();
                match fields.as_slice() {
                    ["dense", units] => tokens.push(LayerSpecToken::Dense {
                        units: units
                            .parse()
                            .map_err(|_| CliError::Config(format!("bad layer '{part}'")))?,
                    }),
                    ["conv", ch, k, s, p] => {
                        let parse = |t: &str| {
                            t.parse::<usize>()
                                .map_err(|_| CliError::Config(format!("bad layer '{part}'")))
                        };
                        tokens.push(LayerSpecToken::Conv {
                            out_channels: parse(ch)?,
                            kernel: parse(k)?,
                            stride: parse(s)?,
                            padding: parse(p)?,
                        });
                    }
                    _ => {
                        return Err(CliError::Config(format!(
                            "unknown architecture token '{part}'"
                        )))
                    }
                }
            }
            if tokens.is_empty() {
                return Err(CliError::Config("empty architecture".into()));
            }
            Ok(Arch::Custom(tokens))
        }
    }
}
