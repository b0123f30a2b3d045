//! Stochastic variational inference training: Adam over the variational
//! parameters, an optional sigmoidal KL-annealing schedule, the training
//! loop and the held-out metrics it records.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::init::BatchCursor;
use crate::linalg::DenseMatrix;
use crate::net::{forward_sample, nelbo, GradientSet, Likelihood, Network};
use crate::rng::Rng;

/// Adam accumulators shaped like the network parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<(DenseMatrix, DenseMatrix)>,
    second: Vec<(DenseMatrix, DenseMatrix)>,
    noise_first: f64,
    noise_second: f64,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &Network, lr: f64) -> Self {
        let zeros = |net: &Network| {
            net.layers
                .iter()
                .map(|l| {
                    (
                        DenseMatrix::zeros(l.means.rows(), l.means.cols()),
                        DenseMatrix::zeros(l.means.rows(), l.means.cols()),
                    )
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            first: zeros(net),
            second: zeros(net),
            noise_first: 0.0,
            noise_second: 0.0,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update of every variational parameter (and the
/// regression noise parameter when present).
pub fn adam_step(net: &mut Network, grads: &GradientSet, state: &mut AdamState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);

    let update = |param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    };

    for (idx, layer) in net.layers.iter_mut().enumerate() {
        let grad = &grads.layers[idx];
        update(
            layer.means.data_mut(),
            grad.d_means.data(),
            state.first[idx].0.data_mut(),
            state.second[idx].0.data_mut(),
        );
        update(
            layer.log_variances.data_mut(),
            grad.d_log_variances.data(),
            state.first[idx].1.data_mut(),
            state.second[idx].1.data_mut(),
        );
    }
    if let Likelihood::Regression { log_noise_variance } = &mut net.likelihood {
        let g = grads.d_log_noise_variance;
        state.noise_first = b1 * state.noise_first + (1.0 - b1) * g;
        state.noise_second = b2 * state.noise_second + (1.0 - b2) * g * g;
        let mhat = state.noise_first / bc1;
        let vhat = state.noise_second / bc2;
        *log_noise_variance -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Sigmoidal schedule for the KL weight:
/// `lambda = max_weight / (1 + exp(-rate * (iter - midpoint)))`.
#[derive(Debug, Clone, Copy)]
pub struct AnnealSchedule {
    pub enabled: bool,
    pub rate: f64,
    pub midpoint: u64,
    pub max_weight: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        // disabled by default; only heavily over-parameterized models
        // need the ramp
        AnnealSchedule {
            enabled: false,
            rate: 2e-3,
            midpoint: 25_000,
            max_weight: 0.1,
        }
    }
}

/// KL weight at an iteration; 1 when the schedule is disabled.
pub fn anneal_lambda(iteration: u64, sched: &AnnealSchedule) -> f64 {
    if !sched.enabled {
        return 1.0;
    }
    debug_assert!(sched.rate > 0.0 && sched.max_weight > 0.0 && sched.max_weight <= 1.0);
    let x = sched.rate * (iteration as f64 - sched.midpoint as f64);
    sched.max_weight / (1.0 + (-x).exp())
}

/// All tunables of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_mc_train: usize,
    pub n_mc_test: usize,
    pub eval_interval: u64,
    pub max_iterations: u64,
    pub anneal: AnnealSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            n_mc_train: 16,
            n_mc_test: 128,
            eval_interval: 50,
            max_iterations: 5000,
            anneal: AnnealSchedule::default(),
            seed: 0,
        }
    }
}

/// One learning-curve row.
#[derive(Debug, Clone)]
pub struct CurveRecord {
    pub iteration: u64,
    pub wall_ms: u64,
    pub train_nelbo: f64,
    pub train_nll: f64,
    pub train_kl: f64,
    /// RMSE for regression, error rate for classification.
    pub test_metric: f64,
    pub test_mnll: f64,
}

/// Outcome of a run; on divergence the network is rolled back to the last
/// evaluated checkpoint and `diverged` is set.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<CurveRecord>,
    pub diverged: bool,
}

const STREAM_CURSOR: u64 = 1;
const STREAM_PROBE: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_STEP: u64 = 4;

/// Mini-batch SVI: per iteration draw a batch, evaluate the objective
/// with `n_mc_train` samples and take one Adam step; every
/// `eval_interval` iterations score the test split with `n_mc_test`
/// samples and append a curve record. Iteration 0 records the post-init
/// state before any step.
pub fn train_loop(
    net: &mut Network,
    train_x: &DenseMatrix,
    train_y: &DenseMatrix,
    test_x: &DenseMatrix,
    test_y: &DenseMatrix,
    config: &TrainConfig,
) -> Result<TrainRun> {
    let root = Rng::new(config.seed);
    let n_total = train_x.rows();
    let mut cursor = BatchCursor::new(
        n_total,
        config.batch_size.min(n_total),
        root.derive(STREAM_CURSOR),
    )?;
    let probe_rng = root.derive(STREAM_PROBE);
    let eval_rng = root.derive(STREAM_EVAL);
    let step_rng = root.derive(STREAM_STEP);

    let mut adam = AdamState::new(net, config.lr);
    let started = Instant::now();
    let mut records = Vec::new();
    let mut diverged = false;

    // post-init record: probe objective on a dedicated batch stream
    let mut probe_cursor = BatchCursor::new(
        n_total,
        config.batch_size.min(n_total),
        probe_rng.derive(0),
    )?;
    let probe_rows = probe_cursor.next_batch();
    let (px, py) = (gather(train_x, &probe_rows), gather(train_y, &probe_rows));
    match nelbo(
        net,
        &px,
        &py,
        n_total,
        config.n_mc_train,
        anneal_lambda(0, &config.anneal),
        &mut probe_rng.derive(1),
    ) {
        Ok(est) => {
            records.push(make_record(
                0, &started, est.total, est.nll, est.kl, net, test_x, test_y, config, &eval_rng,
            ));
        }
        Err(Error::NonFiniteLoss) => {
            return Ok(TrainRun {
                records,
                diverged: true,
            })
        }
        Err(e) => return Err(e),
    }

    let mut last_good = net.clone();
    for it in 1..=config.max_iterations {
        let rows = cursor.next_batch();
        let (bx, by) = (gather(train_x, &rows), gather(train_y, &rows));
        let lambda = anneal_lambda(it, &config.anneal);
        let mut it_rng = step_rng.derive(it);
        let est = match nelbo(net, &bx, &by, n_total, config.n_mc_train, lambda, &mut it_rng) {
            Ok(est) => est,
            Err(Error::NonFiniteLoss) => {
                *net = last_good;
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        match adam_step(net, &est.gradients, &mut adam) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient) => {
                *net = last_good;
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        if it % config.eval_interval == 0 || it == config.max_iterations {
            records.push(make_record(
                it, &started, est.total, est.nll, est.kl, net, test_x, test_y, config, &eval_rng,
            ));
            last_good = net.clone();
        }
    }
    Ok(TrainRun { records, diverged })
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    iteration: u64,
    started: &Instant,
    train_nelbo: f64,
    train_nll: f64,
    train_kl: f64,
    net: &Network,
    test_x: &DenseMatrix,
    test_y: &DenseMatrix,
    config: &TrainConfig,
    eval_rng: &Rng,
) -> CurveRecord {
    let rng = eval_rng.derive(iteration);
    let test_metric = match net.likelihood {
        Likelihood::Regression { .. } => {
            metric_rmse(net, test_x, test_y, config.n_mc_test, &rng.derive(0))
        }
        Likelihood::Classification { .. } => {
            metric_error_rate(net, test_x, test_y, config.n_mc_test, &rng.derive(0))
        }
    };
    let test_mnll = metric_mnll(net, test_x, test_y, config.n_mc_test, &rng.derive(1));
    CurveRecord {
        iteration,
        wall_ms: started.elapsed().as_millis() as u64,
        train_nelbo,
        train_nll,
        train_kl,
        test_metric,
        test_mnll,
    }
}

fn gather(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn sampled_outputs(net: &Network, x: &DenseMatrix, n_mc: usize, rng: &Rng) -> Vec<DenseMatrix> {
    let outs: Vec<DenseMatrix> = crate::par::map_collect(n_mc, |s| {
        let mut r = rng.derive(s as u64);
        let (out, _) = forward_sample(net, x, &mut r).expect("metric forward failed");
        out
    });
    outs
}

/// Root mean squared error of the Monte Carlo averaged predictive mean.
pub fn metric_rmse(net: &Network, x: &DenseMatrix, y: &DenseMatrix, n_mc: usize, rng: &Rng) -> f64 {
    assert!(n_mc >= 1);
    let samples = sampled_outputs(net, x, n_mc, rng);
    let mut mean = DenseMatrix::zeros(x.rows(), net.output_width());
    for s in &samples {
        mean.add_scaled(s, 1.0 / n_mc as f64);
    }
    let mut acc = 0.0;
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            let d = mean.get(r, c) - y.get(r, c);
            acc += d * d;
        }
    }
    (acc / (y.rows() * y.cols()) as f64).sqrt()
}

/// Mean negative log-likelihood of the Monte Carlo averaged predictive
/// distribution, `-mean_i log[(1/S) sum_s p(y_i | x_i, W_s)]`, computed
/// with log-sum-exp.
pub fn metric_mnll(net: &Network, x: &DenseMatrix, y: &DenseMatrix, n_mc: usize, rng: &Rng) -> f64 {
    assert!(n_mc >= 1);
    let samples = sampled_outputs(net, x, n_mc, rng);
    let n = x.rows();
    let mut total = 0.0;
    for r in 0..n {
        let mut logps = Vec::with_capacity(n_mc);
        for sample in &samples {
            let logp = match &net.likelihood {
                Likelihood::Regression { log_noise_variance } => {
                    let s2 = log_noise_variance.exp();
                    let norm = 0.5 * (std::f64::consts::TAU * s2).ln();
                    let mut lp = 0.0;
                    for c in 0..y.cols() {
                        let resid = sample.get(r, c) - y.get(r, c);
                        lp += -norm - 0.5 * resid * resid / s2;
                    }
                    lp
                }
                Likelihood::Classification { .. } => {
                    let logits = sample.row(r);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                    let mut lp = 0.0;
                    for (c, &z) in logits.iter().enumerate() {
                        lp += y.get(r, c) * (z - lse);
                    }
                    lp
                }
            };
            logps.push(logp);
        }
        let max = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logps.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - (n_mc as f64).ln();
    }
    -total / n as f64
}

/// Fraction of points whose argmax of the Monte Carlo averaged class
/// probabilities disagrees with the label.
pub fn metric_error_rate(
    net: &Network,
    x: &DenseMatrix,
    y: &DenseMatrix,
    n_mc: usize,
    rng: &Rng,
) -> f64 {
    assert!(n_mc >= 1);
    let samples = sampled_outputs(net, x, n_mc, rng);
    let n = x.rows();
    let k = y.cols();
    let mut errors = 0usize;
    for r in 0..n {
        let mut probs = vec![0.0; k];
        for sample in &samples {
            let logits = sample.row(r);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
            for (c, &z) in logits.iter().enumerate() {
                probs[c] += (z - max).exp() / denom;
            }
        }
        let pred = argmax(&probs);
        let label = argmax(y.row(r));
        if pred != label {
            errors += 1;
        }
    }
    errors as f64 / n as f64
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
