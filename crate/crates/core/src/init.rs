//! Initialization strategies for the variational parameters.
//!
//! The iterative Bayesian linear model initializer walks the network
//! layer by layer: each output unit draws a fresh mini-batch, propagates
//! it through the already-initialized prefix with sampled weights, fits a
//! conjugate Bayesian linear regression from that unit's inputs to its
//! target column, and writes the factorized projection of the posterior
//! into its slice of the variational parameters. Conv units regress from
//! extracted patches instead of raw activations; classification targets
//! are first moved to log space with heteroscedastic noise.
//!
//! The five baselines set closed-form values (or an orthogonal/LSUV mean
//! matrix) and need no data beyond an optional calibration batch.

use std::time::Instant;

use crate::blm::{
    fit_blr, fit_hetero_blr, project_factorized, transform_labels, BlrPrior, FactorizedGaussian,
};
use crate::conv::im2col_slice;
use crate::error::{Error, Result};
use crate::linalg::{qr_thin, DenseMatrix};
use crate::net::{layer_apply_weights, layer_preactivation, LayerKind, Likelihood, Network};
use crate::rng::Rng;

/// How the iterative initializer draws the weights used to propagate a
/// unit's mini-batch through the already-initialized prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    /// One fresh sample of every prefix layer per output unit.
    FreshPerUnit,
    /// A single realization per initialized layer, drawn right after that
    /// layer is written and shared by all later fits.
    SharedPerLayer,
}

/// Which initializer to run, with its tunables.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    IBlm {
        batch_size: usize,
        alpha: f64,
        blr_prior: BlrPrior,
        blr_noise_variance: f64,
        propagation: Propagation,
    },
    Uninformative,
    Heuristic,
    XavierNormal,
    Orthogonal,
    Lsuv { tol: f64, max_iter: usize },
}

#[derive(Debug, Clone)]
pub struct InitSpec {
    pub strategy: InitStrategy,
    pub seed: u64,
}

impl InitSpec {
    /// Default iterative BLM settings: batch 64 (the training batch
    /// size), alpha 0.01, unit prior precision and unit noise variance.
    pub fn iblm(seed: u64) -> Self {
        InitSpec {
            strategy: InitStrategy::IBlm {
                batch_size: 64,
                alpha: 0.01,
                blr_prior: BlrPrior::default(),
                blr_noise_variance: 1.0,
                propagation: Propagation::FreshPerUnit,
            },
            seed,
        }
    }

    pub fn lsuv(seed: u64) -> Self {
        InitSpec {
            strategy: InitStrategy::Lsuv {
                tol: 0.1,
                max_iter: 10,
            },
            seed,
        }
    }
}

/// Hands out mini-batches as row indices: disjoint until the current
/// permutation is exhausted, then reshuffles.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    batch_size: usize,
    perm: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchCursor {
    pub fn new(n_rows: usize, batch_size: usize, rng: Rng) -> Result<Self> {
        if n_rows == 0 || batch_size == 0 {
            return Err(Error::DatasetTooSmall);
        }
        let mut cursor = BatchCursor {
            batch_size: batch_size.min(n_rows),
            perm: (0..n_rows).collect(),
            pos: 0,
            rng,
        };
        cursor.reshuffle();
        Ok(cursor)
    }

    fn reshuffle(&mut self) {
        let n = self.perm.len();
        for i in (1..n).rev() {
            let j = (self.rng.next_u64() % (i as u64 + 1)) as usize;
            self.perm.swap(i, j);
        }
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.perm.len() {
            self.reshuffle();
        }
        let take = self.batch_size.min(self.perm.len() - self.pos);
        let batch = self.perm[self.pos..self.pos + take].to_vec();
        self.pos += take;
        batch
    }
}

#[derive(Debug, Clone)]
pub struct NeuronDiagnostics {
    /// Mean squared residual of the posterior-mean fit on its batch.
    pub residual_variance: f64,
    /// Crude conditioning proxy: max/min diagonal of the posterior covariance.
    pub condition_estimate: f64,
}

#[derive(Debug, Clone)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub elapsed_ms: f64,
    pub neurons: Vec<NeuronDiagnostics>,
}

fn gather_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

/// Layer-wise Bayesian linear model initialization.
///
/// `x` is the full training input matrix (rows flattened for conv-first
/// nets) and `y` the target matrix: raw (standardized) targets for
/// regression, one-hot labels for classification. Unit `j` of a layer
/// regresses on label column `j mod y.cols()`.
pub fn init_iblm(
    net: &mut Network,
    x: &DenseMatrix,
    y: &DenseMatrix,
    cursor: &mut BatchCursor,
    spec: &InitSpec,
) -> Result<Vec<LayerDiagnostics>> {
    let InitStrategy::IBlm {
        alpha,
        blr_prior,
        blr_noise_variance,
        propagation,
        ..
    } = &spec.strategy
    else {
        panic!("init_iblm called with a non-IBlm spec");
    };
    if x.rows() == 0 {
        return Err(Error::DatasetTooSmall);
    }
    if y.rows() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} target rows for {} inputs",
            y.rows(),
            x.rows()
        )));
    }
    let classification = matches!(net.likelihood, Likelihood::Classification { .. });
    let label_cols = y.cols();
    let root = Rng::new(spec.seed);
    let mut diagnostics = Vec::with_capacity(net.layers.len());
    // shared-mode state: the whole training set pushed through one
    // realization of every initialized layer
    let mut realized_acts = x.clone();

    for l in 0..net.layers.len() {
        let started = Instant::now();
        let out_features = net.layers[l].out_features();
        // draw all batches up front; the per-unit fits below are order-free
        let batches: Vec<Vec<usize>> =
            (0..out_features).map(|_| cursor.next_batch()).collect();
        let layer_rng = root.derive(l as u64);

        let fitted: Vec<Result<(FactorizedGaussian, NeuronDiagnostics)>> = {
            let prefix = &net.layers[..l];
            let kind = net.layers[l].kind.clone();
            let shared_input = &realized_acts;
            crate::par::map_collect(out_features, |j| {
                let activations = match propagation {
                    Propagation::FreshPerUnit => {
                        let mut acts = gather_rows(x, &batches[j]);
                        let unit_rng = layer_rng.derive(j as u64);
                        for (p, prev) in prefix.iter().enumerate() {
                            let mut wrng = unit_rng.derive(p as u64);
                            let (weights, _) = prev.sample_weights(&mut wrng);
                            acts = layer_apply_weights(prev, &weights, &acts, true);
                        }
                        acts
                    }
                    Propagation::SharedPerLayer => gather_rows(shared_input, &batches[j]),
                };
                fit_one_unit(
                    activations,
                    y,
                    &batches[j],
                    &kind,
                    j % label_cols,
                    classification,
                    *alpha,
                    blr_prior,
                    *blr_noise_variance,
                )
            })
        };

        let layer = &mut net.layers[l];
        let mut neurons = Vec::with_capacity(out_features);
        for (j, res) in fitted.into_iter().enumerate() {
            let (q, diag) = res?;
            debug_assert_eq!(q.means.len(), layer.weight_rows());
            for (i, (&m, &v)) in q.means.iter().zip(&q.variances).enumerate() {
                layer.means.set(i, j, m);
                layer.log_variances.set(i, j, v.ln());
            }
            neurons.push(diag);
        }
        if *propagation == Propagation::SharedPerLayer {
            let mut wrng = layer_rng.derive(u64::MAX);
            let (weights, _) = layer.sample_weights(&mut wrng);
            realized_acts = layer_apply_weights(layer, &weights, &realized_acts, true);
        }
        diagnostics.push(LayerDiagnostics {
            layer: l,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
            neurons,
        });
    }
    debug_assert!(net.params_finite());
    Ok(diagnostics)
}

#[allow(clippy::too_many_arguments)]
fn fit_one_unit(
    activations: DenseMatrix,
    y: &DenseMatrix,
    batch: &[usize],
    kind: &LayerKind,
    label_col: usize,
    classification: bool,
    alpha: f64,
    prior: &BlrPrior,
    noise_variance: f64,
) -> Result<(FactorizedGaussian, NeuronDiagnostics)> {
    // conv units regress from patches; each patch inherits its row's label
    let (design, replicas) = match kind {
        LayerKind::Dense { .. } => (activations, 1),
        LayerKind::Conv { geom, .. } => {
            let positions = geom.out_positions();
            let mut d = DenseMatrix::zeros(activations.rows() * positions, geom.patch_len());
            for r in 0..activations.rows() {
                let patches = im2col_slice(activations.row(r), geom);
                for p in 0..positions {
                    d.row_mut(r * positions + p).copy_from_slice(patches.row(p));
                }
            }
            (d, positions)
        }
    };
    let design_aug = design.append_ones_column();

    let posterior = if classification {
        let onehot = gather_rows(y, batch);
        let transformed = transform_labels(&onehot, alpha)?;
        let mut targets = Vec::with_capacity(batch.len() * replicas);
        let mut variances = Vec::with_capacity(batch.len() * replicas);
        for r in 0..batch.len() {
            for _ in 0..replicas {
                targets.push(transformed.means.get(r, label_col));
                variances.push(transformed.variances.get(r, label_col));
            }
        }
        fit_hetero_blr(&design_aug, &targets, prior, &variances)?
    } else {
        let mut targets = Vec::with_capacity(batch.len() * replicas);
        for &r in batch {
            for _ in 0..replicas {
                targets.push(y.get(r, label_col));
            }
        }
        fit_blr(&design_aug, &targets, prior, noise_variance)?
    };

    let q = project_factorized(&posterior)?;
    let residual_variance = residual_against(
        &design_aug,
        &posterior.mean,
        y,
        batch,
        replicas,
        label_col,
        classification,
        alpha,
    );
    let cond = {
        let d = posterior.covariance.rows();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..d {
            let v = posterior.covariance.get(i, i);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    };
    Ok((
        q,
        NeuronDiagnostics {
            residual_variance,
            condition_estimate: cond,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn residual_against(
    design_aug: &DenseMatrix,
    mean: &[f64],
    y: &DenseMatrix,
    batch: &[usize],
    replicas: usize,
    label_col: usize,
    classification: bool,
    alpha: f64,
) -> f64 {
    let mut acc = 0.0;
    for (i, &r) in batch.iter().enumerate() {
        let target = if classification {
            let shifted = y.get(r, label_col) + alpha;
            let var = (1.0 / shifted + 1.0).ln();
            shifted.ln() - 0.5 * var
        } else {
            y.get(r, label_col)
        };
        for p in 0..replicas {
            let row = design_aug.row(i * replicas + p);
            let pred: f64 = row.iter().zip(mean).map(|(a, b)| a * b).sum();
            let resid = pred - target;
            acc += resid * resid;
        }
    }
    acc / (batch.len() * replicas) as f64
}

/// Start from the prior: means 0, variances 1, so the initial KL term of
/// the objective is exactly zero.
pub fn init_uninformative(net: &mut Network) {
    for layer in &mut net.layers {
        layer.means = DenseMatrix::zeros(layer.weight_rows(), layer.out_features());
        layer.log_variances = DenseMatrix::zeros(layer.weight_rows(), layer.out_features());
    }
}

/// Means 0, variances `1 / D_in` with `D_in` the unit fan-in
/// (`C*kh*kw` for conv layers).
pub fn init_heuristic(net: &mut Network) {
    for layer in &mut net.layers {
        let lv = -(layer.fan_in().max(1) as f64).ln();
        layer.means = DenseMatrix::zeros(layer.weight_rows(), layer.out_features());
        layer.log_variances = DenseMatrix::filled(layer.weight_rows(), layer.out_features(), lv);
    }
}

/// Means 0, variances `2 / (D_in + D_out)`.
pub fn init_xavier(net: &mut Network) {
    for layer in &mut net.layers {
        let denom = (layer.fan_in() + layer.out_features()).max(1) as f64;
        let lv = (2.0 / denom).ln();
        layer.means = DenseMatrix::zeros(layer.weight_rows(), layer.out_features());
        layer.log_variances = DenseMatrix::filled(layer.weight_rows(), layer.out_features(), lv);
    }
}

/// Orthogonal (or semi-orthogonal) mean matrix from the QR decomposition
/// of a Gaussian draw, sign-corrected by the diagonal of R; bias means
/// zero; variances `1 / D_in`.
pub fn init_orthogonal(net: &mut Network, rng: &mut Rng) {
    for layer in &mut net.layers {
        let rows = layer.fan_in();
        let cols = layer.out_features();
        let lv = -(rows.max(1) as f64).ln();
        layer.means = DenseMatrix::zeros(layer.weight_rows(), cols);
        layer.log_variances = DenseMatrix::filled(layer.weight_rows(), cols, lv);
        if rows == 0 {
            continue;
        }
        if rows >= cols {
            let g = rng.gaussian_matrix(rows, cols, 0.0, 1.0);
            let (q, signs) = qr_thin(&g);
            for i in 0..rows {
                for j in 0..cols {
                    layer.means.set(i, j, q.get(i, j) * signs[j]);
                }
            }
        } else {
            let g = rng.gaussian_matrix(cols, rows, 0.0, 1.0);
            let (q, signs) = qr_thin(&g);
            for i in 0..rows {
                for j in 0..cols {
                    layer.means.set(i, j, q.get(j, i) * signs[i]);
                }
            }
        }
    }
}

/// Per-layer outcome of the unit-variance scaling pass.
#[derive(Debug, Clone)]
pub struct LsuvReport {
    pub converged: Vec<bool>,
    pub rescales: Vec<usize>,
    pub final_variances: Vec<f64>,
}

/// Layer-sequential unit-variance scaling of the orthogonal means.
///
/// Each layer's mean matrix is rescaled by the inverse square root of the
/// empirical pre-activation variance of `batch_x` propagated through the
/// mean weights, until the variance falls within `tol` of one or
/// `max_iter` rescales have been spent. Weight variances stay `1 / D_in`.
pub fn init_lsuv(
    net: &mut Network,
    batch_x: &DenseMatrix,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
) -> Result<LsuvReport> {
    assert!(tol > 0.0 && max_iter >= 1, "invalid LSUV settings");
    if batch_x.cols() != net.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "calibration batch width {} does not match network input {}",
            batch_x.cols(),
            net.input_width()
        )));
    }
    init_orthogonal(net, rng);
    let mut report = LsuvReport {
        converged: Vec::new(),
        rescales: Vec::new(),
        final_variances: Vec::new(),
    };
    let mut h = batch_x.clone();
    for layer in &mut net.layers {
        let mut rescales = 0;
        let mut converged = false;
        let mut z = layer_preactivation(layer, &layer.means.clone(), &h);
        let mut var = population_variance(z.data());
        loop {
            if (var - 1.0).abs() < tol {
                converged = true;
                break;
            }
            if rescales >= max_iter || var <= 0.0 {
                break;
            }
            layer.means.scale(1.0 / var.sqrt());
            rescales += 1;
            z = layer_preactivation(layer, &layer.means.clone(), &h);
            var = population_variance(z.data());
        }
        report.converged.push(converged);
        report.rescales.push(rescales);
        report.final_variances.push(var);
        h = z.map(|v| layer.activation.apply(v));
    }
    Ok(report)
}

fn population_variance(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Stream ids for the dispatcher's derived generators.
const STREAM_CURSOR: u64 = 0x1b;
const STREAM_ORTHO: u64 = 0x2c;
const STREAM_LSUV_BATCH: u64 = 0x3d;

/// Runs the initializer named by `spec` against the training data.
/// Returns layer diagnostics for the iterative BLM strategy.
pub fn initialize(
    net: &mut Network,
    spec: &InitSpec,
    x: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<Option<Vec<LayerDiagnostics>>> {
    match &spec.strategy {
        InitStrategy::IBlm { batch_size, .. } => {
            let rng = Rng::new(spec.seed).derive(STREAM_CURSOR);
            let mut cursor = BatchCursor::new(x.rows(), *batch_size, rng)?;
            let diags = init_iblm(net, x, y, &mut cursor, spec)?;
            Ok(Some(diags))
        }
        InitStrategy::Uninformative => {
            init_uninformative(net);
            Ok(None)
        }
        InitStrategy::Heuristic => {
            init_heuristic(net);
            Ok(None)
        }
        InitStrategy::XavierNormal => {
            init_xavier(net);
            Ok(None)
        }
        InitStrategy::Orthogonal => {
            let mut rng = Rng::new(spec.seed).derive(STREAM_ORTHO);
            init_orthogonal(net, &mut rng);
            Ok(None)
        }
        InitStrategy::Lsuv { tol, max_iter } => {
            let cursor_rng = Rng::new(spec.seed).derive(STREAM_LSUV_BATCH);
            let mut cursor = BatchCursor::new(x.rows(), 256.min(x.rows()), cursor_rng)?;
            let batch = gather_rows(x, &cursor.next_batch());
            let mut rng = Rng::new(spec.seed).derive(STREAM_ORTHO);
            init_lsuv(net, &batch, *tol, *max_iter, &mut rng)?;
            Ok(None)
        }
    }
}
