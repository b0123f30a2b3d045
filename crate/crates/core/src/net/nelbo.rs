//! The negative evidence lower bound and its gradients.
//!
//! `nelbo = nll + lambda * kl` where the negative log-likelihood term is a
//! mini-batch Monte Carlo estimate scaled by `n_total / batch` and the KL
//! to the standard normal prior is closed form. Gradients with respect to
//! every variational mean, log-variance and the regression noise parameter
//! are accumulated by hand-written reverse mode through the forward tape.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::net::forward::{forward_with_mode, LayerTape, SampleMode};
use crate::net::{LayerKind, Likelihood, Network};
use crate::rng::Rng;

/// Gradients for one layer, shaped like its parameter matrices.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub d_means: DenseMatrix,
    pub d_log_variances: DenseMatrix,
}

/// Gradients for every parameter of a network.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
    pub d_log_noise_variance: f64,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        GradientSet {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    d_means: DenseMatrix::zeros(l.means.rows(), l.means.cols()),
                    d_log_variances: DenseMatrix::zeros(l.means.rows(), l.means.cols()),
                })
                .collect(),
            d_log_noise_variance: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_means.add_scaled(&b.d_means, scale);
            a.d_log_variances.add_scaled(&b.d_log_variances, scale);
        }
        self.d_log_noise_variance += scale * other.d_log_noise_variance;
    }

    pub fn is_finite(&self) -> bool {
        self.d_log_noise_variance.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.d_means.is_finite() && l.d_log_variances.is_finite())
    }
}

/// One evaluation of the objective: the Monte Carlo NLL estimate, the
/// closed-form KL, the annealing weight and the gradients of
/// `nll + lambda * kl`.
#[derive(Debug, Clone)]
pub struct NelboEstimate {
    pub nll: f64,
    pub kl: f64,
    pub lambda: f64,
    pub total: f64,
    pub gradients: GradientSet,
}

/// Closed-form KL from the mean-field posterior to the N(0, 1) prior:
/// the sum over weights of `(sigma^2 + mu^2 - 1 - log sigma^2) / 2`.
/// Zero exactly when every weight sits at the prior.
pub fn kl_to_prior(net: &Network) -> f64 {
    let mut kl = 0.0;
    for layer in &net.layers {
        for (&mu, &lv) in layer.means.data().iter().zip(layer.log_variances.data()) {
            kl += 0.5 * (lv.exp() + mu * mu - 1.0 - lv);
        }
    }
    kl
}

fn kl_gradients(net: &Network, grads: &mut GradientSet, lambda: f64) {
    for (layer, grad) in net.layers.iter().zip(grads.layers.iter_mut()) {
        let dm = grad.d_means.data_mut();
        let dv = grad.d_log_variances.data_mut();
        for (i, (&mu, &lv)) in layer
            .means
            .data()
            .iter()
            .zip(layer.log_variances.data())
            .enumerate()
        {
            dm[i] += lambda * mu;
            dv[i] += lambda * 0.5 * (lv.exp() - 1.0);
        }
    }
}

/// Mini-batch NELBO with `n_mc` Monte Carlo samples, training forward mode
/// (local reparameterization on dense layers, weight sampling on conv).
pub fn nelbo(
    net: &Network,
    batch_x: &DenseMatrix,
    batch_y: &DenseMatrix,
    n_total: usize,
    n_mc: usize,
    lambda: f64,
    rng: &mut Rng,
) -> Result<NelboEstimate> {
    nelbo_with_mode(net, batch_x, batch_y, n_total, n_mc, lambda, rng, SampleMode::LocalReparam)
}

/// As [`nelbo`] but with an explicit sampling scheme.
#[allow(clippy::too_many_arguments)]
pub fn nelbo_with_mode(
    net: &Network,
    batch_x: &DenseMatrix,
    batch_y: &DenseMatrix,
    n_total: usize,
    n_mc: usize,
    lambda: f64,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<NelboEstimate> {
    assert!(n_mc >= 1, "need at least one Monte Carlo sample");
    assert!(lambda > 0.0 && lambda <= 1.0, "lambda must lie in (0, 1]");
    check_targets(net, batch_x, batch_y)?;

    let base = rng.split();
    // one independent, pre-assigned stream per Monte Carlo sample so the
    // result does not depend on scheduling
    let passes: Vec<Result<(f64, GradientSet)>> = crate::par::map_collect(n_mc, |s| {
        let mut sample_rng = base.derive(s as u64);
        sample_pass(net, batch_x, batch_y, n_total, &mut sample_rng, mode)
    });

    let mut nll = 0.0;
    let mut grads = GradientSet::zeros_like(net);
    let w = 1.0 / n_mc as f64;
    for pass in passes {
        let (nll_s, grad_s) = pass?;
        nll += w * nll_s;
        grads.add_scaled(&grad_s, w);
    }
    let kl = kl_to_prior(net);
    kl_gradients(net, &mut grads, lambda);
    let total = nll + lambda * kl;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(NelboEstimate {
        nll,
        kl,
        lambda,
        total,
        gradients: grads,
    })
}

fn check_targets(net: &Network, x: &DenseMatrix, y: &DenseMatrix) -> Result<()> {
    if y.rows() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} target rows for {} input rows",
            y.rows(),
            x.rows()
        )));
    }
    let want = match &net.likelihood {
        Likelihood::Regression { .. } => net.output_width(),
        Likelihood::Classification { classes, .. } => *classes,
    };
    if y.cols() != want {
        return Err(Error::ShapeMismatch(format!(
            "target width {} does not match likelihood width {want}",
            y.cols()
        )));
    }
    Ok(())
}

/// One Monte Carlo sample: forward, scaled negative log-likelihood, and
/// reverse accumulation of its gradient.
fn sample_pass(
    net: &Network,
    batch_x: &DenseMatrix,
    batch_y: &DenseMatrix,
    n_total: usize,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<(f64, GradientSet)> {
    let (outputs, tape) = forward_with_mode(net, batch_x, rng, mode)?;
    let scale = n_total as f64 / batch_x.rows() as f64;

    let mut grads = GradientSet::zeros_like(net);
    let mut d_out = DenseMatrix::zeros(outputs.rows(), outputs.cols());
    let nll_s;
    match &net.likelihood {
        Likelihood::Regression { log_noise_variance } => {
            let s2 = log_noise_variance.exp();
            let mut sum_logp = 0.0;
            let mut d_log_noise = 0.0;
            let half_log_norm = 0.5 * (std::f64::consts::TAU * s2).ln();
            for r in 0..outputs.rows() {
                for c in 0..outputs.cols() {
                    let resid = outputs.get(r, c) - batch_y.get(r, c);
                    sum_logp += -half_log_norm - 0.5 * resid * resid / s2;
                    d_out.set(r, c, scale * resid / s2);
                    d_log_noise += scale * 0.5 * (1.0 - resid * resid / s2);
                }
            }
            nll_s = -scale * sum_logp;
            grads.d_log_noise_variance = d_log_noise;
        }
        Likelihood::Classification { .. } => {
            let mut sum_logp = 0.0;
            for r in 0..outputs.rows() {
                let logits = outputs.row(r);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
                let lse = max + sum_exp.ln();
                let mut logp = -lse;
                for (c, &z) in logits.iter().enumerate() {
                    logp += batch_y.get(r, c) * z;
                }
                sum_logp += logp;
                let drow = d_out.row_mut(r);
                for (c, &z) in logits.iter().enumerate() {
                    let softmax = (z - lse).exp();
                    drow[c] = scale * (softmax - batch_y.get(r, c));
                }
            }
            nll_s = -scale * sum_logp;
        }
    }

    backward(net, &tape, d_out, &mut grads);
    Ok((nll_s, grads))
}

/// Reverse-mode accumulation through the tape; `d_out` is the gradient of
/// the scalar loss with respect to the network outputs.
fn backward(net: &Network, tape: &Tape, d_out: DenseMatrix, grads: &mut GradientSet) {
    let mut upstream = d_out;
    for (idx, layer) in net.layers.iter().enumerate().rev() {
        let entry = &tape.layers[idx];
        let grad = &mut grads.layers[idx];
        upstream = match entry {
            LayerTape::DenseSampled {
                input_aug,
                weights,
                epsilon,
                z,
            } => {
                let dz = apply_activation_grad(layer.activation, z, &upstream);
                let dw = input_aug.transpose().matmul(&dz);
                accumulate_sampled_weight_grads(layer, &dw, epsilon, grad);
                let d_in_aug = dz.matmul(&weights.transpose());
                drop_last_column(&d_in_aug)
            }
            LayerTape::DenseLocal {
                input_aug,
                std_pre,
                epsilon,
                z,
            } => {
                let dz = apply_activation_grad(layer.activation, z, &upstream);
                // mean path
                let d_mean_pre = &dz;
                grad.d_means
                    .add_scaled(&input_aug.transpose().matmul(d_mean_pre), 1.0);
                // variance path: z = m + sqrt(v) eps
                let mut d_var = DenseMatrix::zeros(dz.rows(), dz.cols());
                for i in 0..dz.data().len() {
                    let s = std_pre.data()[i];
                    if s > 0.0 {
                        d_var.data_mut()[i] = dz.data()[i] * epsilon.data()[i] / (2.0 * s);
                    }
                }
                let input_sq = input_aug.map(|v| v * v);
                let variances = layer.log_variances.map(f64::exp);
                let d_v_weights = input_sq.transpose().matmul(&d_var);
                for (i, &vv) in variances.data().iter().enumerate() {
                    grad.d_log_variances.data_mut()[i] += d_v_weights.data()[i] * vv;
                }
                // input path: through A mu and through (A .* A) sigma^2
                let mut d_in_aug = d_mean_pre.matmul(&layer.means.transpose());
                let d_var_in = d_var.matmul(&variances.transpose());
                for i in 0..d_in_aug.data().len() {
                    d_in_aug.data_mut()[i] += 2.0 * input_aug.data()[i] * d_var_in.data()[i];
                }
                drop_last_column(&d_in_aug)
            }
            LayerTape::ConvSampled {
                patches_aug,
                weights,
                epsilon,
                z,
            } => {
                let LayerKind::Conv { geom, out_channels } = &layer.kind else {
                    unreachable!("conv tape on dense layer")
                };
                let positions = geom.out_positions();
                let batch = tape.batch;
                // un-flatten the upstream (batch x out_channels*positions)
                // into (batch*positions) x out_channels with the
                // activation derivative applied
                let mut dz = DenseMatrix::zeros(batch * positions, *out_channels);
                for r in 0..batch {
                    let up = upstream.row(r);
                    for o in 0..*out_channels {
                        for p in 0..positions {
                            let zi = z.get(r * positions + p, o);
                            dz.set(
                                r * positions + p,
                                o,
                                up[o * positions + p] * layer.activation.derivative(zi),
                            );
                        }
                    }
                }
                let dw = patches_aug.transpose().matmul(&dz);
                accumulate_sampled_weight_grads(layer, &dw, epsilon, grad);
                let d_patches_aug = dz.matmul(&weights.transpose());
                // scatter patch gradients back to the input tensor rows
                let patch_len = geom.patch_len();
                let mut d_input = DenseMatrix::zeros(batch, geom.input_len());
                for r in 0..batch {
                    let mut block = DenseMatrix::zeros(positions, patch_len);
                    for p in 0..positions {
                        block
                            .row_mut(p)
                            .copy_from_slice(&d_patches_aug.row(r * positions + p)[..patch_len]);
                    }
                    let back = crate::conv::col2im_slice(&block, geom);
                    d_input.row_mut(r).copy_from_slice(&back);
                }
                d_input
            }
        };
    }
}

fn apply_activation_grad(
    activation: crate::net::Activation,
    z: &DenseMatrix,
    upstream: &DenseMatrix,
) -> DenseMatrix {
    let mut dz = upstream.clone();
    for (d, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
        *d *= activation.derivative(zv);
    }
    dz
}

/// For `W = mu + exp(lv/2) .* eps`: `d mu = dW`, `d lv = dW .* eps .* sigma / 2`.
fn accumulate_sampled_weight_grads(
    layer: &crate::net::VariationalLayer,
    dw: &DenseMatrix,
    epsilon: &DenseMatrix,
    grad: &mut LayerGradient,
) {
    grad.d_means.add_scaled(dw, 1.0);
    let dv = grad.d_log_variances.data_mut();
    for (i, ((&d, &e), &lv)) in dw
        .data()
        .iter()
        .zip(epsilon.data())
        .zip(layer.log_variances.data())
        .enumerate()
    {
        dv[i] += d * e * 0.5 * (0.5 * lv).exp();
    }
}

fn drop_last_column(m: &DenseMatrix) -> DenseMatrix {
    let cols = m.cols() - 1;
    let mut out = DenseMatrix::zeros(m.rows(), cols);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[..cols]);
    }
    out
}

use crate::net::forward::Tape;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, VariationalLayer};

    fn prior_net() -> Network {
        Network::new(
            vec![
                VariationalLayer::dense(2, 4, Activation::Relu),
                VariationalLayer::dense(4, 1, Activation::Identity),
            ],
            Likelihood::Regression { log_noise_variance: 0.0 },
        )
        .unwrap()
    }

    #[test]
    fn kl_zero_at_prior_and_half_for_unit_mean() {
        let net = prior_net();
        assert_eq!(kl_to_prior(&net), 0.0);

        let mut single = Network::new(
            vec![VariationalLayer::dense(0, 1, Activation::Identity)],
            Likelihood::Regression { log_noise_variance: 0.0 },
        )
        .unwrap();
        single.layers[0].means.set(0, 0, 1.0);
        assert!((kl_to_prior(&single) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_positive_off_prior() {
        let mut rng = Rng::new(88);
        for _ in 0..20 {
            let mut net = prior_net();
            for l in &mut net.layers {
                l.means = rng.gaussian_matrix(l.weight_rows(), l.out_features(), 0.0, 0.3);
                l.log_variances =
                    rng.gaussian_matrix(l.weight_rows(), l.out_features(), -0.5, 0.3);
            }
            assert!(kl_to_prior(&net) > 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // E_q[log q - log p] for factorized Gaussians, estimated per weight
        let mut rng = Rng::new(4);
        let mut net = prior_net();
        for l in &mut net.layers {
            l.means = rng.gaussian_matrix(l.weight_rows(), l.out_features(), 0.0, 0.6);
            l.log_variances = rng.gaussian_matrix(l.weight_rows(), l.out_features(), -1.0, 0.4);
        }
        let closed = kl_to_prior(&net);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let mut r = rng.derive(i as u64);
            let mut logq_logp = 0.0;
            for l in &net.layers {
                for (&mu, &lv) in l.means.data().iter().zip(l.log_variances.data()) {
                    let sigma = (0.5 * lv).exp();
                    let w = mu + sigma * r.normal();
                    let logq = -0.5 * lv - 0.5 * (w - mu) * (w - mu) / lv.exp();
                    let logp = -0.5 * w * w;
                    logq_logp += logq - logp;
                }
            }
            sum += logq_logp;
            sumsq += logq_logp * logq_logp;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - closed).abs() < 3.0 * se,
            "closed {closed}, mc {mean}, se {se}"
        );
    }

    #[test]
    fn nelbo_at_prior_is_pure_nll() {
        let net = prior_net();
        let mut rng = Rng::new(10);
        let x = rng.gaussian_matrix(8, 2, 0.0, 1.0);
        let y = rng.gaussian_matrix(8, 1, 0.0, 1.0);
        let est = nelbo(&net, &x, &y, 80, 4, 1.0, &mut rng).unwrap();
        assert_eq!(est.kl, 0.0);
        assert_eq!(est.total, est.nll);
    }

    #[test]
    fn perfect_deterministic_fit_leaves_normalizer_only() {
        // single identity layer, zero variances, weights matching the
        // generating map: residuals vanish and the NLL reduces to the
        // Gaussian normalizing constant
        let mut net = Network::new(
            vec![VariationalLayer::dense(1, 1, Activation::Identity)],
            Likelihood::Regression { log_noise_variance: -0.7 },
        )
        .unwrap();
        net.layers[0].means.set(0, 0, 2.0); // slope
        net.layers[0].means.set(1, 0, 0.5); // intercept
        net.layers[0].log_variances = DenseMatrix::filled(2, 1, -1000.0);
        let mut rng = Rng::new(3);
        let x = rng.gaussian_matrix(16, 1, 0.0, 1.0);
        let y = x.map(|v| 2.0 * v + 0.5);
        let n_total = 160;
        let est = nelbo(&net, &x, &y, n_total, 3, 1.0, &mut rng).unwrap();
        let s2 = (-0.7f64).exp();
        let expected = n_total as f64 * 0.5 * (std::f64::consts::TAU * s2).ln();
        assert!(
            (est.nll - expected).abs() < 1e-9 * expected.abs(),
            "nll {} expected {expected}",
            est.nll
        );
    }

    #[test]
    fn deterministic_across_calls() {
        let mut net = prior_net();
        let mut rng = Rng::new(6);
        for l in &mut net.layers {
            l.means = rng.gaussian_matrix(l.weight_rows(), l.out_features(), 0.0, 0.4);
        }
        let x = rng.gaussian_matrix(8, 2, 0.0, 1.0);
        let y = rng.gaussian_matrix(8, 1, 0.0, 1.0);
        let a = nelbo(&net, &x, &y, 100, 8, 0.5, &mut Rng::new(42)).unwrap();
        let b = nelbo(&net, &x, &y, 100, 8, 0.5, &mut Rng::new(42)).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.nll, b.nll);
        for (ga, gb) in a.gradients.layers.iter().zip(&b.gradients.layers) {
            assert_eq!(ga.d_means, gb.d_means);
            assert_eq!(ga.d_log_variances, gb.d_log_variances);
        }
    }

    #[test]
    fn exploding_parameters_report_non_finite_loss() {
        let mut net = prior_net();
        net.layers[0].means = DenseMatrix::filled(3, 4, 1e300);
        let x = DenseMatrix::filled(4, 2, 1e4);
        let y = DenseMatrix::zeros(4, 1);
        assert!(matches!(
            nelbo(&net, &x, &y, 4, 2, 1.0, &mut Rng::new(0)),
            Err(Error::NonFiniteLoss)
        ));
    }

    #[test]
    fn uniform_classifier_nll_is_log_k() {
        // all-zero logits: every class has probability 1/k
        let net = Network::new(
            vec![VariationalLayer::dense(2, 3, Activation::Identity)],
            Likelihood::Classification { classes: 3, alpha: 0.01 },
        )
        .unwrap();
        let mut net = net;
        net.layers[0].log_variances = DenseMatrix::filled(3, 3, -1000.0);
        let x = DenseMatrix::zeros(5, 2);
        let mut y = DenseMatrix::zeros(5, 3);
        for r in 0..5 {
            y.set(r, r % 3, 1.0);
        }
        let est = nelbo(&net, &x, &y, 5, 2, 1.0, &mut Rng::new(0)).unwrap();
        // scale n/m = 1, 5 points, each -log(1/3)
        assert!((est.nll - 5.0 * 3.0f64.ln()).abs() < 1e-12);
    }
}
