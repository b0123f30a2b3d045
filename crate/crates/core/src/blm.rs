//! Closed-form Bayesian linear regression, its best fully factorized
//! Gaussian approximation, and the label transform that turns one-hot
//! classification targets into heteroscedastic regression targets.

use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, solve_spd, DenseMatrix};

/// Isotropic Gaussian prior over regression weights with precision `delta`
/// (prior covariance `delta^-1 * I`).
#[derive(Debug, Clone, Copy)]
pub struct BlrPrior {
    pub precision: f64,
}

impl Default for BlrPrior {
    fn default() -> Self {
        // unit isotropic prior keeps the initialization scale-compatible
        // with the N(0,1) weight prior
        BlrPrior { precision: 1.0 }
    }
}

/// Observation-noise model of a fitted linear regression.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Homoscedastic(f64),
    Heteroscedastic(Vec<f64>),
}

/// Gaussian posterior over one linear model's weights.
#[derive(Debug, Clone)]
pub struct BlrPosterior {
    pub mean: Vec<f64>,
    pub covariance: DenseMatrix,
    pub noise: NoiseModel,
}

/// Independent Gaussian per coordinate: the projection target.
#[derive(Debug, Clone)]
pub struct FactorizedGaussian {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Per-entry Gaussian surrogates for one-hot labels: a log-Normal moment
/// match of Gamma(y + alpha, 1) in log space.
#[derive(Debug, Clone)]
pub struct TransformedLabels {
    pub means: DenseMatrix,
    pub variances: DenseMatrix,
}

/// Conjugate Gaussian posterior for `y = X w + eps`, `eps ~ N(0, sigma^2)`:
/// `Sigma = (sigma^-2 X^T X + delta I)^-1`, `mu = sigma^-2 Sigma X^T y`.
pub fn fit_blr(
    x: &DenseMatrix,
    y: &[f64],
    prior: &BlrPrior,
    noise_variance: f64,
) -> Result<BlrPosterior> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::ShapeMismatch("empty design matrix".into()));
    }
    if y.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            y.len(),
            x.rows()
        )));
    }
    assert!(noise_variance > 0.0, "noise variance must be positive");
    assert!(prior.precision > 0.0, "prior precision must be positive");
    let inv_noise = 1.0 / noise_variance;
    let (precision, rhs) = weighted_normal_equations(x, y, prior.precision, |_| inv_noise);
    posterior_from_normal_equations(precision, rhs, NoiseModel::Homoscedastic(noise_variance))
}

/// Heteroscedastic variant: `Sigma = (X^T Lambda^-1 X + delta I)^-1`,
/// `mu = Sigma X^T Lambda^-1 y` with `Lambda = diag(noise_variances)`.
pub fn fit_hetero_blr(
    x: &DenseMatrix,
    y: &[f64],
    prior: &BlrPrior,
    noise_variances: &[f64],
) -> Result<BlrPosterior> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::ShapeMismatch("empty design matrix".into()));
    }
    if y.len() != x.rows() || noise_variances.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets / {} variances for {} rows",
            y.len(),
            noise_variances.len(),
            x.rows()
        )));
    }
    assert!(
        noise_variances.iter().all(|&v| v > 0.0),
        "noise variances must be positive"
    );
    let (precision, rhs) =
        weighted_normal_equations(x, y, prior.precision, |k| 1.0 / noise_variances[k]);
    posterior_from_normal_equations(
        precision,
        rhs,
        NoiseModel::Heteroscedastic(noise_variances.to_vec()),
    )
}

fn weighted_normal_equations(
    x: &DenseMatrix,
    y: &[f64],
    prior_precision: f64,
    weight: impl Fn(usize) -> f64,
) -> (DenseMatrix, Vec<f64>) {
    let d = x.cols();
    let mut precision = DenseMatrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for k in 0..x.rows() {
        let w = weight(k);
        let row = x.row(k);
        for i in 0..d {
            let wxi = w * row[i];
            rhs[i] += wxi * y[k];
            let prow = precision.row_mut(i);
            for j in i..d {
                prow[j] += wxi * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            let v = precision.get(j, i);
            precision.set(i, j, v);
        }
        let v = precision.get(i, i) + prior_precision;
        precision.set(i, i, v);
    }
    (precision, rhs)
}

fn posterior_from_normal_equations(
    precision: DenseMatrix,
    rhs: Vec<f64>,
    noise: NoiseModel,
) -> Result<BlrPosterior> {
    let d = precision.rows();
    let covariance = inverse_spd(&precision)?;
    let rhs_m = DenseMatrix::from_vec_unchecked(d, 1, rhs);
    let mean_m = solve_spd(&precision, &rhs_m)?;
    Ok(BlrPosterior {
        mean: mean_m.data().to_vec(),
        covariance,
        noise,
    })
}

/// KL-optimal fully factorized approximation of a Gaussian posterior:
/// the means carry over and each variance is `1 / (Sigma^-1)_ii`.
pub fn project_factorized(posterior: &BlrPosterior) -> Result<FactorizedGaussian> {
    let precision = inverse_spd(&posterior.covariance)?;
    let variances = (0..precision.rows())
        .map(|i| 1.0 / precision.get(i, i))
        .collect();
    Ok(FactorizedGaussian {
        means: posterior.mean.clone(),
        variances,
    })
}

/// Turns one-hot labels into Gaussian regression targets:
/// `var = log((y + alpha)^-1 + 1)`, `mean = log(y + alpha) - var / 2`.
///
/// The resulting log-Normal matches the mean and variance (both `y + alpha`)
/// of the Gamma(y + alpha, 1) variables whose normalized ratio is Dirichlet.
pub fn transform_labels(y_onehot: &DenseMatrix, alpha: f64) -> Result<TransformedLabels> {
    assert!(alpha > 0.0, "alpha must be positive");
    let mut means = DenseMatrix::zeros(y_onehot.rows(), y_onehot.cols());
    let mut variances = DenseMatrix::zeros(y_onehot.rows(), y_onehot.cols());
    for r in 0..y_onehot.rows() {
        let row = y_onehot.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadOneHot { row: r });
        }
        for (c, &y) in row.iter().enumerate() {
            let shifted = y + alpha;
            let var = (1.0 / shifted + 1.0).ln();
            variances.set(r, c, var);
            means.set(r, c, shifted.ln() - 0.5 * var);
        }
    }
    Ok(TransformedLabels { means, variances })
}

/// Predictive mean and variance at a single input.
///
/// The variance adds the observation noise: the homoscedastic `sigma^2`
/// when the posterior carries one, otherwise the caller-supplied value
/// (heteroscedastic fits have no single noise level).
pub fn blr_predict(
    posterior: &BlrPosterior,
    x_star: &[f64],
    hetero_obs_variance: Option<f64>,
) -> (f64, f64) {
    assert_eq!(x_star.len(), posterior.mean.len(), "feature length mismatch");
    let mean: f64 = x_star
        .iter()
        .zip(&posterior.mean)
        .map(|(x, m)| x * m)
        .sum();
    let d = x_star.len();
    let mut quad = 0.0;
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += posterior.covariance.get(i, j) * x_star[j];
        }
        quad += x_star[i] * acc;
    }
    let obs = match &posterior.noise {
        NoiseModel::Homoscedastic(s2) => *s2,
        NoiseModel::Heteroscedastic(_) => hetero_obs_variance.unwrap_or(0.0),
    };
    (mean, quad + obs)
}
