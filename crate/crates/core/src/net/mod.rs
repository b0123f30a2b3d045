//! Mean-field Gaussian variational networks: dense and convolutional
//! layers with an independent Gaussian per weight, plus the forward
//! passes, objective and gradients needed for stochastic variational
//! inference.

mod checkpoint;
mod forward;
mod nelbo;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward_local_reparam, forward_mean, forward_sample, SampleMode, Tape};
pub use nelbo::{kl_to_prior, nelbo, nelbo_with_mode, GradientSet, LayerGradient, NelboEstimate};

use crate::conv::PatchGeometry;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidNetwork(format!("unknown activation {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Dense { d_in: usize, d_out: usize },
    Conv { geom: PatchGeometry, out_channels: usize },
}

/// One layer's variational parameters: a Gaussian per weight, stored as a
/// means matrix and a log-variance matrix of shape
/// `(fan_in + 1) x out_features`. The trailing weight row is the bias,
/// multiplied by a constant-1 column appended to the layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub kind: LayerKind,
    pub means: DenseMatrix,
    pub log_variances: DenseMatrix,
    pub activation: Activation,
}

impl VariationalLayer {
    /// Dense layer with means 0 and unit variances (the prior).
    pub fn dense(d_in: usize, d_out: usize, activation: Activation) -> Self {
        VariationalLayer {
            kind: LayerKind::Dense { d_in, d_out },
            means: DenseMatrix::zeros(d_in + 1, d_out),
            log_variances: DenseMatrix::zeros(d_in + 1, d_out),
            activation,
        }
    }

    /// Convolutional layer; the filter is stored reshaped as a
    /// `(C*kh*kw + 1) x out_channels` matrix matching the patch layout.
    pub fn conv(geom: PatchGeometry, out_channels: usize, activation: Activation) -> Result<Self> {
        geom.validate()?;
        let rows = geom.patch_len() + 1;
        Ok(VariationalLayer {
            kind: LayerKind::Conv { geom, out_channels },
            means: DenseMatrix::zeros(rows, out_channels),
            log_variances: DenseMatrix::zeros(rows, out_channels),
            activation,
        })
    }

    /// Number of inputs feeding one unit (excluding the bias).
    pub fn fan_in(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { d_in, .. } => *d_in,
            LayerKind::Conv { geom, .. } => geom.patch_len(),
        }
    }

    /// Number of independent linear units (dense outputs or filters).
    pub fn out_features(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { d_out, .. } => *d_out,
            LayerKind::Conv { out_channels, .. } => *out_channels,
        }
    }

    /// Width of a flattened input row.
    pub fn in_width(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { d_in, .. } => *d_in,
            LayerKind::Conv { geom, .. } => geom.input_len(),
        }
    }

    /// Width of a flattened output row.
    pub fn out_width(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { d_out, .. } => *d_out,
            LayerKind::Conv { geom, out_channels } => out_channels * geom.out_positions(),
        }
    }

    pub fn weight_rows(&self) -> usize {
        self.fan_in() + 1
    }

    pub fn num_weights(&self) -> usize {
        self.weight_rows() * self.out_features()
    }

    /// Draws a weight matrix `mu + sigma .* eps` and returns it with the
    /// noise that produced it.
    pub fn sample_weights(&self, rng: &mut Rng) -> (DenseMatrix, DenseMatrix) {
        let eps = rng.gaussian_matrix(self.means.rows(), self.means.cols(), 0.0, 1.0);
        let mut w = self.means.clone();
        for ((wv, &e), &lv) in w
            .data_mut()
            .iter_mut()
            .zip(eps.data())
            .zip(self.log_variances.data())
        {
            *wv += (0.5 * lv).exp() * e;
        }
        (w, eps)
    }

    fn shapes_consistent(&self) -> bool {
        self.means.rows() == self.weight_rows()
            && self.means.cols() == self.out_features()
            && self.log_variances.rows() == self.means.rows()
            && self.log_variances.cols() == self.means.cols()
    }
}

/// Returns the filter matrix view of a convolutional layer's means:
/// `(C*kh*kw + 1) x out_channels`, rows ordered channel-major to match
/// patch extraction, bias row last.
pub fn conv_reshape_filter(layer: &VariationalLayer) -> Result<&DenseMatrix> {
    match layer.kind {
        LayerKind::Conv { .. } => Ok(&layer.means),
        LayerKind::Dense { .. } => Err(Error::KindMismatch),
    }
}

/// Observation model of the network output.
#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    /// Gaussian likelihood with one learnable log noise variance shared
    /// across output dimensions.
    Regression { log_noise_variance: f64 },
    /// Categorical likelihood over `classes` softmax logits. `alpha` is
    /// the Dirichlet regularizer used when initializing from transformed
    /// labels.
    Classification { classes: usize, alpha: f64 },
}

/// An ordered stack of variational layers plus the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<VariationalLayer>,
    pub likelihood: Likelihood,
}

impl Network {
    pub fn new(layers: Vec<VariationalLayer>, likelihood: Likelihood) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {} emits width {} but layer {} expects {}",
                    i,
                    pair[0].out_width(),
                    i + 1,
                    pair[1].in_width()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if !layer.shapes_consistent() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {i} parameter shapes do not match its geometry"
                )));
            }
        }
        let last = layers.last().unwrap();
        if last.activation != Activation::Identity {
            return Err(Error::InvalidNetwork(
                "output layer must have the identity activation".into(),
            ));
        }
        if let Likelihood::Classification { classes, alpha } = &likelihood {
            if last.out_width() != *classes {
                return Err(Error::InvalidNetwork(format!(
                    "output width {} does not match {} classes",
                    last.out_width(),
                    classes
                )));
            }
            if *alpha <= 0.0 {
                return Err(Error::InvalidNetwork("alpha must be positive".into()));
            }
        }
        Ok(Network { layers, likelihood })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.num_weights()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.means.is_finite() && l.log_variances.is_finite())
    }
}

/// Applies one layer with a concrete weight matrix (no sampling):
/// `phi([input, 1] * weights)` for dense layers, the patch-matrix product
/// for conv layers. Used wherever a deterministic pass is needed.
pub fn layer_apply_weights(
    layer: &VariationalLayer,
    weights: &DenseMatrix,
    input: &DenseMatrix,
    activate: bool,
) -> DenseMatrix {
    let z = layer_preactivation(layer, weights, input);
    if activate {
        z.map(|v| layer.activation.apply(v))
    } else {
        z
    }
}

/// Pre-activations of one layer under concrete weights, as flattened rows
/// (conv outputs are channel-major per row).
pub fn layer_preactivation(
    layer: &VariationalLayer,
    weights: &DenseMatrix,
    input: &DenseMatrix,
) -> DenseMatrix {
    match &layer.kind {
        LayerKind::Dense { d_in, .. } => {
            assert_eq!(input.cols(), *d_in, "dense layer input width");
            input.append_ones_column().matmul(weights)
        }
        LayerKind::Conv { geom, out_channels } => {
            assert_eq!(input.cols(), geom.input_len(), "conv layer input width");
            let positions = geom.out_positions();
            let mut out = DenseMatrix::zeros(input.rows(), out_channels * positions);
            for r in 0..input.rows() {
                let patches = crate::conv::im2col_slice(input.row(r), geom).append_ones_column();
                let z = patches.matmul(weights); // positions x out_channels
                let row = out.row_mut(r);
                for o in 0..*out_channels {
                    for p in 0..positions {
                        row[o * positions + p] = z.get(p, o);
                    }
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_chain() {
        let layers = vec![
            VariationalLayer::dense(2, 5, Activation::Relu),
            VariationalLayer::dense(4, 1, Activation::Identity),
        ];
        assert!(Network::new(layers, Likelihood::Regression { log_noise_variance: 0.0 }).is_err());
    }

    #[test]
    fn rejects_non_identity_output() {
        let layers = vec![VariationalLayer::dense(2, 1, Activation::Relu)];
        assert!(Network::new(layers, Likelihood::Regression { log_noise_variance: 0.0 }).is_err());
    }

    #[test]
    fn classification_width_must_match() {
        let layers = vec![VariationalLayer::dense(2, 3, Activation::Identity)];
        assert!(Network::new(
            layers,
            Likelihood::Classification { classes: 2, alpha: 0.01 }
        )
        .is_err());
    }

    #[test]
    fn conv_filter_reshape_counts() {
        let geom = PatchGeometry {
            in_channels: 1,
            in_height: 2,
            in_width: 2,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        let layer = VariationalLayer::conv(geom, 3, Activation::Identity).unwrap();
        let filter = conv_reshape_filter(&layer).unwrap();
        assert_eq!((filter.rows(), filter.cols()), (2, 3)); // weight row + bias row

        let dense = VariationalLayer::dense(2, 2, Activation::Identity);
        assert!(matches!(conv_reshape_filter(&dense), Err(Error::KindMismatch)));
    }

    #[test]
    fn identity_filter_reproduces_input() {
        // 3x3 kernel with a single 1 at the center, padding 1: convolution
        // is the identity map
        let geom = PatchGeometry {
            in_channels: 1,
            in_height: 4,
            in_width: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let mut layer = VariationalLayer::conv(geom, 1, Activation::Identity).unwrap();
        layer.means.set(4, 0, 1.0); // center of the 3x3 kernel
        let input = crate::rng::Rng::new(3).gaussian_matrix(2, 16, 0.0, 1.0);
        let out = layer_apply_weights(&layer, &layer.means.clone(), &input, true);
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_preactivation_matches_direct_convolution() {
        let geom = PatchGeometry {
            in_channels: 2,
            in_height: 4,
            in_width: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let mut rng = crate::rng::Rng::new(19);
        let mut layer = VariationalLayer::conv(geom, 3, Activation::Identity).unwrap();
        layer.means = rng.gaussian_matrix(layer.weight_rows(), 3, 0.0, 1.0);
        let input = rng.gaussian_matrix(1, geom.input_len(), 0.0, 1.0);
        let out = layer_preactivation(&layer, &layer.means.clone(), &input);

        let filter_only = {
            let mut f = DenseMatrix::zeros(geom.patch_len(), 3);
            for i in 0..geom.patch_len() {
                for o in 0..3 {
                    f.set(i, o, layer.means.get(i, o));
                }
            }
            f
        };
        let bias: Vec<f64> = (0..3).map(|o| layer.means.get(geom.patch_len(), o)).collect();
        let direct = crate::conv::tests::direct_conv(input.data(), &geom, &filter_only, &bias);
        for (a, b) in out.row(0).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
