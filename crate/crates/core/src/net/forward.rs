//! Forward passes through a variational network.
//!
//! Two sampling schemes are exposed: drawing whole weight matrices via the
//! reparameterization `W = mu + sigma .* eps`, and the local trick that
//! samples each unit's pre-activation Gaussian directly (mean `A mu`,
//! variance `(A .* A) sigma^2`), which needs one draw per unit instead of
//! one per weight. Dense layers default to the local path during training;
//! conv layers always sample weights.

use crate::conv::im2col_slice;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::net::{LayerKind, Network, VariationalLayer};
use crate::rng::Rng;

/// How a forward pass draws from the variational posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Sample every weight; a concrete network is materialized.
    WeightSampling,
    /// Sample dense pre-activations directly; conv layers still sample
    /// weights (their units share filters across positions).
    LocalReparam,
}

/// Per-layer cached intermediates for reverse-mode accumulation.
#[derive(Debug, Clone)]
pub(crate) enum LayerTape {
    DenseSampled {
        input_aug: DenseMatrix,
        weights: DenseMatrix,
        epsilon: DenseMatrix,
        z: DenseMatrix,
    },
    DenseLocal {
        input_aug: DenseMatrix,
        std_pre: DenseMatrix,
        epsilon: DenseMatrix,
        z: DenseMatrix,
    },
    ConvSampled {
        patches_aug: DenseMatrix,
        weights: DenseMatrix,
        epsilon: DenseMatrix,
        z: DenseMatrix,
    },
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub(crate) layers: Vec<LayerTape>,
    pub(crate) batch: usize,
}

impl Tape {
    /// Pre-activation matrices per layer, in forward order. Conv entries
    /// are `(batch * positions) x out_channels`.
    pub fn preactivations(&self) -> Vec<&DenseMatrix> {
        self.layers
            .iter()
            .map(|l| match l {
                LayerTape::DenseSampled { z, .. } => z,
                LayerTape::DenseLocal { z, .. } => z,
                LayerTape::ConvSampled { z, .. } => z,
            })
            .collect()
    }
}

fn check_input(net: &Network, x: &DenseMatrix) -> Result<()> {
    if x.cols() != net.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match network input width {}",
            x.cols(),
            net.input_width()
        )));
    }
    Ok(())
}

/// Forward pass sampling whole weight matrices. Returns the outputs and
/// the tape of intermediates.
pub fn forward_sample(net: &Network, x: &DenseMatrix, rng: &mut Rng) -> Result<(DenseMatrix, Tape)> {
    forward_with_mode(net, x, rng, SampleMode::WeightSampling)
}

/// Forward pass using the local reparameterization trick on dense layers.
pub fn forward_local_reparam(
    net: &Network,
    x: &DenseMatrix,
    rng: &mut Rng,
) -> Result<(DenseMatrix, Tape)> {
    forward_with_mode(net, x, rng, SampleMode::LocalReparam)
}

pub(crate) fn forward_with_mode(
    net: &Network,
    x: &DenseMatrix,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<(DenseMatrix, Tape)> {
    check_input(net, x)?;
    let mut tape = Tape {
        layers: Vec::with_capacity(net.layers.len()),
        batch: x.rows(),
    };
    let mut h = x.clone();
    for layer in &net.layers {
        h = match (&layer.kind, mode) {
            (LayerKind::Dense { .. }, SampleMode::LocalReparam) => {
                dense_local_step(layer, &h, rng, &mut tape)
            }
            (LayerKind::Dense { .. }, SampleMode::WeightSampling) => {
                dense_sampled_step(layer, &h, rng, &mut tape)
            }
            (LayerKind::Conv { .. }, _) => conv_sampled_step(layer, &h, rng, &mut tape),
        };
    }
    Ok((h, tape))
}

/// Deterministic pass through the mean weights only.
pub fn forward_mean(net: &Network, x: &DenseMatrix) -> Result<DenseMatrix> {
    check_input(net, x)?;
    let mut h = x.clone();
    for layer in &net.layers {
        h = super::layer_apply_weights(layer, &layer.means, &h, true);
    }
    Ok(h)
}

fn dense_sampled_step(
    layer: &VariationalLayer,
    input: &DenseMatrix,
    rng: &mut Rng,
    tape: &mut Tape,
) -> DenseMatrix {
    let input_aug = input.append_ones_column();
    let (weights, epsilon) = layer.sample_weights(rng);
    let z = input_aug.matmul(&weights);
    let h = z.map(|v| layer.activation.apply(v));
    tape.layers.push(LayerTape::DenseSampled {
        input_aug,
        weights,
        epsilon,
        z,
    });
    h
}

fn dense_local_step(
    layer: &VariationalLayer,
    input: &DenseMatrix,
    rng: &mut Rng,
    tape: &mut Tape,
) -> DenseMatrix {
    let input_aug = input.append_ones_column();
    let mean_pre = input_aug.matmul(&layer.means);
    let input_sq = input_aug.map(|v| v * v);
    let variances = layer.log_variances.map(f64::exp);
    let var_pre = input_sq.matmul(&variances);
    let std_pre = var_pre.map(f64::sqrt);
    let epsilon = rng.gaussian_matrix(mean_pre.rows(), mean_pre.cols(), 0.0, 1.0);
    let mut z = mean_pre;
    for ((zv, &s), &e) in z
        .data_mut()
        .iter_mut()
        .zip(std_pre.data())
        .zip(epsilon.data())
    {
        *zv += s * e;
    }
    let h = z.map(|v| layer.activation.apply(v));
    tape.layers.push(LayerTape::DenseLocal {
        input_aug,
        std_pre,
        epsilon,
        z,
    });
    h
}

fn conv_sampled_step(
    layer: &VariationalLayer,
    input: &DenseMatrix,
    rng: &mut Rng,
    tape: &mut Tape,
) -> DenseMatrix {
    let LayerKind::Conv { geom, out_channels } = &layer.kind else {
        unreachable!("conv step on dense layer")
    };
    let positions = geom.out_positions();
    let patch_len = geom.patch_len();
    let batch = input.rows();
    let mut patches_aug = DenseMatrix::zeros(batch * positions, patch_len + 1);
    for r in 0..batch {
        let p = im2col_slice(input.row(r), geom);
        for pos in 0..positions {
            let dst = patches_aug.row_mut(r * positions + pos);
            dst[..patch_len].copy_from_slice(p.row(pos));
            dst[patch_len] = 1.0;
        }
    }
    let (weights, epsilon) = layer.sample_weights(rng);
    let z = patches_aug.matmul(&weights); // (batch*positions) x out_channels
    let mut out = DenseMatrix::zeros(batch, out_channels * positions);
    for r in 0..batch {
        let row = out.row_mut(r);
        for o in 0..*out_channels {
            for pos in 0..positions {
                row[o * positions + pos] = layer.activation.apply(z.get(r * positions + pos, o));
            }
        }
    }
    tape.layers.push(LayerTape::ConvSampled {
        patches_aug,
        weights,
        epsilon,
        z,
    });
    out
}
