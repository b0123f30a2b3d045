//! Plain-text network checkpoints.
//!
//! Every float is written as the hex of its IEEE-754 bit pattern, so a
//! checkpoint reloads to bit-identical parameters on any platform.

use std::fs;
use std::path::Path;

use crate::conv::PatchGeometry;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::net::{Activation, LayerKind, Likelihood, Network, VariationalLayer};

const MAGIC: &str = "vbnet-checkpoint v1";

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    match &net.likelihood {
        Likelihood::Regression { log_noise_variance } => {
            out.push_str(&format!(
                "likelihood regression {:016x}\n",
                log_noise_variance.to_bits()
            ));
        }
        Likelihood::Classification { classes, alpha } => {
            out.push_str(&format!(
                "likelihood classification {classes} {:016x}\n",
                alpha.to_bits()
            ));
        }
    }
    out.push_str(&format!("layers {}\n", net.layers.len()));
    for layer in &net.layers {
        match &layer.kind {
            LayerKind::Dense { d_in, d_out } => {
                out.push_str(&format!(
                    "layer dense {d_in} {d_out} {}\n",
                    layer.activation.name()
                ));
            }
            LayerKind::Conv { geom, out_channels } => {
                out.push_str(&format!(
                    "layer conv {} {} {} {} {} {} {} {out_channels} {}\n",
                    geom.in_channels,
                    geom.in_height,
                    geom.in_width,
                    geom.kernel_h,
                    geom.kernel_w,
                    geom.stride,
                    geom.padding,
                    layer.activation.name()
                ));
            }
        }
        push_matrix_line(&mut out, "means", &layer.means);
        push_matrix_line(&mut out, "logvars", &layer.log_variances);
    }
    fs::write(path, out)?;
    Ok(())
}

fn push_matrix_line(out: &mut String, tag: &str, m: &DenseMatrix) {
    out.push_str(tag);
    for v in m.data() {
        out.push(' ');
        out.push_str(&format!("{:016x}", v.to_bits()));
    }
    out.push('\n');
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());

    if lines.next() != Some(MAGIC) {
        return Err(bad("missing or unknown header"));
    }
    let likelihood_line = lines.next().ok_or_else(|| bad("missing likelihood"))?;
    let mut parts = likelihood_line.split_whitespace();
    if parts.next() != Some("likelihood") {
        return Err(bad("malformed likelihood line"));
    }
    let likelihood = match parts.next() {
        Some("regression") => {
            let bits = parse_hex(parts.next().ok_or_else(|| bad("missing noise bits"))?)?;
            Likelihood::Regression {
                log_noise_variance: f64::from_bits(bits),
            }
        }
        Some("classification") => {
            let classes: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad class count"))?;
            let bits = parse_hex(parts.next().ok_or_else(|| bad("missing alpha bits"))?)?;
            Likelihood::Classification {
                classes,
                alpha: f64::from_bits(bits),
            }
        }
        _ => return Err(bad("unknown likelihood kind")),
    };

    let count_line = lines.next().ok_or_else(|| bad("missing layer count"))?;
    let n_layers: usize = count_line
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad layer count"))?;

    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let header = lines.next().ok_or_else(|| bad("missing layer header"))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("layer") {
            return Err(bad("malformed layer header"));
        }
        let (kind, activation) = match toks.next() {
            Some("dense") => {
                let d_in = parse_usize(toks.next())?;
                let d_out = parse_usize(toks.next())?;
                let act = Activation::parse(toks.next().ok_or_else(|| bad("missing activation"))?)?;
                (LayerKind::Dense { d_in, d_out }, act)
            }
            Some("conv") => {
                let geom = PatchGeometry {
                    in_channels: parse_usize(toks.next())?,
                    in_height: parse_usize(toks.next())?,
                    in_width: parse_usize(toks.next())?,
                    kernel_h: parse_usize(toks.next())?,
                    kernel_w: parse_usize(toks.next())?,
                    stride: parse_usize(toks.next())?,
                    padding: parse_usize(toks.next())?,
                };
                let out_channels = parse_usize(toks.next())?;
                let act = Activation::parse(toks.next().ok_or_else(|| bad("missing activation"))?)?;
                (LayerKind::Conv { geom, out_channels }, act)
            }
            _ => return Err(bad("unknown layer kind")),
        };
        let (rows, cols) = match &kind {
            LayerKind::Dense { d_in, d_out } => (d_in + 1, *d_out),
            LayerKind::Conv { geom, out_channels } => (geom.patch_len() + 1, *out_channels),
        };
        let means = parse_matrix_line(lines.next(), "means", rows, cols)?;
        let log_variances = parse_matrix_line(lines.next(), "logvars", rows, cols)?;
        layers.push(VariationalLayer {
            kind,
            means,
            log_variances,
            activation,
        });
    }
    Network::new(layers, likelihood)
}

fn parse_usize(tok: Option<&str>) -> Result<usize> {
    tok.and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("expected integer".into()))
}

fn parse_hex(tok: &str) -> Result<u64> {
    u64::from_str_radix(tok, 16).map_err(|_| Error::Checkpoint(format!("bad hex word {tok}")))
}

fn parse_matrix_line(
    line: Option<&str>,
    tag: &str,
    rows: usize,
    cols: usize,
) -> Result<DenseMatrix> {
    let line = line.ok_or_else(|| Error::Checkpoint(format!("missing {tag} line")))?;
    let mut toks = line.split_whitespace();
    if toks.next() != Some(tag) {
        return Err(Error::Checkpoint(format!("expected {tag} line")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for tok in toks {
        data.push(f64::from_bits(parse_hex(tok)?));
    }
    if data.len() != rows * cols {
        return Err(Error::Checkpoint(format!(
            "{tag} has {} words, expected {}",
            data.len(),
            rows * cols
        )));
    }
    Ok(DenseMatrix::from_vec_unchecked(rows, cols, data))
}
