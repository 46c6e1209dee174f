//! Convolutional encoder / deconvolutional decoder family.
//!
//! The decoder grows a `dec_dense x 1 x 1` seed through the transposed
//! convolutions and ends with a 1x1 projection onto the image channels, so
//! the stack must land exactly on the configured height and width (checked
//! by `ModelDescriptor::validate`).

use super::{affine, BoundModel, ConvSpec, GaussianNodes, Init, Likelihood, ModelDescriptor, ParamSpec};
use crate::error::Result;
use crate::tensor::{NodeId, Tape, Tensor};

pub(crate) fn param_specs(
    desc: &ModelDescriptor,
    conv: &[ConvSpec],
    enc_dense: usize,
    dec_dense: usize,
    deconv: &[ConvSpec],
) -> Vec<ParamSpec> {
    let mut specs = Vec::new();

    let mut ci = desc.channels;
    let (mut h, mut w) = (desc.height, desc.width);
    for (i, spec) in conv.iter().enumerate() {
        let k2 = spec.kernel * spec.kernel;
        specs.push(ParamSpec::new(
            format!("enc.conv{i}.w"),
            vec![spec.filters, ci, spec.kernel, spec.kernel],
            Init::Glorot {
                fan_in: ci * k2,
                fan_out: spec.filters * k2,
            },
        ));
        specs.push(ParamSpec::new(
            format!("enc.conv{i}.b"),
            vec![spec.filters],
            Init::Zeros,
        ));
        ci = spec.filters;
        h = (h - spec.kernel) / spec.stride + 1;
        w = (w - spec.kernel) / spec.stride + 1;
    }
    let flat = ci * h * w;
    specs.extend(ParamSpec::dense("enc.dense", flat, enc_dense));
    specs.extend(ParamSpec::dense("mu", enc_dense, desc.latent));
    specs.extend(ParamSpec::dense("logvar", enc_dense, desc.latent));

    specs.extend(ParamSpec::dense("dec.dense", desc.latent, dec_dense));
    let mut ci = dec_dense;
    for (i, spec) in deconv.iter().enumerate() {
        let k2 = spec.kernel * spec.kernel;
        specs.push(ParamSpec::new(
            format!("dec.deconv{i}.w"),
            vec![ci, spec.filters, spec.kernel, spec.kernel],
            Init::Glorot {
                fan_in: ci * k2,
                fan_out: spec.filters * k2,
            },
        ));
        specs.push(ParamSpec::new(
            format!("dec.deconv{i}.b"),
            vec![spec.filters],
            Init::Zeros,
        ));
        ci = spec.filters;
    }
    specs.push(ParamSpec::new(
        "dec.proj.w",
        vec![desc.channels, ci, 1, 1],
        Init::Glorot {
            fan_in: ci,
            fan_out: desc.channels,
        },
    ));
    specs.push(ParamSpec::new(
        "dec.proj.b",
        vec![desc.channels],
        Init::Zeros,
    ));
    specs
}

/// Add a per-channel bias to a `[B, C, H, W]` map.
fn channel_bias(tape: &mut Tape, y: NodeId, bias: NodeId) -> Result<NodeId> {
    let shape = tape.value(y).shape().to_vec();
    let (b, c, s) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = tape.reshape(y, &[b * c, s])?;
    let ones = tape.constant_owned(Tensor::filled(&[b, 1], 1.0));
    let row = tape.reshape(bias, &[1, c])?;
    let rep = tape.matmul(ones, row)?;
    let col = tape.reshape(rep, &[b * c, 1])?;
    let sum = tape.add(flat, col)?;
    tape.reshape(sum, &shape)
}

pub(crate) fn encode(
    bound: &BoundModel,
    tape: &mut Tape,
    x: NodeId,
    conv: &[ConvSpec],
    batch: usize,
) -> Result<GaussianNodes> {
    let desc = bound.descriptor();
    let mut h = tape.reshape(x, &[batch, desc.channels, desc.height, desc.width])?;
    for (i, spec) in conv.iter().enumerate() {
        let y = tape.conv2d(h, bound.id(&format!("enc.conv{i}.w")), spec.stride)?;
        let y = channel_bias(tape, y, bound.id(&format!("enc.conv{i}.b")))?;
        h = tape.tanh(y);
    }
    let flat_len = tape.value(h).len() / batch;
    let flat = tape.reshape(h, &[batch, flat_len])?;
    let a = affine(tape, flat, bound.id("enc.dense.w"), bound.id("enc.dense.b"))?;
    let hd = tape.tanh(a);
    let mu = affine(tape, hd, bound.id("mu.w"), bound.id("mu.b"))?;
    let log_var = affine(tape, hd, bound.id("logvar.w"), bound.id("logvar.b"))?;
    Ok(GaussianNodes { mu, log_var })
}

pub(crate) fn decode(
    bound: &BoundModel,
    tape: &mut Tape,
    z: NodeId,
    dec_dense: usize,
    deconv: &[ConvSpec],
    batch: usize,
) -> Result<NodeId> {
    let desc = bound.descriptor();
    let a = affine(tape, z, bound.id("dec.dense.w"), bound.id("dec.dense.b"))?;
    let seed = tape.tanh(a);
    let mut h = tape.reshape(seed, &[batch, dec_dense, 1, 1])?;
    for (i, spec) in deconv.iter().enumerate() {
        let y = tape.deconv2d(h, bound.id(&format!("dec.deconv{i}.w")), spec.stride)?;
        let y = channel_bias(tape, y, bound.id(&format!("dec.deconv{i}.b")))?;
        h = tape.tanh(y);
    }
    let y = tape.conv2d(h, bound.id("dec.proj.w"), 1)?;
    let y = channel_bias(tape, y, bound.id("dec.proj.b"))?;
    let out = tape.reshape(y, &[batch, desc.pixels()])?;
    Ok(match desc.likelihood {
        Likelihood::Bernoulli => tape.sigmoid(out),
        Likelihood::Gaussian => out,
    })
}
