//! Fully-connected encoder/decoder family.

use super::{affine, BoundModel, GaussianNodes, Likelihood, ModelDescriptor, ParamSpec};
use crate::error::Result;
use crate::tensor::{NodeId, Tape};

pub(crate) fn param_specs(desc: &ModelDescriptor, hidden: &[usize]) -> Vec<ParamSpec> {
    let p = desc.pixels();
    let mut specs = Vec::new();
    let mut prev = p;
    for (i, &h) in hidden.iter().enumerate() {
        specs.extend(ParamSpec::dense(&format!("enc{i}"), prev, h));
        prev = h;
    }
    specs.extend(ParamSpec::dense("mu", prev, desc.latent));
    specs.extend(ParamSpec::dense("logvar", prev, desc.latent));
    let mut prev = desc.latent;
    for (i, &h) in hidden.iter().enumerate() {
        specs.extend(ParamSpec::dense(&format!("dec{i}"), prev, h));
        prev = h;
    }
    specs.extend(ParamSpec::dense("out", prev, p));
    specs
}

pub(crate) fn encode(
    bound: &BoundModel,
    tape: &mut Tape,
    x: NodeId,
    hidden: &[usize],
) -> Result<GaussianNodes> {
    let mut h = x;
    for i in 0..hidden.len() {
        let a = affine(tape, h, bound.id(&format!("enc{i}.w")), bound.id(&format!("enc{i}.b")))?;
        h = tape.tanh(a);
    }
    let mu = affine(tape, h, bound.id("mu.w"), bound.id("mu.b"))?;
    let log_var = affine(tape, h, bound.id("logvar.w"), bound.id("logvar.b"))?;
    Ok(GaussianNodes { mu, log_var })
}

pub(crate) fn decode(
    bound: &BoundModel,
    tape: &mut Tape,
    z: NodeId,
    hidden: &[usize],
) -> Result<NodeId> {
    let mut h = z;
    for i in 0..hidden.len() {
        let a = affine(tape, h, bound.id(&format!("dec{i}.w")), bound.id(&format!("dec{i}.b")))?;
        h = tape.tanh(a);
    }
    let out = affine(tape, h, bound.id("out.w"), bound.id("out.b"))?;
    Ok(match bound.descriptor().likelihood {
        Likelihood::Bernoulli => tape.sigmoid(out),
        Likelihood::Gaussian => out,
    })
}
