//! The model zoo: fully-connected VAE, convolutional VAE, and the recurrent
//! canvas model (with and without its attention mechanism). Each family
//! exposes the same surface: `encode`, `sample_latent`, `decode`, and a full
//! `forward` pass, all recorded on a caller-supplied tape.

mod conv;
mod dense;
mod draw;

pub use draw::{attention_filterbank, DrawState, Filterbank};

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::tensor::{NodeId, Tape, Tensor};

/// Pixel likelihood of the decoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    /// Independent Bernoullis; decoder ends in a sigmoid.
    Bernoulli,
    /// Independent unit-variance Gaussians; decoder output is the mean.
    Gaussian,
}

/// One (de)convolutional layer: `filters` output maps of size
/// `kernel x kernel` applied with `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            filters,
            kernel,
            stride,
        }
    }
}

/// Encoder/decoder family and its layer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// Fully-connected encoder and decoder with the given hidden widths.
    Vae { hidden: Vec<usize> },
    /// Convolutional encoder, deconvolutional decoder. The decoder seeds a
    /// `dec_dense`-channel 1x1 map and must land exactly on the image dims;
    /// a final 1x1 projection maps onto the image channels.
    Cvae {
        conv: Vec<ConvSpec>,
        enc_dense: usize,
        dec_dense: usize,
        deconv: Vec<ConvSpec>,
    },
    /// Recurrent canvas model: paired encoder/decoder LSTMs painting the
    /// image over `timesteps` steps. `window = Some(n)` reads and writes
    /// through an `n x n` Gaussian filterbank instead of the full image.
    Draw {
        lstm: usize,
        timesteps: usize,
        window: Option<usize>,
    },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Vae { .. } => "vae",
            Family::Cvae { .. } => "cvae",
            Family::Draw { window: None, .. } => "draw",
            Family::Draw { window: Some(_), .. } => "draw-attention",
        }
    }
}

/// Full architecture: family, image dims, per-step latent width, likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    pub family: Family,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Latent units; for the recurrent family this is per timestep.
    pub latent: usize,
    pub likelihood: Likelihood,
}

impl ModelDescriptor {
    /// Paper-style fully-connected VAE: two hidden layers of 512 units.
    pub fn vae(channels: usize, height: usize, width: usize, latent: usize, lik: Likelihood) -> Self {
        ModelDescriptor {
            family: Family::Vae {
                hidden: vec![512, 512],
            },
            channels,
            height,
            width,
            latent,
            likelihood: lik,
        }
    }

    /// Convolutional VAE preset for 28x28 single-channel images.
    pub fn cvae_28(latent: usize, lik: Likelihood) -> Self {
        ModelDescriptor {
            family: Family::Cvae {
                conv: vec![
                    ConvSpec::new(32, 4, 2),
                    ConvSpec::new(64, 4, 2),
                    ConvSpec::new(128, 4, 2),
                ],
                enc_dense: 512,
                dec_dense: 512,
                deconv: vec![
                    ConvSpec::new(128, 3, 2),
                    ConvSpec::new(64, 3, 2),
                    ConvSpec::new(32, 2, 2),
                    ConvSpec::new(16, 2, 2),
                ],
            },
            channels: 1,
            height: 28,
            width: 28,
            latent,
            likelihood: lik,
        }
    }

    /// Recurrent canvas model over flattened images.
    pub fn draw(
        channels: usize,
        height: usize,
        width: usize,
        latent: usize,
        timesteps: usize,
        lstm: usize,
        window: Option<usize>,
        lik: Likelihood,
    ) -> Self {
        ModelDescriptor {
            family: Family::Draw {
                lstm,
                timesteps,
                window,
            },
            channels,
            height,
            width,
            latent,
            likelihood: lik,
        }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Total latent dimension seen by attacks and sampling: per-step latent
    /// times the number of timesteps for the recurrent family.
    pub fn latent_total(&self) -> usize {
        match &self.family {
            Family::Draw { timesteps, .. } => self.latent * timesteps,
            _ => self.latent,
        }
    }

    pub fn timesteps(&self) -> usize {
        match &self.family {
            Family::Draw { timesteps, .. } => *timesteps,
            _ => 1,
        }
    }

    /// `(lstm width, timesteps, attention window)` for the recurrent family.
    pub(crate) fn draw_config(&self) -> Result<(usize, usize, Option<usize>)> {
        match &self.family {
            Family::Draw {
                lstm,
                timesteps,
                window,
            } => Ok((*lstm, *timesteps, *window)),
            _ => Err(Error::invalid("not a recurrent canvas model")),
        }
    }

    /// Image plane seen by the attention grid: channel planes are stacked
    /// vertically, which is exactly the row-major layout of `[C, H, W]`.
    pub(crate) fn grid_dims(&self) -> (usize, usize) {
        (self.width, self.height * self.channels)
    }

    /// Check that the layer stack is realizable on the configured image.
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "latent size and image dims must be positive".into(),
            ));
        }
        match &self.family {
            Family::Vae { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Config("hidden layer widths must be positive".into()));
                }
            }
            Family::Cvae {
                conv,
                enc_dense,
                dec_dense,
                deconv,
            } => {
                if conv.is_empty() || deconv.is_empty() || *enc_dense == 0 || *dec_dense == 0 {
                    return Err(Error::Config("convolutional stacks must be non-empty".into()));
                }
                let (mut h, mut w) = (self.height, self.width);
                for (i, spec) in conv.iter().enumerate() {
                    if spec.stride == 0 || spec.kernel == 0 || spec.kernel > h || spec.kernel > w {
                        return Err(Error::Config(format!(
                            "encoder conv layer {i} (kernel {}) does not fit {h}x{w}",
                            spec.kernel
                        )));
                    }
                    h = (h - spec.kernel) / spec.stride + 1;
                    w = (w - spec.kernel) / spec.stride + 1;
                }
                let (mut dh, mut dw) = (1, 1);
                for spec in deconv {
                    dh = (dh - 1) * spec.stride + spec.kernel;
                    dw = (dw - 1) * spec.stride + spec.kernel;
                }
                if (dh, dw) != (self.height, self.width) {
                    return Err(Error::Config(format!(
                        "decoder stack produces {dh}x{dw}, image is {}x{}",
                        self.height, self.width
                    )));
                }
            }
            Family::Draw {
                lstm,
                timesteps,
                window,
            } => {
                if *lstm == 0 || *timesteps == 0 {
                    return Err(Error::Config(
                        "lstm width and timesteps must be positive".into(),
                    ));
                }
                if *window == Some(0) {
                    return Err(Error::Config("attention window must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Canonical single-line text form, also stored inside checkpoints.
    pub fn to_text(&self) -> String {
        let lik = match self.likelihood {
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::Gaussian => "gaussian",
        };
        let head = format!(
            "likelihood={lik};channels={};height={};width={};latent={}",
            self.channels, self.height, self.width, self.latent
        );
        match &self.family {
            Family::Vae { hidden } => {
                format!("family=vae;{head};hidden={}", join_usize(hidden))
            }
            Family::Cvae {
                conv,
                enc_dense,
                dec_dense,
                deconv,
            } => format!(
                "family=cvae;{head};conv={};enc_dense={enc_dense};dec_dense={dec_dense};deconv={}",
                join_conv(conv),
                join_conv(deconv)
            ),
            Family::Draw {
                lstm,
                timesteps,
                window,
            } => {
                let attn = match window {
                    Some(n) => format!("window={n}"),
                    None => "window=off".to_string(),
                };
                format!("family=draw;{head};lstm={lstm};timesteps={timesteps};{attn}")
            }
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for part in text.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad descriptor field `{part}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| Error::invalid(format!("descriptor missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("descriptor field `{k}` is not a number")))
        };
        let likelihood = match get("likelihood")?.as_str() {
            "bernoulli" => Likelihood::Bernoulli,
            "gaussian" => Likelihood::Gaussian,
            other => return Err(Error::invalid(format!("unknown likelihood `{other}`"))),
        };
        let family = match get("family")?.as_str() {
            "vae" => Family::Vae {
                hidden: parse_usize_list(get("hidden")?)?,
            },
            "cvae" => Family::Cvae {
                conv: parse_conv_list(get("conv")?)?,
                enc_dense: num("enc_dense")?,
                dec_dense: num("dec_dense")?,
                deconv: parse_conv_list(get("deconv")?)?,
            },
            "draw" => Family::Draw {
                lstm: num("lstm")?,
                timesteps: num("timesteps")?,
                window: match get("window")?.as_str() {
                    "off" => None,
                    n => Some(n.parse().map_err(|_| {
                        Error::invalid(format!("descriptor window `{n}` is not a number"))
                    })?),
                },
            },
            other => return Err(Error::invalid(format!("unknown family `{other}`"))),
        };
        let desc = ModelDescriptor {
            family,
            channels: num("channels")?,
            height: num("height")?,
            width: num("width")?,
            latent: num("latent")?,
            likelihood,
        };
        desc.validate()?;
        Ok(desc)
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad layer width `{x}`")))
        })
        .collect()
}

fn join_conv(v: &[ConvSpec]) -> String {
    v.iter()
        .map(|c| format!("{}x{}s{}", c.filters, c.kernel, c.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_conv_list(s: &str) -> Result<Vec<ConvSpec>> {
    s.split(',')
        .map(|item| {
            let bad = || Error::invalid(format!("bad conv spec `{item}`, expected FxKsS"));
            let (filters, rest) = item.trim().split_once('x').ok_or_else(bad)?;
            let (kernel, stride) = rest.split_once('s').ok_or_else(bad)?;
            Ok(ConvSpec {
                filters: filters.parse().map_err(|_| bad())?,
                kernel: kernel.parse().map_err(|_| bad())?,
                stride: stride.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

// ── Parameters ──────────────────────────────────────────────────────

pub(crate) enum Init {
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    /// Zero bias with the forget-gate block set to 1.
    LstmBias { hidden: usize },
}

pub(crate) struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub(crate) fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }

    /// Weight + zero bias pair for an affine layer `rows -> cols`.
    pub(crate) fn dense(name: &str, rows: usize, cols: usize) -> [Self; 2] {
        [
            ParamSpec::new(
                format!("{name}.w"),
                vec![rows, cols],
                Init::Glorot {
                    fan_in: rows,
                    fan_out: cols,
                },
            ),
            ParamSpec::new(format!("{name}.b"), vec![cols], Init::Zeros),
        ]
    }

    /// Input, recurrent, and bias tensors for one LSTM with gate layout
    /// (input, forget, output, cell).
    pub(crate) fn lstm(name: &str, input: usize, hidden: usize) -> [Self; 3] {
        [
            ParamSpec::new(
                format!("{name}.wx"),
                vec![input, 4 * hidden],
                Init::Glorot {
                    fan_in: input,
                    fan_out: 4 * hidden,
                },
            ),
            ParamSpec::new(
                format!("{name}.wh"),
                vec![hidden, 4 * hidden],
                Init::Glorot {
                    fan_in: hidden,
                    fan_out: 4 * hidden,
                },
            ),
            ParamSpec::new(
                format!("{name}.b"),
                vec![4 * hidden],
                Init::LstmBias { hidden },
            ),
        ]
    }
}

/// Named weight tensors plus the architecture they belong to. Immutable
/// during attacks and evaluation; training owns the only mutable copy.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    descriptor: ModelDescriptor,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParameters {
    /// Fresh parameters with seeded Glorot-uniform weights, zero biases, and
    /// LSTM forget-gate biases at 1.
    pub fn init(descriptor: ModelDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(&descriptor) {
            let len: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Glorot { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Zeros => vec![0.0; len],
                Init::LstmBias { hidden } => {
                    let mut b = vec![0.0; len];
                    for v in b.iter_mut().take(2 * hidden).skip(hidden) {
                        *v = 1.0;
                    }
                    b
                }
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(ModelParameters {
            descriptor,
            tensors,
        })
    }

    pub fn from_parts(descriptor: ModelDescriptor, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        descriptor.validate()?;
        let expected = ModelParameters::init(descriptor.clone(), 0)?;
        if expected.tensors.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "architecture expects {} tensors, got {}",
                expected.tensors.len(),
                tensors.len()
            )));
        }
        for (name, t) in &expected.tensors {
            let found = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor `{name}`")))?;
            if found.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
        }
        Ok(ModelParameters {
            descriptor,
            tensors,
        })
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    /// Register every weight on `tape` and return the bound model surface.
    /// Trainable bindings receive gradients; frozen ones are constants, so
    /// attack passes skip all weight-gradient work.
    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> BoundModel<'m> {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            let id = if trainable {
                tape.leaf(tensor)
            } else {
                tape.constant(tensor)
            };
            ids.insert(name.clone(), id);
        }
        BoundModel {
            descriptor: &self.descriptor,
            ids,
        }
    }

    /// Posterior parameters for a single image (deterministic; recurrent
    /// models propagate the latent means).
    pub fn encode_image(&self, image: &Tensor) -> Result<DiagonalGaussian> {
        let p = self.descriptor.pixels();
        if image.len() != p {
            return Err(Error::shape("encode", image.shape(), &[p]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant_owned(image.clone().reshaped(&[1, p])?);
        let q = bound.encode(&mut tape, x, None)?;
        DiagonalGaussian::new(
            tape.value(q.mu).data().to_vec(),
            tape.value(q.log_var).data().to_vec(),
        )
    }

    /// Decode a single latent vector to a flat image.
    pub fn decode_latent(&self, z: &[f64]) -> Result<Tensor> {
        let lt = self.descriptor.latent_total();
        if z.len() != lt {
            return Err(Error::shape("decode", &[z.len()], &[lt]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zn = tape.constant_owned(Tensor::new(vec![1, lt], z.to_vec())?);
        let r = bound.decode(&mut tape, zn)?;
        Tensor::new(vec![self.descriptor.pixels()], tape.value(r).data().to_vec())
    }

    /// Deterministic reconstruction: full forward pass with zero noise.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        let p = self.descriptor.pixels();
        if image.len() != p {
            return Err(Error::shape("reconstruct", image.shape(), &[p]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant_owned(image.clone().reshaped(&[1, p])?);
        let zero = Tensor::zeros(&[1, self.descriptor.latent_total()]);
        let out = bound.forward(&mut tape, x, &zero)?;
        Tensor::new(vec![p], tape.value(out.recon).data().to_vec())
    }
}

fn param_specs(desc: &ModelDescriptor) -> Vec<ParamSpec> {
    match &desc.family {
        Family::Vae { hidden } => dense::param_specs(desc, hidden),
        Family::Cvae {
            conv,
            enc_dense,
            dec_dense,
            deconv,
        } => conv::param_specs(desc, conv, *enc_dense, *dec_dense, deconv),
        Family::Draw {
            lstm, window, ..
        } => draw::param_specs(desc, *lstm, *window),
    }
}

// ── Tape-level model surface ────────────────────────────────────────

/// Posterior parameter nodes, each `[batch, latent_total]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// Output of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub q: GaussianNodes,
    pub z: NodeId,
    pub recon: NodeId,
}

/// A model's weights registered on one tape.
pub struct BoundModel<'m> {
    descriptor: &'m ModelDescriptor,
    ids: BTreeMap<String, NodeId>,
}

impl BoundModel<'_> {
    pub fn descriptor(&self) -> &ModelDescriptor {
        self.descriptor
    }

    pub(crate) fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("model parameter `{name}` is not bound"))
    }

    fn check_input(&self, tape: &Tape, x: NodeId) -> Result<usize> {
        let shape = tape.value(x).shape();
        let p = self.descriptor.pixels();
        if shape.len() != 2 || shape[1] != p {
            return Err(Error::shape("encode", shape, &[0, p]));
        }
        Ok(shape[0])
    }

    /// Posterior parameters `q(z|x)` for a batch of flat images
    /// `[batch, pixels]`. The recurrent family threads reparameterized
    /// samples through its steps, so it takes the noise that should drive
    /// them; `None` propagates the latent means (fully deterministic).
    pub fn encode(&self, tape: &mut Tape, x: NodeId, noise: Option<&Tensor>) -> Result<GaussianNodes> {
        let batch = self.check_input(tape, x)?;
        match &self.descriptor.family {
            Family::Vae { hidden } => dense::encode(self, tape, x, hidden),
            Family::Cvae { conv, .. } => conv::encode(self, tape, x, conv, batch),
            Family::Draw { .. } => {
                let zeros;
                let noise = match noise {
                    Some(n) => n,
                    None => {
                        zeros = Tensor::zeros(&[batch, self.descriptor.latent_total()]);
                        &zeros
                    }
                };
                Ok(draw::unroll(self, tape, x, noise, batch)?.q)
            }
        }
    }

    /// Decode latent codes `[batch, latent_total]` to reconstructions
    /// `[batch, pixels]`.
    pub fn decode(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let shape = tape.value(z).shape();
        let lt = self.descriptor.latent_total();
        if shape.len() != 2 || shape[1] != lt {
            return Err(Error::shape("decode", shape, &[0, lt]));
        }
        let batch = shape[0];
        match &self.descriptor.family {
            Family::Vae { hidden } => dense::decode(self, tape, z, hidden),
            Family::Cvae { dec_dense, deconv, .. } => {
                conv::decode(self, tape, z, *dec_dense, deconv, batch)
            }
            Family::Draw { .. } => draw::decode(self, tape, z, batch),
        }
    }

    /// Full pass: encode, sample with the given noise, decode.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, noise: &Tensor) -> Result<ForwardNodes> {
        let batch = self.check_input(tape, x)?;
        let lt = self.descriptor.latent_total();
        if noise.shape() != [batch, lt] {
            return Err(Error::shape("forward", noise.shape(), &[batch, lt]));
        }
        match &self.descriptor.family {
            Family::Draw { .. } => draw::unroll(self, tape, x, noise, batch),
            _ => {
                let q = self.encode(tape, x, None)?;
                let z = sample_latent(tape, q, noise)?;
                let recon = self.decode(tape, z)?;
                Ok(ForwardNodes { q, z, recon })
            }
        }
    }
}

/// Reparameterized sample `z = mu + exp(log_var/2) * noise`, differentiable
/// through the posterior parameters.
pub fn sample_latent(tape: &mut Tape, q: GaussianNodes, noise: &Tensor) -> Result<NodeId> {
    if tape.value(q.mu).shape() != noise.shape() {
        return Err(Error::shape("sample_latent", tape.value(q.mu).shape(), noise.shape()));
    }
    let eps = tape.constant(noise);
    let half_lv = tape.mul_scalar(q.log_var, 0.5);
    let sigma = tape.exp(half_lv);
    let scaled = tape.mul(sigma, eps)?;
    tape.add(q.mu, scaled)
}

/// KL(q || N(0,I)) as a tape node, summed over all coordinates of the batch:
/// `-1/2 * sum(1 + log_var - mu^2 - exp(log_var))`.
pub fn kl_to_standard_normal_node(tape: &mut Tape, q: GaussianNodes) -> Result<NodeId> {
    let mu2 = tape.square(q.mu);
    let var = tape.exp(q.log_var);
    let one_plus = tape.add_scalar(q.log_var, 1.0);
    let t1 = tape.sub(one_plus, mu2)?;
    let t2 = tape.sub(t1, var)?;
    let total = tape.sum(t2);
    Ok(tape.mul_scalar(total, -0.5))
}

/// KL(q_a || q_b) as a tape node, summed over all coordinates of the batch.
/// `q_b` is typically bound from constants (the attack target posterior).
pub fn kl_between_nodes(tape: &mut Tape, a: GaussianNodes, b: GaussianNodes) -> Result<NodeId> {
    if tape.value(a.mu).shape() != tape.value(b.mu).shape() {
        return Err(Error::shape(
            "kl_between",
            tape.value(a.mu).shape(),
            tape.value(b.mu).shape(),
        ));
    }
    // lv_b - lv_a + (var_a + (mu_a - mu_b)^2) * exp(-lv_b) - 1, halved.
    let lv_diff = tape.sub(b.log_var, a.log_var)?;
    let var_a = tape.exp(a.log_var);
    let mu_diff = tape.sub(a.mu, b.mu)?;
    let mu_diff2 = tape.square(mu_diff);
    let num = tape.add(var_a, mu_diff2)?;
    let neg_lvb = tape.neg(b.log_var);
    let inv_var_b = tape.exp(neg_lvb);
    let ratio = tape.mul(num, inv_var_b)?;
    let s = tape.add(lv_diff, ratio)?;
    let s1 = tape.add_scalar(s, -1.0);
    let total = tape.sum(s1);
    Ok(tape.mul_scalar(total, 0.5))
}

/// Mean squared L2 distance over the batch: `mean_b ||a_b - b_b||^2`.
pub fn mean_sq_distance_node(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let batch = tape.value(a).shape()[0];
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.mul_scalar(total, 1.0 / batch as f64))
}

/// `x @ w + b` with the bias broadcast over rows.
pub(crate) fn affine(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}
