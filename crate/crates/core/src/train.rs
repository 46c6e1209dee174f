//! ELBO maximization with Adam, keeping the weights that scored the best
//! validation loss.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{kl_to_standard_normal_node, BoundModel, Likelihood, ModelDescriptor, ModelParameters};
use crate::tensor::{NodeId, Tape, Tensor};

const SHUFFLE_SALT: u64 = 0x5348_5546;
const NOISE_SALT: u64 = 0x4e4f_4953;
const VALIDATION_SALT: u64 = 0x5641_4c49;

/// Bernoulli probabilities are clamped into this range before the log.
const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation loss is computed every this many epochs.
    pub validation_period: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            learning_rate: 1e-4,
            validation_period: 10,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.learning_rate <= 0.0
            || self.validation_period == 0
            || self.validation_fraction <= 0.0
            || self.validation_fraction >= 1.0
        {
            return Err(Error::Config(
                "batch size, learning rate, validation period must be positive; \
                 validation fraction in (0,1)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// What a training run measured. The trace stores validation ELBO (higher
/// is better); the kept checkpoint is the best entry's weights.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// (epoch, validation ELBO) at every evaluation, starting at epoch 0.
    pub trace: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_val_elbo: f64,
    /// Set when a non-finite loss or gradient aborted the run early; the
    /// returned weights are the best checkpoint seen before the failure.
    pub diverged: bool,
}

impl TrainReport {
    /// Write `train_report.txt` (key=value lines) and `val_elbo.csv`
    /// (epoch,value trace) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut report = String::new();
        report.push_str(&format!("best_epoch={}\n", self.best_epoch));
        report.push_str(&format!("best_val_elbo={}\n", self.best_val_elbo));
        report.push_str(&format!("diverged={}\n", self.diverged));
        report.push_str(&format!("evaluations={}\n", self.trace.len()));
        std::fs::write(dir.join("train_report.txt"), report)?;

        let mut csv = String::from("epoch,val_elbo\n");
        for (epoch, elbo) in &self.trace {
            csv.push_str(&format!("{epoch},{elbo}\n"));
        }
        std::fs::write(dir.join("val_elbo.csv"), csv)?;
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam with bias correction over one flat buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update step; rejects non-finite gradients.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        debug_assert_eq!(params.len(), grads.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient in Adam step".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Per-tensor Adam state for a whole model.
pub struct AdamState {
    slots: BTreeMap<String, Adam>,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let slots = params
            .tensors()
            .iter()
            .map(|(name, t)| (name.clone(), Adam::new(t.len())))
            .collect();
        AdamState { slots }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParameters,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, tensor) in params.tensors_mut().iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("missing Adam state for `{name}`")))?;
            slot.step(tensor.data_mut(), grad.data(), lr)?;
        }
        Ok(())
    }
}

// ── ELBO ────────────────────────────────────────────────────────────

/// Negative ELBO of a batch as a tape node: mean over the batch of
/// reconstruction NLL plus KL to the standard normal prior, with the
/// posterior sampled exactly once per datum through `noise`.
pub fn negative_elbo_node(
    tape: &mut Tape,
    bound: &BoundModel,
    x: NodeId,
    noise: &Tensor,
) -> Result<NodeId> {
    let batch = tape.value(x).shape()[0] as f64;
    let out = bound.forward(tape, x, noise)?;
    let nll = match bound.descriptor().likelihood {
        Likelihood::Bernoulli => {
            let r = tape.value(out.recon);
            if r.data().iter().any(|&v| !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&v)) {
                log::debug!("bernoulli probabilities clamped to [{PROB_FLOOR}, 1-{PROB_FLOOR}]");
            }
            let rc = tape.clamp(out.recon, PROB_FLOOR, 1.0 - PROB_FLOOR);
            let ln_r = tape.log(rc);
            let neg_rc = tape.neg(rc);
            let one_minus_r = tape.add_scalar(neg_rc, 1.0);
            let ln_1mr = tape.log(one_minus_r);
            let neg_x = tape.neg(x);
            let one_minus_x = tape.add_scalar(neg_x, 1.0);
            let t1 = tape.mul(x, ln_r)?;
            let t2 = tape.mul(one_minus_x, ln_1mr)?;
            let ll = tape.add(t1, t2)?;
            let total = tape.sum(ll);
            tape.neg(total)
        }
        Likelihood::Gaussian => {
            let diff = tape.sub(x, out.recon)?;
            let sq = tape.square(diff);
            let total = tape.sum(sq);
            tape.mul_scalar(total, 0.5)
        }
    };
    let kl = kl_to_standard_normal_node(tape, out.q)?;
    let total = tape.add(nll, kl)?;
    Ok(tape.mul_scalar(total, 1.0 / batch))
}

/// Negative ELBO of a batch, value only.
pub fn elbo_loss(params: &ModelParameters, x: &Tensor, noise: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xn = tape.constant(x);
    let loss = negative_elbo_node(&mut tape, &bound, xn, noise)?;
    Ok(tape.value(loss).item())
}

/// Negative ELBO plus its gradient with respect to every weight tensor.
pub fn elbo_grad(
    params: &ModelParameters,
    x: &Tensor,
    noise: &Tensor,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let xn = tape.constant(x);
    let loss = negative_elbo_node(&mut tape, &bound, xn, noise)?;
    let value = tape.value(loss).item();
    let grads_raw = tape.backward(loss)?;
    let grads = params
        .tensors()
        .keys()
        .map(|name| (name.clone(), grads_raw.wrt(bound.id(name))))
        .collect();
    Ok((value, grads))
}

fn standard_noise(rng: &mut ChaCha8Rng, batch: usize, latent: usize) -> Tensor {
    Tensor::new(
        vec![batch, latent],
        (0..batch * latent).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("noise shape is consistent")
}

/// Mean validation negative ELBO with noise regenerated from a fixed seed,
/// so successive evaluations are comparable.
fn validation_loss(params: &ModelParameters, dataset: &Dataset, batch_size: usize, seed: u64) -> Result<f64> {
    let latent = params.descriptor().latent_total();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_SALT);
    let indices = dataset.validation_indices();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let x = dataset.batch(chunk);
        let noise = standard_noise(&mut rng, chunk.len(), latent);
        let loss = elbo_loss(params, &x, &noise)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {loss}")));
        }
        total += loss * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Train a fresh model of the given architecture on the dataset's training
/// split. Returns the best-validation weights and the run's report.
pub fn train(
    descriptor: ModelDescriptor,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelParameters, TrainReport)> {
    config.validate()?;
    if dataset.pixels() != descriptor.pixels() {
        return Err(Error::ArchitectureMismatch {
            found: format!("dataset with {} pixels", dataset.pixels()),
            requested: descriptor.to_text(),
        });
    }
    if dataset.train_indices().is_empty() || dataset.validation_indices().is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }

    let mut params = ModelParameters::init(descriptor, config.seed)?;
    let latent = params.descriptor().latent_total();
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ NOISE_SALT);

    let initial = validation_loss(&params, dataset, config.batch_size, config.seed)?;
    let mut trace = vec![(0usize, -initial)];
    let mut best = (0usize, initial, params.clone());
    let mut diverged = false;

    let mut order: Vec<usize> = dataset.train_indices().to_vec();
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let x = dataset.batch(chunk);
            let noise = standard_noise(&mut noise_rng, chunk.len(), latent);
            let (loss, grads) = elbo_grad(&params, &x, &noise)?;
            if !loss.is_finite() {
                log::warn!("training loss became {loss} at epoch {epoch}; keeping best checkpoint");
                diverged = true;
                break 'epochs;
            }
            if let Err(e) = adam.step(&mut params, &grads, config.learning_rate) {
                log::warn!("aborting at epoch {epoch}: {e}");
                diverged = true;
                break 'epochs;
            }
        }
        if epoch % config.validation_period == 0 || epoch == config.epochs {
            let val = validation_loss(&params, dataset, config.batch_size, config.seed)?;
            trace.push((epoch, -val));
            if val < best.1 {
                best = (epoch, val, params.clone());
            }
        }
    }

    let report = TrainReport {
        trace,
        best_epoch: best.0,
        best_val_elbo: -best.1,
        diverged,
    };
    Ok((best.2, report))
}
