//! Recurrent canvas family: paired encoder/decoder LSTMs that iteratively
//! read from the input and paint a canvas, optionally through a grid of
//! Gaussian read/write filters.
//!
//! One step, given input `x` and canvas `c`:
//!   error   = x - sigmoid(c)
//!   r       = read(x, error, h_dec)              (crop via filters, or both images whole)
//!   h_enc   = LSTM_enc([r, h_dec], h_enc)
//!   q_t     = (W_mu h_enc, W_logvar h_enc)
//!   z_t     = mu_t + sigma_t * eps_t
//!   h_dec   = LSTM_dec(z_t, h_dec)
//!   c       = c + write(h_dec)
//!
//! The reconstruction is sigmoid(c_T) for Bernoulli outputs, c_T otherwise.
//! The latent code seen by attacks is the concatenation over all steps.

use super::{
    affine, sample_latent, BoundModel, ForwardNodes, GaussianNodes, Likelihood, ModelDescriptor,
    ParamSpec,
};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

const FILTER_EPS: f64 = 1e-8;

pub(crate) fn param_specs(
    desc: &ModelDescriptor,
    lstm: usize,
    window: Option<usize>,
) -> Vec<ParamSpec> {
    let p = desc.pixels();
    let read_len = match window {
        Some(n) => 2 * n * n,
        None => 2 * p,
    };
    let write_len = match window {
        Some(n) => n * n,
        None => p,
    };
    let mut specs = Vec::new();
    specs.extend(ParamSpec::lstm("enc_lstm", read_len + lstm, lstm));
    specs.extend(ParamSpec::lstm("dec_lstm", desc.latent, lstm));
    specs.extend(ParamSpec::dense("mu", lstm, desc.latent));
    specs.extend(ParamSpec::dense("logvar", lstm, desc.latent));
    specs.extend(ParamSpec::dense("write", lstm, write_len));
    if window.is_some() {
        specs.extend(ParamSpec::dense("read_attn", lstm, 5));
        specs.extend(ParamSpec::dense("write_attn", lstm, 5));
    }
    specs
}

fn lstm_step(
    bound: &BoundModel,
    tape: &mut Tape,
    name: &str,
    input: NodeId,
    h: NodeId,
    c: NodeId,
    hidden: usize,
) -> Result<(NodeId, NodeId)> {
    let xw = tape.matmul(input, bound.id(&format!("{name}.wx")))?;
    let hw = tape.matmul(h, bound.id(&format!("{name}.wh")))?;
    let pre = tape.add(xw, hw)?;
    let gates = tape.add(pre, bound.id(&format!("{name}.b")))?;
    let i_raw = tape.slice(gates, 1, 0, hidden)?;
    let f_raw = tape.slice(gates, 1, hidden, hidden)?;
    let o_raw = tape.slice(gates, 1, 2 * hidden, hidden)?;
    let g_raw = tape.slice(gates, 1, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let o = tape.sigmoid(o_raw);
    let g = tape.tanh(g_raw);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

// ── Gaussian filterbank ─────────────────────────────────────────────

/// Filter matrices for one read or write: rows are normalized Gaussian
/// filters over the image axes, plus the scalar intensity.
#[derive(Debug, Clone)]
pub struct Filterbank {
    /// `[window, width]`
    pub fx: Tensor,
    /// `[window, height]`
    pub fy: Tensor,
    pub intensity: f64,
}

/// Build the grid of Gaussian filters from five unconstrained reals
/// `(center-x, center-y, log-stride, log-variance, log-intensity)`.
///
/// Centers map affinely onto the image (`0 -> middle`, `+-1 -> edges`),
/// stride/variance/intensity go through `exp`, and every filter row is
/// normalized to sum 1 (up to a small epsilon guarding empty rows).
pub fn attention_filterbank(
    grid: &[f64; 5],
    window: usize,
    width: usize,
    height: usize,
) -> Filterbank {
    let [cx, cy, log_stride, log_var, log_gamma] = *grid;
    let scale = grid_stride_scale(window, width, height);
    let delta = scale * log_stride.exp();
    let var = log_var.exp();
    let gx = 0.5 * (width as f64 - 1.0) * (cx + 1.0);
    let gy = 0.5 * (height as f64 - 1.0) * (cy + 1.0);
    Filterbank {
        fx: axis_filters(gx, delta, var, window, width),
        fy: axis_filters(gy, delta, var, window, height),
        intensity: log_gamma.exp(),
    }
}

fn grid_stride_scale(window: usize, width: usize, height: usize) -> f64 {
    if window > 1 {
        (width.max(height) as f64 - 1.0) / (window as f64 - 1.0)
    } else {
        1.0
    }
}

fn filter_center(i: usize, window: usize) -> f64 {
    i as f64 - window as f64 / 2.0 + 0.5
}

fn axis_filters(center: f64, delta: f64, var: f64, window: usize, extent: usize) -> Tensor {
    let mut data = vec![0.0; window * extent];
    for i in 0..window {
        let mu = center + filter_center(i, window) * delta;
        let row = &mut data[i * extent..(i + 1) * extent];
        let mut total = 0.0;
        for (a, v) in row.iter_mut().enumerate() {
            *v = (-(a as f64 - mu).powi(2) / (2.0 * var)).exp();
            total += *v;
        }
        let norm = 1.0 / (total + FILTER_EPS);
        for v in row.iter_mut() {
            *v *= norm;
        }
    }
    Tensor::new(vec![window, extent], data).expect("filterbank shape is consistent")
}

/// Tape-level filterbank for a whole batch of grid parameters `[B, 5]`.
struct FilterbankNodes {
    /// `[B, N, width]`
    fx: NodeId,
    /// `[B, N, height]`
    fy: NodeId,
    /// `[B, 1]`
    gamma: NodeId,
    /// `[B, 1]`
    inv_gamma: NodeId,
}

fn filterbank_nodes(
    tape: &mut Tape,
    grid: NodeId,
    window: usize,
    width: usize,
    height: usize,
) -> Result<FilterbankNodes> {
    let batch = tape.value(grid).shape()[0];
    let scale = grid_stride_scale(window, width, height);

    let cx = tape.slice(grid, 1, 0, 1)?;
    let cy = tape.slice(grid, 1, 1, 1)?;
    let log_stride = tape.slice(grid, 1, 2, 1)?;
    let log_var = tape.slice(grid, 1, 3, 1)?;
    let log_gamma = tape.slice(grid, 1, 4, 1)?;

    let stride = tape.exp(log_stride);
    let delta = tape.mul_scalar(stride, scale);
    // 1 / (2 sigma^2), per batch element
    let neg_lv = tape.neg(log_var);
    let inv_var = tape.exp(neg_lv);
    let inv2 = tape.mul_scalar(inv_var, 0.5);

    let gamma = tape.exp(log_gamma);
    let neg_lg = tape.neg(log_gamma);
    let inv_gamma = tape.exp(neg_lg);

    let fx = axis_filter_nodes(tape, cx, delta, inv2, batch, window, width)?;
    let fy = axis_filter_nodes(tape, cy, delta, inv2, batch, window, height)?;
    Ok(FilterbankNodes {
        fx,
        fy,
        gamma,
        inv_gamma,
    })
}

/// Rows of normalized Gaussian filters for one axis: `[B, N, extent]`.
fn axis_filter_nodes(
    tape: &mut Tape,
    center_raw: NodeId,
    delta: NodeId,
    inv2var: NodeId,
    batch: usize,
    window: usize,
    extent: usize,
) -> Result<NodeId> {
    let shifted = tape.add_scalar(center_raw, 1.0);
    let g = tape.mul_scalar(shifted, 0.5 * (extent as f64 - 1.0)); // [B,1]

    let ones_n = tape.constant_owned(Tensor::filled(&[1, window], 1.0));
    let offsets = tape.constant_owned(Tensor::new(
        vec![1, window],
        (0..window).map(|i| filter_center(i, window)).collect(),
    )?);
    let g_rep = tape.matmul(g, ones_n)?; // [B,N]
    let d_rep = tape.matmul(delta, offsets)?; // [B,N]
    let mu = tape.add(g_rep, d_rep)?;
    let mu_col = tape.reshape(mu, &[batch * window, 1])?;

    let ones_ext = tape.constant_owned(Tensor::filled(&[1, extent], 1.0));
    let coords = tape.constant_owned(Tensor::new(
        vec![1, extent],
        (0..extent).map(|a| a as f64).collect(),
    )?);
    let ones_rows = tape.constant_owned(Tensor::filled(&[batch * window, 1], 1.0));
    let mu_rep = tape.matmul(mu_col, ones_ext)?; // [BN, extent]
    let coord_rep = tape.matmul(ones_rows, coords)?; // [BN, extent]
    let diff = tape.sub(coord_rep, mu_rep)?;
    let sq = tape.square(diff);

    let inv_rep_n = tape.matmul(inv2var, ones_n)?; // [B,N]
    let inv_col = tape.reshape(inv_rep_n, &[batch * window, 1])?;
    let inv_rep = tape.matmul(inv_col, ones_ext)?; // [BN, extent]
    let scaled = tape.mul(sq, inv_rep)?;
    let neg = tape.neg(scaled);
    let unnorm = tape.exp(neg); // [BN, extent]

    let ones_col = tape.constant_owned(Tensor::filled(&[extent, 1], 1.0));
    let row_sum = tape.matmul(unnorm, ones_col)?; // [BN, 1]
    let guarded = tape.add_scalar(row_sum, FILTER_EPS);
    let log_sum = tape.log(guarded);
    let neg_log = tape.neg(log_sum);
    let recip = tape.exp(neg_log); // [BN, 1]
    let recip_rep = tape.matmul(recip, ones_ext)?;
    let filters = tape.mul(unnorm, recip_rep)?;
    tape.reshape(filters, &[batch, window, extent])
}

/// Extract `gamma * F_y image F_x^T` patches: image `[B, pixels]` flattened,
/// result `[B, N*N]`.
fn attn_read(
    tape: &mut Tape,
    fb: &FilterbankNodes,
    image: NodeId,
    batch: usize,
    window: usize,
    width: usize,
    height: usize,
) -> Result<NodeId> {
    let img = tape.reshape(image, &[batch, height, width])?;
    let fx_t = tape.transpose_last(fb.fx)?; // [B, W, N]
    let right = tape.bmm(img, fx_t)?; // [B, H, N]
    let patch = tape.bmm(fb.fy, right)?; // [B, N, N]
    let flat = tape.reshape(patch, &[batch, window * window])?;
    tape.mul(flat, fb.gamma)
}

/// Scatter an `[B, N*N]` patch onto the image plane:
/// `(1/gamma) F_y^T patch F_x`, result `[B, pixels]`.
fn attn_write(
    tape: &mut Tape,
    fb: &FilterbankNodes,
    patch: NodeId,
    batch: usize,
    window: usize,
    width: usize,
    height: usize,
) -> Result<NodeId> {
    let p = tape.reshape(patch, &[batch, window, window])?;
    let right = tape.bmm(p, fb.fx)?; // [B, N, W]
    let fy_t = tape.transpose_last(fb.fy)?; // [B, H, N]
    let img = tape.bmm(fy_t, right)?; // [B, H, W]
    let flat = tape.reshape(img, &[batch, height * width])?;
    tape.mul(flat, fb.inv_gamma)
}

// ── Step and unroll ─────────────────────────────────────────────────

/// Recurrent state threaded through the canvas steps (all node ids live on
/// the same tape as the step computation).
#[derive(Debug, Clone, Copy)]
pub struct DrawState {
    pub canvas: NodeId,
    pub h_enc: NodeId,
    pub c_enc: NodeId,
    pub h_dec: NodeId,
    pub c_dec: NodeId,
    pub t: usize,
}

impl DrawState {
    /// Zeroed state for a batch: blank canvas, zero LSTM states, t = 0.
    pub fn initial(tape: &mut Tape, bound: &BoundModel, batch: usize) -> Result<DrawState> {
        let (lstm, _, _) = bound.descriptor().draw_config()?;
        let p = bound.descriptor().pixels();
        let canvas = tape.constant_owned(Tensor::zeros(&[batch, p]));
        let zeros_h = Tensor::zeros(&[batch, lstm]);
        Ok(DrawState {
            canvas,
            h_enc: tape.constant(&zeros_h),
            c_enc: tape.constant(&zeros_h),
            h_dec: tape.constant(&zeros_h),
            c_dec: tape.constant(&zeros_h),
            t: 0,
        })
    }
}

/// What the encoder sees each step: without attention, the input and the
/// error image concatenated; with attention, their gamma-scaled filter
/// patches (`2 * window^2` values either way the window is sized).
fn read_op(
    bound: &BoundModel,
    tape: &mut Tape,
    canvas: NodeId,
    h_dec: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let desc = bound.descriptor();
    let (_, _, window) = desc.draw_config()?;
    let (w, h) = desc.grid_dims();
    let batch = tape.value(x).shape()[0];
    let sig_canvas = tape.sigmoid(canvas);
    let err = tape.sub(x, sig_canvas)?;
    match window {
        None => tape.concat(1, &[x, err]),
        Some(n) => {
            let grid = affine(tape, h_dec, bound.id("read_attn.w"), bound.id("read_attn.b"))?;
            let fb = filterbank_nodes(tape, grid, n, w, h)?;
            let px = attn_read(tape, &fb, x, batch, n, w, h)?;
            let pe = attn_read(tape, &fb, err, batch, n, w, h)?;
            tape.concat(1, &[px, pe])
        }
    }
}

/// One canonical canvas step; returns the advanced state and the step's
/// posterior parameters. `noise_t` is this step's `[batch, latent]` noise.
pub fn draw_step(
    bound: &BoundModel,
    tape: &mut Tape,
    state: &DrawState,
    x: NodeId,
    noise_t: &Tensor,
) -> Result<(DrawState, GaussianNodes)> {
    let desc = bound.descriptor();
    let (lstm, timesteps, window) = desc.draw_config()?;
    if state.t >= timesteps {
        return Err(Error::invalid(format!(
            "draw_step at t={} but the model has {} timesteps",
            state.t, timesteps
        )));
    }
    let batch = tape.value(x).shape()[0];
    let (w, h) = desc.grid_dims();
    let read = read_op(bound, tape, state.canvas, state.h_dec, x)?;
    let enc_in = tape.concat(1, &[read, state.h_dec])?;
    let (h_enc, c_enc) = lstm_step(bound, tape, "enc_lstm", enc_in, state.h_enc, state.c_enc, lstm)?;
    let mu = affine(tape, h_enc, bound.id("mu.w"), bound.id("mu.b"))?;
    let log_var = affine(tape, h_enc, bound.id("logvar.w"), bound.id("logvar.b"))?;
    let q = GaussianNodes { mu, log_var };
    let z = sample_latent(tape, q, noise_t)?;
    let (h_dec, c_dec) = lstm_step(bound, tape, "dec_lstm", z, state.h_dec, state.c_dec, lstm)?;

    let patch = affine(tape, h_dec, bound.id("write.w"), bound.id("write.b"))?;
    let delta = match window {
        None => patch,
        Some(n) => {
            let grid = affine(tape, h_dec, bound.id("write_attn.w"), bound.id("write_attn.b"))?;
            let fb = filterbank_nodes(tape, grid, n, w, h)?;
            attn_write(tape, &fb, patch, batch, n, w, h)?
        }
    };
    let canvas = tape.add(state.canvas, delta)?;

    Ok((
        DrawState {
            canvas,
            h_enc,
            c_enc,
            h_dec,
            c_dec,
            t: state.t + 1,
        },
        q,
    ))
}

/// Slice one step's noise columns out of the full `[B, T*latent]` tensor.
fn noise_step(noise: &Tensor, t: usize, latent: usize) -> Tensor {
    let batch = noise.shape()[0];
    let total = noise.shape()[1];
    let mut data = Vec::with_capacity(batch * latent);
    for b in 0..batch {
        let base = b * total + t * latent;
        data.extend_from_slice(&noise.data()[base..base + latent]);
    }
    Tensor::new(vec![batch, latent], data).expect("noise slice shape is consistent")
}

/// Full unrolled pass; the returned posterior and code are the per-step
/// values concatenated along the latent axis.
pub(crate) fn unroll(
    bound: &BoundModel,
    tape: &mut Tape,
    x: NodeId,
    noise: &Tensor,
    batch: usize,
) -> Result<ForwardNodes> {
    let desc = bound.descriptor();
    let (_, timesteps, _) = desc.draw_config()?;
    let lt = desc.latent_total();
    if noise.shape() != [batch, lt] {
        return Err(Error::shape("forward", noise.shape(), &[batch, lt]));
    }
    let mut state = DrawState::initial(tape, bound, batch)?;
    let mut mus = Vec::with_capacity(timesteps);
    let mut lvs = Vec::with_capacity(timesteps);
    let mut zs = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let noise_t = noise_step(noise, t, desc.latent);
        let (next, q) = draw_step(bound, tape, &state, x, &noise_t)?;
        mus.push(q.mu);
        lvs.push(q.log_var);
        let eps = tape.constant(&noise_t);
        let half = tape.mul_scalar(q.log_var, 0.5);
        let sigma = tape.exp(half);
        let scaled = tape.mul(sigma, eps)?;
        let z = tape.add(q.mu, scaled)?;
        zs.push(z);
        state = next;
    }
    let q = GaussianNodes {
        mu: tape.concat(1, &mus)?,
        log_var: tape.concat(1, &lvs)?,
    };
    let z = tape.concat(1, &zs)?;
    let recon = match desc.likelihood {
        Likelihood::Bernoulli => tape.sigmoid(state.canvas),
        Likelihood::Gaussian => state.canvas,
    };
    Ok(ForwardNodes { q, z, recon })
}

/// Decoder-only pass from a given concatenated code `[B, T*latent]`.
pub(crate) fn decode(bound: &BoundModel, tape: &mut Tape, z: NodeId, batch: usize) -> Result<NodeId> {
    let desc = bound.descriptor();
    let (lstm, timesteps, window) = desc.draw_config()?;
    let (w, h) = desc.grid_dims();
    let p = desc.pixels();
    let mut canvas = tape.constant_owned(Tensor::zeros(&[batch, p]));
    let zeros_h = Tensor::zeros(&[batch, lstm]);
    let mut h_dec = tape.constant(&zeros_h);
    let mut c_dec = tape.constant(&zeros_h);
    for t in 0..timesteps {
        let z_t = tape.slice(z, 1, t * desc.latent, desc.latent)?;
        let (h2, c2) = lstm_step(bound, tape, "dec_lstm", z_t, h_dec, c_dec, lstm)?;
        h_dec = h2;
        c_dec = c2;
        let patch = affine(tape, h_dec, bound.id("write.w"), bound.id("write.b"))?;
        let delta = match window {
            None => patch,
            Some(n) => {
                let grid = affine(tape, h_dec, bound.id("write_attn.w"), bound.id("write_attn.b"))?;
                let fb = filterbank_nodes(tape, grid, n, w, h)?;
                attn_write(tape, &fb, patch, batch, n, w, h)?
            }
        };
        canvas = tape.add(canvas, delta)?;
    }
    Ok(match desc.likelihood {
        Likelihood::Bernoulli => tape.sigmoid(canvas),
        Likelihood::Gaussian => canvas,
    })
}
