//! Minimal feed-forward networks with exact analytic gradients.
//!
//! This is the substrate for the actor and the critic ensemble: dense layers
//! with optional layer normalization and dropout, reverse-mode gradients
//! recorded on an explicit tape, and a bias-corrected adaptive-moment
//! optimizer. Everything is `f64` and allocation patterns are simple; the
//! operator set is exactly what soft actor-critic needs.
//!
//! Layer order within one layer is: linear -> dropout (train mode, hidden
//! layers only) -> layer norm (if configured) -> activation.

use std::io::{Read, Write};
use std::path::Path;

use rand::RngCore;

use crate::error::{Error, Result};

/// Variance is clamped at this floor before the square root in layer norm,
/// so constant activations normalize to zero instead of dividing by zero.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-6;

/// 53-bit uniform draw in `[0, 1)`.
pub(crate) fn unit_f64(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Per-thread dense-FLOP meter, counting 2 FLOPs per multiply-add in
/// executed forward passes and twice that in backward passes. It exists as
/// an instrumentation oracle independent of the driver's closed-form ledger.
/// Thread-local so concurrent runs (and parallel tests) never pollute each
/// other's counts; a training run executes on a single thread.
pub mod flops {
    use std::cell::Cell;

    thread_local! {
        static METER: Cell<u64> = const { Cell::new(0) };
    }

    pub fn add(n: u64) {
        METER.with(|m| m.set(m.get() + n));
    }

    pub fn reset() {
        METER.with(|m| m.set(0));
    }

    pub fn total() -> u64 {
        METER.with(|m| m.get())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Shape and feature description of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

/// Per-layer gain/shift for layer normalization.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim][in_dim]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub norm: Option<NormParams>,
    pub activation: Activation,
}

/// Parameters of a multilayer perceptron. Consecutive layer shapes compose.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Zero-initialized network (useful for probes and tests).
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        Self::validate(specs)?;
        Ok(MlpParams {
            layers: specs
                .iter()
                .map(|s| Self::layer_from_spec(s, |_| 0.0))
                .collect(),
        })
    }

    /// Fan-in-scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// biases zero, norm gain one, norm shift zero.
    pub fn init(specs: &[LayerSpec], rng: &mut dyn RngCore) -> Result<Self> {
        Self::validate(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.in_dim as f64).sqrt();
                Self::layer_from_spec(s, |_| (2.0 * unit_f64(rng) - 1.0) * bound)
            })
            .collect();
        Ok(MlpParams { layers })
    }

    fn validate(specs: &[LayerSpec]) -> Result<()> {
        if specs.is_empty() {
            return Err(Error::Config("network must have at least one layer".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer shapes do not compose: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    fn layer_from_spec(s: &LayerSpec, mut weight: impl FnMut(usize) -> f64) -> Layer {
        Layer {
            in_dim: s.in_dim,
            out_dim: s.out_dim,
            w: (0..s.in_dim * s.out_dim).map(&mut weight).collect(),
            b: vec![0.0; s.out_dim],
            norm: s.layer_norm.then(|| NormParams {
                gain: vec![1.0; s.out_dim],
                shift: vec![0.0; s.out_dim],
            }),
            activation: s.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Dense FLOPs of one forward pass on a single sample: `sum 2*in*out`.
    pub fn forward_flops_per_sample(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| 2 * (l.in_dim as u64) * (l.out_dim as u64))
            .sum()
    }

    /// All parameter slices in declaration order (w, b, gain, shift per layer).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
            if let Some(n) = &l.norm {
                out.push(n.gain.as_slice());
                out.push(n.shift.as_slice());
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
            if let Some(n) = &mut l.norm {
                out.push(n.gain.as_mut_slice());
                out.push(n.shift.as_mut_slice());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Order-sensitive checksum over every parameter's bit pattern.
    /// Used by actor-freeze assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for s in self.param_slices() {
            for v in s {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    fn shape_fingerprint(&self) -> Vec<(usize, usize, bool)> {
        self.layers
            .iter()
            .map(|l| (l.in_dim, l.out_dim, l.norm.is_some()))
            .collect()
    }
}

/// Accumulated partial derivatives, shape-congruent with an [`MlpParams`].
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub dnorm: Option<(Vec<f64>, Vec<f64>)>, // (dgain, dshift)
}

impl GradientBuffer {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradientBuffer {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    dw: vec![0.0; l.w.len()],
                    db: vec![0.0; l.b.len()],
                    dnorm: l.norm.as_ref().map(|n| {
                        (vec![0.0; n.gain.len()], vec![0.0; n.shift.len()])
                    }),
                })
                .collect(),
        }
    }

    pub fn grad_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.dw.as_slice());
            out.push(l.db.as_slice());
            if let Some((g, s)) = &l.dnorm {
                out.push(g.as_slice());
                out.push(s.as_slice());
            }
        }
        out
    }

    /// Scale every gradient entry in place.
    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in l.dw.iter_mut().chain(l.db.iter_mut()) {
                *v *= factor;
            }
            if let Some((g, s)) = &mut l.dnorm {
                for v in g.iter_mut().chain(s.iter_mut()) {
                    *v *= factor;
                }
            }
        }
    }
}

/// Forward mode: evaluation is deterministic, training may apply dropout.
pub enum Mode<'a> {
    Eval,
    Train {
        /// Keep-probability in (0, 1]; 1.0 disables dropout.
        keep_prob: f64,
        rng: &'a mut dyn RngCore,
    },
}

struct LayerTape {
    /// Inverted-scaling dropout mask (entries 0 or 1/keep), if applied.
    mask: Option<Vec<f64>>,
    /// Layer-norm intermediates: normalized values and per-sample 1/std,
    /// plus whether the variance floor was active per sample.
    norm: Option<(Vec<f64>, Vec<f64>, Vec<bool>)>,
    /// Post-activation output, n x out.
    out: Vec<f64>,
}

/// Activation record from a forward pass; consumed by [`backward_batch`].
pub struct Tape {
    n: usize,
    input: Vec<f64>,
    layers: Vec<LayerTape>,
    shape: Vec<(usize, usize, bool)>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Output of the last layer, n x out_dim row-major.
    pub fn output(&self) -> &[f64] {
        &self.layers.last().unwrap().out
    }
}

/// Forward pass on a single input vector.
pub fn forward(params: &MlpParams, input: &[f64], mode: Mode<'_>) -> Result<(Vec<f64>, Tape)> {
    let (out, tape) = forward_batch(params, input, 1, mode)?;
    Ok((out, tape))
}

/// Forward pass on a row-major batch of `n` inputs.
pub fn forward_batch(
    params: &MlpParams,
    inputs: &[f64],
    n: usize,
    mode: Mode<'_>,
) -> Result<(Vec<f64>, Tape)> {
    let in_dim = params.input_dim();
    if inputs.len() != n * in_dim {
        return Err(Error::Config(format!(
            "input length {} does not match batch {} x width {}",
            inputs.len(),
            n,
            in_dim
        )));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite network input".into()));
    }

    let (keep_prob, mut rng) = match mode {
        Mode::Eval => (1.0, None),
        Mode::Train { keep_prob, rng } => {
            if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                return Err(Error::Config(format!(
                    "keep probability {keep_prob} outside (0, 1]"
                )));
            }
            (keep_prob, Some(rng))
        }
    };

    let n_layers = params.layers.len();
    let mut tapes = Vec::with_capacity(n_layers);
    let mut x = inputs.to_vec();

    for (li, layer) in params.layers.iter().enumerate() {
        let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
        // linear: z[s][o] = b[o] + sum_i x[s][i] * w[o][i]
        let mut z = vec![0.0; n * o_dim];
        for s in 0..n {
            let xr = &x[s * i_dim..(s + 1) * i_dim];
            let zr = &mut z[s * o_dim..(s + 1) * o_dim];
            for o in 0..o_dim {
                let wr = &layer.w[o * i_dim..(o + 1) * i_dim];
                let mut acc = layer.b[o];
                for i in 0..i_dim {
                    acc += xr[i] * wr[i];
                }
                zr[o] = acc;
            }
        }
        flops::add(2 * (n as u64) * (i_dim as u64) * (o_dim as u64));

        // dropout on hidden layers, train mode only
        let is_hidden = li + 1 < n_layers;
        let mask = match (&mut rng, is_hidden, keep_prob < 1.0) {
            (Some(rng), true, true) => {
                let scale = 1.0 / keep_prob;
                let mask: Vec<f64> = (0..n * o_dim)
                    .map(|_| {
                        if unit_f64(&mut **rng) < keep_prob {
                            scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (v, m) in z.iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            }
            _ => None,
        };

        // layer norm
        let norm_tape = if let Some(np) = &layer.norm {
            let mut u = vec![0.0; n * o_dim];
            let mut inv_std = vec![0.0; n];
            let mut floored = vec![false; n];
            for s in 0..n {
                let row = &z[s * o_dim..(s + 1) * o_dim];
                let mean = row.iter().sum::<f64>() / o_dim as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / o_dim as f64;
                let clamped = var.max(LAYER_NORM_VAR_FLOOR);
                floored[s] = var < LAYER_NORM_VAR_FLOOR;
                let is = 1.0 / clamped.sqrt();
                inv_std[s] = is;
                for o in 0..o_dim {
                    u[s * o_dim + o] = (row[o] - mean) * is;
                }
            }
            for s in 0..n {
                for o in 0..o_dim {
                    z[s * o_dim + o] = np.gain[o] * u[s * o_dim + o] + np.shift[o];
                }
            }
            Some((u, inv_std, floored))
        } else {
            None
        };

        // activation
        match layer.activation {
            Activation::Relu => {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            Activation::Identity => {}
        }

        tapes.push(LayerTape {
            mask,
            norm: norm_tape,
            out: z.clone(),
        });
        x = z;
    }

    Ok((
        x,
        Tape {
            n,
            input: inputs.to_vec(),
            layers: tapes,
            shape: params.shape_fingerprint(),
        },
    ))
}

/// Reverse pass. `upstream` is dL/d(output), row-major n x out_dim; the
/// returned buffer holds dL/d(params) summed over the batch, plus
/// dL/d(input) for chaining through network compositions.
pub fn backward_batch(
    params: &MlpParams,
    tape: &Tape,
    upstream: &[f64],
) -> Result<(GradientBuffer, Vec<f64>)> {
    if tape.shape != params.shape_fingerprint() {
        return Err(Error::Usage(
            "tape does not match the network it is applied to".into(),
        ));
    }
    let n = tape.n;
    let out_dim = params.output_dim();
    if upstream.len() != n * out_dim {
        return Err(Error::Config(format!(
            "upstream length {} does not match batch {} x width {}",
            upstream.len(),
            n,
            out_dim
        )));
    }

    let mut grads = GradientBuffer::zeros_like(params);
    let mut d = upstream.to_vec();

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lt = &tape.layers[li];
        let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);

        // through activation
        match layer.activation {
            Activation::Relu => {
                for (dv, &ov) in d.iter_mut().zip(&lt.out) {
                    if ov <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (dv, &ov) in d.iter_mut().zip(&lt.out) {
                    *dv *= 1.0 - ov * ov;
                }
            }
            Activation::Identity => {}
        }

        // through layer norm
        if let Some(np) = &layer.norm {
            let (u, inv_std, floored) = lt.norm.as_ref().unwrap();
            let (dgain, dshift) = grads.layers[li].dnorm.as_mut().unwrap();
            let mut dh = vec![0.0; n * o_dim];
            for s in 0..n {
                let ds = &d[s * o_dim..(s + 1) * o_dim];
                let us = &u[s * o_dim..(s + 1) * o_dim];
                let mut du_mean = 0.0;
                let mut duu_mean = 0.0;
                for o in 0..o_dim {
                    dgain[o] += ds[o] * us[o];
                    dshift[o] += ds[o];
                    let du = ds[o] * np.gain[o];
                    du_mean += du;
                    duu_mean += du * us[o];
                }
                du_mean /= o_dim as f64;
                duu_mean /= o_dim as f64;
                let is = inv_std[s];
                for o in 0..o_dim {
                    let du = ds[o] * np.gain[o];
                    dh[s * o_dim + o] = if floored[s] {
                        // variance pinned at the floor: 1/std is a constant
                        is * (du - du_mean)
                    } else {
                        is * (du - du_mean - us[o] * duu_mean)
                    };
                }
            }
            d = dh;
        }

        // through dropout
        if let Some(mask) = &lt.mask {
            for (dv, &m) in d.iter_mut().zip(mask) {
                *dv *= m;
            }
        }

        // through linear
        let x = if li == 0 {
            &tape.input
        } else {
            &tape.layers[li - 1].out
        };
        {
            let g = &mut grads.layers[li];
            for s in 0..n {
                let dr = &d[s * o_dim..(s + 1) * o_dim];
                let xr = &x[s * i_dim..(s + 1) * i_dim];
                for o in 0..o_dim {
                    let dz = dr[o];
                    g.db[o] += dz;
                    let gw = &mut g.dw[o * i_dim..(o + 1) * i_dim];
                    for i in 0..i_dim {
                        gw[i] += dz * xr[i];
                    }
                }
            }
        }
        let mut dx = vec![0.0; n * i_dim];
        for s in 0..n {
            let dr = &d[s * o_dim..(s + 1) * o_dim];
            let dxr = &mut dx[s * i_dim..(s + 1) * i_dim];
            for o in 0..o_dim {
                let dz = dr[o];
                let wr = &layer.w[o * i_dim..(o + 1) * i_dim];
                for i in 0..i_dim {
                    dxr[i] += dz * wr[i];
                }
            }
        }
        // backward of a dense layer costs twice its forward
        flops::add(4 * (n as u64) * (i_dim as u64) * (o_dim as u64));
        d = dx;
    }

    Ok((grads, d))
}

/// Single-vector convenience wrapper around [`backward_batch`].
pub fn backward(params: &MlpParams, tape: &Tape, upstream: &[f64]) -> Result<GradientBuffer> {
    let (g, _) = backward_batch(params, tape, upstream)?;
    Ok(g)
}

/// Standalone layer normalization with the variance floor; mean 0 and unit
/// variance before gain/shift (up to the floor).
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != shift.len() {
        return Err(Error::Config("layer_norm width mismatch".into()));
    }
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / var.max(LAYER_NORM_VAR_FLOOR).sqrt();
    Ok(x.iter()
        .enumerate()
        .map(|(i, v)| gain[i] * (v - mean) * inv_std + shift[i])
        .collect())
}

/// Adaptive-moment optimizer configuration.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second-moment accumulators, one flat pair per parameter slice.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
        AdamState {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Gradients must be finite.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &GradientBuffer,
    state: &mut AdamState,
) -> Result<()> {
    let gslices = grads.grad_slices();
    {
        let pslices = params.param_slices();
        if pslices.len() != gslices.len()
            || pslices
                .iter()
                .zip(&gslices)
                .any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::Config("gradient shape mismatch".into()));
        }
    }
    for (si, g) in gslices.iter().enumerate() {
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at slice {si}, index {pos}"
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);

    let mut pslices = params.param_slices_mut();
    for (si, p) in pslices.iter_mut().enumerate() {
        let g = gslices[si];
        let m = &mut state.m[si];
        let v = &mut state.v[si];
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Elementwise soft blend `target <- tau*source + (1-tau)*target`.
pub fn soft_update(target: &mut MlpParams, source: &MlpParams, tau: f64) -> Result<()> {
    let src = source.param_slices();
    let mut dst = target.param_slices_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Config("soft_update shape mismatch".into()));
    }
    for (d, s) in dst.iter_mut().zip(&src) {
        for i in 0..d.len() {
            d[i] = tau * s[i] + (1.0 - tau) * d[i];
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

/// Magic bytes of the flat binary parameter checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SOPE1";

/// Write a network checkpoint: magic, layer count, then per layer
/// (in, out as u32 LE, activation code, norm flag) followed by row-major
/// 64-bit little-endian weights/biases/norm parameters in declaration order.
pub fn write_mlp<W: Write>(w: &mut W, params: &MlpParams) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for l in &params.layers {
        w.write_all(&(l.in_dim as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim as u32).to_le_bytes())?;
        w.write_all(&[l.activation.code(), l.norm.is_some() as u8])?;
    }
    for s in params.param_slices() {
        for v in s {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint written by [`write_mlp`].
pub fn read_mlp<R: Read>(r: &mut R, path: &Path) -> Result<MlpParams> {
    let mut offset = 0u64;
    let err = |message: &str, offset: u64| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
        offset,
    };

    let mut magic = [0u8; 5];
    read_exact_at(r, &mut magic, &mut offset, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(err("bad magic bytes", 0));
    }
    let n_layers = read_u32(r, &mut offset, path)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(err("implausible layer count", offset - 4));
    }
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = read_u32(r, &mut offset, path)? as usize;
        let out_dim = read_u32(r, &mut offset, path)? as usize;
        let mut flags = [0u8; 2];
        read_exact_at(r, &mut flags, &mut offset, path)?;
        let activation = Activation::from_code(flags[0])
            .ok_or_else(|| err("unknown activation code", offset - 2))?;
        specs.push(LayerSpec {
            in_dim,
            out_dim,
            activation,
            layer_norm: flags[1] != 0,
        });
    }
    let mut params = MlpParams::zeros(&specs)?;
    for s in params.param_slices_mut() {
        for v in s.iter_mut() {
            *v = read_f64(r, &mut offset, path)?;
        }
    }
    Ok(params)
}

pub fn save_mlp(path: &Path, params: &MlpParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mlp(&mut f, params)
}

pub fn load_mlp(path: &Path) -> Result<MlpParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_mlp(&mut f, path)
}

fn read_exact_at<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    offset: &mut u64,
    path: &Path,
) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: "unexpected end of file".into(),
        offset: *offset,
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R, offset: &mut u64, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, offset, path)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, offset: &mut u64, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_at(r, &mut b, offset, path)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, offset: &mut u64, path: &Path) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r, offset, path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spec(in_dim: usize, out_dim: usize, activation: Activation, layer_norm: bool) -> LayerSpec {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
            layer_norm,
        }
    }

    #[test]
    fn single_linear_layer_affine_map() {
        let mut p = MlpParams::zeros(&[spec(1, 1, Activation::Identity, false)]).unwrap();
        p.layers[0].w[0] = 2.0;
        p.layers[0].b[0] = 1.0;
        let (out, _) = forward(&p, &[3.0], Mode::Eval).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let p = MlpParams::zeros(&[
            spec(4, 8, Activation::Relu, false),
            spec(8, 2, Activation::Identity, false),
        ])
        .unwrap();
        let (out, _) = forward(&p, &[1.0, -2.0, 3.0, 0.5], Mode::Eval).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn train_mode_dropout_is_seed_deterministic() {
        let p = MlpParams::init(
            &[
                spec(3, 16, Activation::Relu, true),
                spec(16, 2, Activation::Identity, false),
            ],
            &mut rng(11),
        )
        .unwrap();
        let x = [0.3, -0.7, 1.2];
        let run = || {
            let mut r = rng(42);
            let (out, _) = forward(
                &p,
                &x,
                Mode::Train {
                    keep_prob: 0.5,
                    rng: &mut r,
                },
            )
            .unwrap();
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_scalar_product() {
        let mut p = MlpParams::zeros(&[spec(1, 1, Activation::Identity, false)]).unwrap();
        p.layers[0].w[0] = 5.0;
        let (_, tape) = forward(&p, &[3.0], Mode::Eval).unwrap();
        let g = backward(&p, &tape, &[1.0]).unwrap();
        assert_eq!(g.layers[0].dw[0], 3.0);
        assert_eq!(g.layers[0].db[0], 1.0);
    }

    #[test]
    fn layer_norm_constant_input_floors_and_zeroes_gain_grad() {
        let out = layer_norm(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);

        // gradient of the gain path over a constant input is zero
        let p = MlpParams::zeros(&[spec(3, 3, Activation::Identity, true)]).unwrap();
        let (_, tape) = forward(&p, &[2.0, 2.0, 2.0], Mode::Eval).unwrap();
        let g = backward(&p, &tape, &[1.0, 1.0, 1.0]).unwrap();
        let (dgain, _) = g.layers[0].dnorm.as_ref().unwrap();
        assert!(dgain.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[-1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);

        // x=[0,2,4], gain=2, shift=1 with the population-variance convention
        let x = [0.0, 2.0, 4.0];
        let std = (8.0f64 / 3.0).sqrt();
        let expect: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * (v - 2.0) / std).collect();
        let out = layer_norm(&x, &[2.0; 3], &[1.0; 3]).unwrap();
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    /// Central finite differences over every parameter of a scalar loss.
    fn finite_diff_check(specs: &[LayerSpec], seed: u64, batch: usize) -> f64 {
        let mut r = rng(seed);
        let params = MlpParams::init(specs, &mut r).unwrap();
        let in_dim = specs[0].in_dim;
        let out_dim = specs.last().unwrap().out_dim;
        let x: Vec<f64> = (0..batch * in_dim)
            .map(|_| ((r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) * 2.0 - 1.0)
            .collect();
        let upstream: Vec<f64> = (0..batch * out_dim)
            .map(|_| ((r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) * 2.0 - 1.0)
            .collect();

        let loss = |p: &MlpParams| -> f64 {
            let (out, _) = forward_batch(p, &x, batch, Mode::Eval).unwrap();
            out.iter().zip(&upstream).map(|(o, u)| o * u).sum()
        };

        let (_, tape) = forward_batch(&params, &x, batch, Mode::Eval).unwrap();
        let (grads, _) = backward_batch(&params, &tape, &upstream).unwrap();

        let h = 1e-5;
        let gs = grads.grad_slices();
        let mut max_rel = 0.0f64;
        let n_slices = gs.len();
        for si in 0..n_slices {
            for i in 0..gs[si].len() {
                let mut pp = params.clone();
                pp.param_slices_mut()[si][i] += h;
                let up = loss(&pp);
                let mut pm = params.clone();
                pm.param_slices_mut()[si][i] -= h;
                let dn = loss(&pm);
                let fd = (up - dn) / (2.0 * h);
                let an = gs[si][i];
                let denom = fd.abs().max(an.abs()).max(1e-3);
                max_rel = max_rel.max((fd - an).abs() / denom);
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases: Vec<Vec<LayerSpec>> = vec![
            vec![
                spec(4, 12, Activation::Relu, false),
                spec(12, 12, Activation::Tanh, false),
                spec(12, 2, Activation::Identity, false),
            ],
            vec![
                spec(5, 10, Activation::Relu, true),
                spec(10, 10, Activation::Relu, true),
                spec(10, 1, Activation::Identity, false),
            ],
            vec![
                spec(3, 8, Activation::Tanh, true),
                spec(8, 3, Activation::Identity, false),
            ],
        ];
        for (k, specs) in cases.iter().enumerate() {
            let max_rel = finite_diff_check(specs, 100 + k as u64, 4);
            assert!(max_rel < 1e-4, "case {k}: max relative error {max_rel}");
        }
    }

    #[test]
    fn dropout_is_unbiased() {
        let p = MlpParams::init(
            &[
                spec(3, 16, Activation::Relu, false),
                spec(16, 1, Activation::Identity, false),
            ],
            &mut rng(5),
        )
        .unwrap();
        let x = [0.4, -0.2, 0.9];
        let (eval_out, _) = forward(&p, &x, Mode::Eval).unwrap();
        let mut r = rng(77);
        let n = 20_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let (o, _) = forward(
                &p,
                &x,
                Mode::Train {
                    keep_prob: 0.5,
                    rng: &mut r,
                },
            )
            .unwrap();
            vals.push(o[0]);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - eval_out[0]).abs() < 3.0 * se.max(1e-12),
            "mean {mean} vs eval {} (se {se})",
            eval_out[0]
        );
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let p0 = MlpParams::init(&[spec(2, 3, Activation::Identity, false)], &mut rng(1)).unwrap();
        let mut p = p0.clone();
        let g = GradientBuffer::zeros_like(&p);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.checksum(), p0.checksum());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = MlpParams::zeros(&[spec(1, 1, Activation::Identity, false)]).unwrap();
        let mut g = GradientBuffer::zeros_like(&p);
        g.layers[0].dw[0] = 0.1;
        let mut st = AdamState::new(&p, AdamConfig::with_lr(1e-3));
        adam_step(&mut p, &g, &mut st).unwrap();
        // mhat = g, vhat = g^2, delta = -lr * g/|g| up to eps
        let expect = -1e-3 * (0.1 / (0.01f64.sqrt() + 1e-8));
        assert!((p.layers[0].w[0] - expect).abs() < 1e-9);
        assert!((p.layers[0].w[0] + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_magnitude() {
        let mut p = MlpParams::zeros(&[spec(1, 1, Activation::Identity, false)]).unwrap();
        let mut g = GradientBuffer::zeros_like(&p);
        g.layers[0].dw[0] = 0.7;
        let mut st = AdamState::new(&p, AdamConfig::with_lr(1e-3));
        for _ in 0..2000 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        for _ in 0..10 {
            let before = p.layers[0].w[0];
            adam_step(&mut p, &g, &mut st).unwrap();
            let delta = p.layers[0].w[0] - before;
            assert!(delta < 0.0);
            assert!((delta.abs() - 1e-3).abs() < 1e-5, "delta {delta}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = MlpParams::zeros(&[spec(2, 1, Activation::Identity, false)]).unwrap();
        let mut g = GradientBuffer::zeros_like(&p);
        g.layers[0].dw[1] = f64::NAN;
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &g, &mut st).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("index 1"));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p = MlpParams::init(
            &[
                spec(6, 32, Activation::Relu, true),
                spec(32, 32, Activation::Relu, true),
                spec(32, 4, Activation::Identity, false),
            ],
            &mut rng(9),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_mlp(&mut buf, &p).unwrap();
        let q = read_mlp(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(p.layers[0].activation, q.layers[0].activation);
        assert!(q.layers[0].norm.is_some() && q.layers[2].norm.is_none());
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let buf = b"NOPE1\x01\x00\x00\x00".to_vec();
        let err = read_mlp(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let p = MlpParams::zeros(&[spec(3, 2, Activation::Identity, false)]).unwrap();
        assert!(matches!(
            forward(&p, &[1.0, 2.0], Mode::Eval),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            forward(&p, &[1.0, f64::NAN, 0.0], Mode::Eval),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn stale_tape_is_usage_error() {
        let p1 = MlpParams::zeros(&[spec(2, 2, Activation::Identity, false)]).unwrap();
        let p2 = MlpParams::zeros(&[spec(2, 3, Activation::Identity, false)]).unwrap();
        let (_, tape) = forward(&p1, &[0.1, 0.2], Mode::Eval).unwrap();
        assert!(matches!(
            backward(&p2, &tape, &[1.0, 1.0, 1.0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn flop_meter_counts_dense_multiply_adds() {
        flops::reset();
        let p = MlpParams::zeros(&[
            spec(4, 8, Activation::Relu, false),
            spec(8, 1, Activation::Identity, false),
        ])
        .unwrap();
        let before = flops::total();
        let (_, tape) = forward_batch(&p, &vec![0.0; 12], 3, Mode::Eval).unwrap();
        let fwd = flops::total() - before;
        assert_eq!(fwd, 3 * (2 * 4 * 8 + 2 * 8));
        backward_batch(&p, &tape, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(flops::total() - before, 3 * fwd);
        assert_eq!(p.forward_flops_per_sample(), 2 * 4 * 8 + 2 * 8);
    }
}
