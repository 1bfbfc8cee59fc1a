//! Time-dependent MLP velocity field, flow-matching training, and
//! checkpoint I/O.
//!
//! The network maps `[x, sin(f_j t), cos(f_j t)]` through tanh hidden layers
//! to a velocity of the same dimension as `x`. Training regresses the field
//! toward the straight-line velocity `x1 - x0` along the interpolation
//! `x_t = (1-t) x0 + t x1`, with t drawn uniformly per sample.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::data::SplitMix64;
use crate::field::VectorField;
use crate::tape::{NodeId, Shape, Tape, Tensor};

/// Number of sinusoidal time-embedding frequencies `{2^i * pi}`.
pub const TIME_FREQS: usize = 6;

fn standard_freqs() -> Vec<f64> {
    (0..TIME_FREQS).map(|i| (1u64 << i) as f64 * std::f64::consts::PI).collect()
}

#[derive(Clone, Debug)]
pub struct Layer {
    /// `[out x in]` row-major weight matrix.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// MLP velocity field `v(x, t)` with sinusoidal time conditioning.
#[derive(Debug)]
pub struct MlpVectorField {
    input_dim: usize,
    freqs: Vec<f64>,
    layers: Vec<Layer>,
    tape_evals: AtomicU64,
}

impl Clone for MlpVectorField {
    fn clone(&self) -> Self {
        MlpVectorField {
            input_dim: self.input_dim,
            freqs: self.freqs.clone(),
            layers: self.layers.clone(),
            tape_evals: AtomicU64::new(0),
        }
    }
}

impl MlpVectorField {
    /// Builds a field from explicit layers, validating the shape chain
    /// `in_0 = d + 2F`, `in_{l+1} = out_l`, `out_last = d`.
    pub fn new(input_dim: usize, freqs: Vec<f64>, layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty(), "model: at least one layer required");
        let feat = input_dim + 2 * freqs.len();
        let mut expected_in = feat;
        for (i, layer) in layers.iter().enumerate() {
            let (rows, cols) = match layer.weight.shape() {
                Shape::Matrix(r, c) => (r, c),
                s => panic!("model: layer {i} weight must be a matrix, got {s}"),
            };
            assert_eq!(cols, expected_in, "model: layer {i} expects {expected_in} inputs, got {cols}");
            assert_eq!(layer.bias.len(), rows, "model: layer {i} bias length {} vs {rows} rows", layer.bias.len());
            expected_in = rows;
        }
        assert_eq!(expected_in, input_dim, "model: output dim {expected_in} must equal input dim {input_dim}");
        let all_finite = layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|v| v.is_finite()));
        assert!(all_finite, "model: non-finite parameter");
        MlpVectorField { input_dim, freqs, layers, tape_evals: AtomicU64::new(0) }
    }

    /// Seeded uniform init on `(-s, s)` with `s = 1/sqrt(fan_in)`.
    pub fn random(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let freqs = standard_freqs();
        let mut rng = SplitMix64::new(seed);
        let mut dims = vec![input_dim + 2 * freqs.len()];
        dims.extend_from_slice(hidden);
        dims.push(input_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| (rng.next_f64() * 2.0 - 1.0) * s)
                    .collect::<Vec<_>>();
                let bias = (0..fan_out).map(|_| (rng.next_f64() * 2.0 - 1.0) * s).collect();
                Layer { weight: Tensor::matrix(fan_out, fan_in, weight), bias }
            })
            .collect();
        Self::new(input_dim, freqs, layers)
    }

    /// All-zero network: `v(x, t) = 0` everywhere.
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let freqs = standard_freqs();
        let mut dims = vec![input_dim + 2 * freqs.len()];
        dims.extend_from_slice(hidden);
        dims.push(input_dim);
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::matrix(w[1], w[0], vec![0.0; w[0] * w[1]]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self::new(input_dim, freqs, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// `[sin(f_0 t), .., sin(f_{F-1} t), cos(f_0 t), .., cos(f_{F-1} t)]`.
    pub fn time_features(&self, t: f64) -> Vec<f64> {
        let mut feat = Vec::with_capacity(2 * self.freqs.len());
        feat.extend(self.freqs.iter().map(|f| (f * t).sin()));
        feat.extend(self.freqs.iter().map(|f| (f * t).cos()));
        feat
    }

    fn check_args(&self, x_len: usize, t: f64) {
        assert_eq!(x_len, self.input_dim, "eval: state dim {x_len} vs model dim {}", self.input_dim);
        assert!((0.0..=1.0).contains(&t), "eval: t = {t} outside [0, 1]");
    }

    fn forward_features(&self, features: &[f64]) -> Vec<f64> {
        let mut act = features.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = match layer.weight.shape() {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            let wd = layer.weight.data();
            let mut next = layer.bias.clone();
            for (i, nv) in next.iter_mut().enumerate() {
                // same kernel as the tape matvec so both paths agree bitwise
                *nv += crate::tape::dot(&wd[i * cols..(i + 1) * cols], &act);
            }
            if l != last {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            act = next;
        }
        act
    }

    /// Stages every parameter on the tape as a trainable leaf.
    pub fn stage_trainable(&self, tape: &mut Tape) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weight.clone());
                let b = tape.leaf(Tensor::vector(l.bias.clone()));
                (w, b)
            })
            .collect()
    }

    /// Forward pass over a `[B x (d + 2F)]` feature matrix with staged
    /// parameters; returns the `[B x d]` velocity matrix.
    pub fn batch_forward(
        &self,
        tape: &mut Tape,
        params: &[(NodeId, NodeId)],
        features: NodeId,
    ) -> NodeId {
        let last = params.len() - 1;
        let mut act = features;
        for (l, &(w, b)) in params.iter().enumerate() {
            let wt = tape.transpose(w);
            let z = tape.matmul(act, wt);
            let z = tape.add_row_bias(z, b);
            act = if l != last { tape.tanh(z) } else { z };
        }
        act
    }

    fn tape_forward(&self, tape: &mut Tape, input: NodeId) -> NodeId {
        let last = self.layers.len() - 1;
        let mut act = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.constant(layer.weight.clone());
            let b = tape.constant(Tensor::vector(layer.bias.clone()));
            let z = tape.matvec(w, act);
            let z = tape.add(z, b);
            act = if l != last { tape.tanh(z) } else { z };
        }
        act
    }

    /// Tape evaluation with `t` itself a tape node (a length-1 vector), so
    /// the result is differentiable in `x`, `t`, and any staged parameters.
    pub fn tape_eval_var_t(&self, tape: &mut Tape, x: NodeId, t: NodeId) -> NodeId {
        self.tape_evals.fetch_add(1, Ordering::Relaxed);
        let mut feat = x;
        let mut sines = None;
        let mut coses = None;
        for &f in &self.freqs {
            let ft = tape.scalar_mul(f, t);
            let s = tape.sin(ft);
            let c = tape.cos(ft);
            sines = Some(match sines {
                None => s,
                Some(prev) => tape.concat(prev, s),
            });
            coses = Some(match coses {
                None => c,
                Some(prev) => tape.concat(prev, c),
            });
        }
        if let (Some(s), Some(c)) = (sines, coses) {
            feat = tape.concat(feat, s);
            feat = tape.concat(feat, c);
        }
        self.tape_forward(tape, feat)
    }
}

impl VectorField for MlpVectorField {
    fn dim(&self) -> usize {
        self.input_dim
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.check_args(x.len(), t);
        let mut features = Vec::with_capacity(x.len() + 2 * self.freqs.len());
        features.extend_from_slice(x);
        features.extend(self.time_features(t));
        self.forward_features(&features)
    }

    fn tape_eval(&self, tape: &mut Tape, x: NodeId, t: f64) -> NodeId {
        let x_len = tape.value(x).shape().len();
        self.check_args(x_len, t);
        self.tape_evals.fetch_add(1, Ordering::Relaxed);
        let feat_const = tape.constant(Tensor::vector(self.time_features(t)));
        let input = tape.concat(x, feat_const);
        self.tape_forward(tape, input)
    }

    fn tape_eval_count(&self) -> u64 {
        self.tape_evals.load(Ordering::Relaxed)
    }

    fn reset_tape_eval_count(&self) {
        self.tape_evals.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: String },
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update across named parameter blocks. Blocks must be
    /// passed in the same order every call; moment buffers are created on
    /// first use.
    pub fn update(&mut self, blocks: &mut [(&str, &mut [f64], &[f64])]) -> Result<(), OptimError> {
        if self.moments.is_empty() {
            self.moments = blocks
                .iter()
                .map(|(_, p, _)| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        assert_eq!(self.moments.len(), blocks.len(), "adam: block count changed");
        for (name, params, grads) in blocks.iter() {
            assert_eq!(params.len(), grads.len(), "adam: block {name} params/grads length mismatch");
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient { block: (*name).to_string() });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((_, params, grads), (m, v)) in blocks.iter_mut().zip(&mut self.moments) {
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Training configuration; `dataset` is a free-form tag recorded for
/// provenance, the sampler itself is passed to [`train`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub dataset: String,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Source of `(x0, x1)` coupling pairs; `x0` comes from the base
/// distribution, `x1` from the data distribution.
pub trait PairSampler {
    fn dim(&self) -> usize;
    fn sample_pair(&mut self) -> (Vec<f64>, Vec<f64>);
}

/// Standard normal base paired with hexagon-boundary data points.
pub struct HexagonPairs {
    rng: SplitMix64,
}

impl HexagonPairs {
    pub fn new(seed: u64) -> Self {
        HexagonPairs { rng: SplitMix64::new(seed) }
    }
}

impl PairSampler for HexagonPairs {
    fn dim(&self) -> usize {
        2
    }

    fn sample_pair(&mut self) -> (Vec<f64>, Vec<f64>) {
        let x0 = self.rng.normal_vec(2);
        let x1 = crate::data::hexagon_point(&mut self.rng);
        (x0, x1)
    }
}

/// Standard normal base paired with 16x16 disc images.
pub struct Discs16Pairs {
    rng: SplitMix64,
}

impl Discs16Pairs {
    pub fn new(seed: u64) -> Self {
        Discs16Pairs { rng: SplitMix64::new(seed) }
    }
}

impl PairSampler for Discs16Pairs {
    fn dim(&self) -> usize {
        crate::data::DISCS16_SIDE * crate::data::DISCS16_SIDE
    }

    fn sample_pair(&mut self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let x0 = self.rng.normal_vec(d);
        let x1 = crate::data::disc_image16(&mut self.rng);
        (x0, x1)
    }
}

/// Mean squared regression error of the field against the straight-line
/// velocity over a batch of `(x0, x1, t)` triples.
pub fn cfm_loss(model: &MlpVectorField, batch: &[(Vec<f64>, Vec<f64>, f64)]) -> f64 {
    assert!(!batch.is_empty(), "cfm_loss: empty batch");
    let mut total = 0.0;
    for (x0, x1, t) in batch {
        let xt: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let v = model.eval(&xt, *t);
        for ((vi, b), a) in v.iter().zip(x1).zip(x0) {
            let diff = vi - (b - a);
            total += diff * diff;
        }
    }
    total / batch.len() as f64
}

/// Builds the batch loss on a tape with staged parameters; used by the
/// training loop and by gradient checks.
pub fn cfm_loss_on_tape(
    tape: &mut Tape,
    model: &MlpVectorField,
    params: &[(NodeId, NodeId)],
    batch: &[(Vec<f64>, Vec<f64>, f64)],
) -> NodeId {
    assert!(!batch.is_empty(), "cfm_loss: empty batch");
    let d = model.input_dim();
    let feat_cols = d + 2 * model.freqs().len();
    let rows = batch.len();
    let mut features = Vec::with_capacity(rows * feat_cols);
    let mut targets = Vec::with_capacity(rows * d);
    for (x0, x1, t) in batch {
        for (a, b) in x0.iter().zip(x1) {
            features.push((1.0 - t) * a + t * b);
        }
        features.extend(model.time_features(*t));
        targets.extend(x0.iter().zip(x1).map(|(a, b)| b - a));
    }
    let features = tape.constant(Tensor::matrix(rows, feat_cols, features));
    let targets = tape.constant(Tensor::matrix(rows, d, targets));
    let pred = model.batch_forward(tape, params, features);
    let diff = tape.sub(pred, targets);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    tape.scalar_mul(1.0 / rows as f64, total)
}

/// Trains a fresh model with Adam on the flow-matching objective; returns
/// the model and the per-iteration loss history.
pub fn train<S: PairSampler>(
    sampler: &mut S,
    config: &TrainConfig,
) -> Result<(MlpVectorField, Vec<f64>), TrainError> {
    if config.iterations < 1 {
        return Err(TrainError::InvalidConfig("iterations must be >= 1".into()));
    }
    if config.batch_size < 1 {
        return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
    }

    let mut model = MlpVectorField::random(sampler.dim(), &config.hidden, config.seed);
    let mut t_rng = SplitMix64::new(config.seed).fork(1);
    let mut adam = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let batch: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..config.batch_size)
            .map(|_| {
                let (x0, x1) = sampler.sample_pair();
                (x0, x1, t_rng.next_f64())
            })
            .collect();

        let mut tape = Tape::new();
        let params = model.stage_trainable(&mut tape);
        let loss = cfm_loss_on_tape(&mut tape, &model, &params, &batch);
        let loss_val = tape.value(loss).as_scalar();
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged { iteration: iter });
        }
        tape.backward(loss);

        let grads: Vec<(Vec<f64>, Vec<f64>)> = params
            .iter()
            .map(|&(w, b)| (tape.grad(w).data().to_vec(), tape.grad(b).data().to_vec()))
            .collect();
        let names: Vec<(String, String)> = (0..model.layers.len())
            .map(|l| (format!("layer{l}.weight"), format!("layer{l}.bias")))
            .collect();
        let mut blocks: Vec<(&str, &mut [f64], &[f64])> = Vec::with_capacity(2 * grads.len());
        for ((layer, (gw, gb)), (wn, bn)) in model.layers.iter_mut().zip(&grads).zip(&names) {
            // weight tensors update in place through their raw data
            blocks.push((wn.as_str(), layer.weight.data_mut(), gw.as_slice()));
            blocks.push((bn.as_str(), layer.bias.as_mut_slice(), gb.as_slice()));
        }
        adam.update(&mut blocks)?;
        losses.push(loss_val);
    }
    Ok((model, losses))
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected FLOWCKPT")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: expected {expected} bytes after headers, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("inconsistent shapes: {0}")]
    BadShape(String),
    #[error("non-finite parameter in layer {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const CKPT_MAGIC: &[u8; 8] = b"FLOWCKPT";
const CKPT_VERSION: u32 = 1;

/// Serializes the model: magic, version, input dim, layer count, per-layer
/// `(rows, cols)` headers, then all weights and biases as little-endian
/// f64, weight before bias, in layer order.
pub fn save_checkpoint(model: &MlpVectorField, path: &Path) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(model.input_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        let (rows, cols) = match layer.weight.shape() {
            Shape::Matrix(r, c) => (r, c),
            _ => unreachable!(),
        };
        bytes.extend_from_slice(&(rows as u32).to_le_bytes());
        bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    }
    for layer in &model.layers {
        for v in layer.weight.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.bias {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]; the embedding
/// frequencies are recovered from the first layer width as the standard
/// progression `{2^i * pi}`.
pub fn load_checkpoint(path: &Path) -> Result<MlpVectorField, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = 8;
    let read_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
        if *pos + 4 > bytes.len() {
            return Err(CheckpointError::Truncated { expected: *pos + 4, found: bytes.len() });
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = read_u32(&mut pos)?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let input_dim = read_u32(&mut pos)? as usize;
    let layer_count = read_u32(&mut pos)? as usize;
    if layer_count == 0 {
        return Err(CheckpointError::BadShape("zero layers".into()));
    }
    let mut shapes = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = read_u32(&mut pos)? as usize;
        let cols = read_u32(&mut pos)? as usize;
        shapes.push((rows, cols));
    }

    let first_in = shapes[0].1;
    if first_in < input_dim || (first_in - input_dim) % 2 != 0 {
        return Err(CheckpointError::BadShape(format!(
            "first layer width {first_in} incompatible with input dim {input_dim}"
        )));
    }
    let n_freqs = (first_in - input_dim) / 2;
    let mut expected_in = first_in;
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        if cols != expected_in {
            return Err(CheckpointError::BadShape(format!(
                "layer {i} expects {expected_in} inputs, header says {cols}"
            )));
        }
        expected_in = rows;
    }
    if expected_in != input_dim {
        return Err(CheckpointError::BadShape(format!(
            "final layer outputs {expected_in}, input dim is {input_dim}"
        )));
    }

    let payload_len: usize = shapes.iter().map(|&(r, c)| (r * c + r) * 8).sum();
    if bytes.len() - pos < payload_len {
        return Err(CheckpointError::Truncated { expected: payload_len, found: bytes.len() - pos });
    }

    let read_f64s = |pos: &mut usize, n: usize| -> Vec<f64> {
        let out = bytes[*pos..*pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *pos += 8 * n;
        out
    };
    let mut layers = Vec::with_capacity(layer_count);
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let weight = read_f64s(&mut pos, rows * cols);
        let bias = read_f64s(&mut pos, rows);
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(i));
        }
        layers.push(Layer { weight: Tensor::matrix(rows, cols, weight), bias });
    }
    let freqs: Vec<f64> =
        (0..n_freqs).map(|i| (1u64 << i) as f64 * std::f64::consts::PI).collect();
    Ok(MlpVectorField::new(input_dim, freqs, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::fd_check;

    fn model_bits(m: &MlpVectorField) -> Vec<u64> {
        m.layers()
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(&l.bias).map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let model = MlpVectorField::zeros(2, &[8, 8]);
        assert_eq!(model.eval(&[0.3, -0.7], 0.25), vec![0.0, 0.0]);
        assert_eq!(model.eval(&[100.0, 5.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn eval_is_deterministic() {
        let model = MlpVectorField::random(2, &[16], 3);
        let a = model.eval(&[0.5, -1.5], 0.3);
        let b = model.eval(&[0.5, -1.5], 0.3);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn eval_rejects_bad_t() {
        let model = MlpVectorField::zeros(2, &[4]);
        model.eval(&[0.0, 0.0], 1.5);
    }

    #[test]
    #[should_panic(expected = "state dim")]
    fn eval_rejects_bad_dim() {
        let model = MlpVectorField::zeros(2, &[4]);
        model.eval(&[0.0, 0.0, 0.0], 0.5);
    }

    #[test]
    fn tape_eval_matches_plain_eval() {
        let model = MlpVectorField::random(3, &[10, 7], 5);
        let x = vec![0.2, -0.4, 1.1];
        let t = 0.37;
        let plain = model.eval(&x, t);
        let mut tape = Tape::new();
        let xn = tape.leaf(Tensor::vector(x));
        let v = model.tape_eval(&mut tape, xn, t);
        assert_eq!(tape.value(v).data(), plain.as_slice());
    }

    #[test]
    fn eval_gradient_wrt_x_matches_fd() {
        let model = MlpVectorField::random(2, &[12], 7);
        for out_idx in 0..2 {
            let err = fd_check(
                |tape, x| {
                    let v = model.tape_eval(tape, x, 0.6);
                    let vi = tape.slice(v, out_idx, out_idx + 1);
                    tape.sum(vi)
                },
                &[0.4, -0.9],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "output {out_idx}: rel err {err}");
        }
    }

    #[test]
    fn eval_gradient_wrt_t_matches_fd() {
        let model = MlpVectorField::random(2, &[12], 11);
        let err = fd_check(
            |tape, tn| {
                let x = tape.constant(Tensor::vector(vec![0.3, 0.8]));
                let v = model.tape_eval_var_t(tape, x, tn);
                tape.sq_norm(v)
            },
            &[0.45],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn cfm_loss_zero_for_exact_field() {
        // constant network: W = 0 so the output is exactly the last bias
        let mut model = MlpVectorField::zeros(2, &[4]);
        let x0 = vec![0.5, -0.5];
        let x1 = vec![1.5, 2.5];
        let target = [x1[0] - x0[0], x1[1] - x0[1]];
        model.layers_mut()[1].bias.copy_from_slice(&target);
        let loss = cfm_loss(&model, &[(x0, x1, 0.3)]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn cfm_loss_zero_network_single_pair() {
        let model = MlpVectorField::zeros(2, &[4]);
        for t in [0.0, 0.25, 0.9] {
            let loss = cfm_loss(&model, &[(vec![0.0, 0.0], vec![2.0, 0.0], t)]);
            assert_eq!(loss, 4.0);
        }
    }

    #[test]
    fn cfm_loss_interpolant_endpoints() {
        let model = MlpVectorField::random(2, &[8], 13);
        let x0 = vec![0.7, -0.2];
        let x1 = vec![-1.1, 0.4];
        let direct = |point: &[f64], t: f64| {
            let v = model.eval(point, t);
            v.iter()
                .zip(x1.iter().zip(&x0))
                .map(|(vi, (b, a))| (vi - (b - a)).powi(2))
                .sum::<f64>()
        };
        // t = 0: interpolant is x0; t = 1: interpolant is x1
        let l0 = cfm_loss(&model, &[(x0.clone(), x1.clone(), 0.0)]);
        assert_eq!(l0, direct(&x0, 0.0));
        let l1 = cfm_loss(&model, &[(x0.clone(), x1.clone(), 1.0)]);
        assert_eq!(l1, direct(&x1, 1.0));
    }

    #[test]
    #[should_panic(expected = "empty batch")]
    fn cfm_loss_rejects_empty_batch() {
        let model = MlpVectorField::zeros(2, &[4]);
        cfm_loss(&model, &[]);
    }

    #[test]
    fn cfm_gradient_matches_fd() {
        // gradient w.r.t. all parameters of a small random model
        let model = MlpVectorField::random(2, &[6], 17);
        let mut rng = SplitMix64::new(23);
        let batch: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..4)
            .map(|_| (rng.normal_vec(2), rng.normal_vec(2), rng.next_f64()))
            .collect();

        let flat: Vec<f64> = model
            .layers()
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(&l.bias).copied().collect::<Vec<_>>())
            .collect();

        let rebuild = |theta: &[f64]| {
            let mut layers = Vec::new();
            let mut pos = 0;
            for l in model.layers() {
                let (r, c) = match l.weight.shape() {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let w = theta[pos..pos + r * c].to_vec();
                pos += r * c;
                let b = theta[pos..pos + r].to_vec();
                pos += r;
                layers.push(Layer { weight: Tensor::matrix(r, c, w), bias: b });
            }
            MlpVectorField::new(2, model.freqs().to_vec(), layers)
        };

        // autodiff gradient through staged parameters
        let mut tape = Tape::new();
        let params = model.stage_trainable(&mut tape);
        let loss = cfm_loss_on_tape(&mut tape, &model, &params, &batch);
        tape.backward(loss);
        let g_ad: Vec<f64> = params
            .iter()
            .flat_map(|&(w, b)| {
                let mut g = tape.grad(w).data().to_vec();
                g.extend_from_slice(tape.grad(b).data());
                g
            })
            .collect();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let mut probe = flat.clone();
            probe[i] += eps;
            let fp = cfm_loss(&rebuild(&probe), &batch);
            probe[i] = flat[i] - eps;
            let fm = cfm_loss(&rebuild(&probe), &batch);
            let fd = (fp - fm) / (2.0 * eps);
            worst = worst.max((g_ad[i] - fd).abs() / (fd.abs() + 1e-12));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut adam = Adam::new(0.1);
        let mut p = [0.0f64];
        adam.update(&mut [("p", &mut p, &[1.0])]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6, "param {}", p[0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut adam = Adam::new(0.1);
        let mut p = [1.5f64, -2.0];
        adam.update(&mut [("p", &mut p, &[0.0, 0.0])]).unwrap();
        assert_eq!(p, [1.5, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut adam = Adam::new(0.1);
        let mut p = [0.0f64];
        let err = adam.update(&mut [("block7", &mut p, &[f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("block7"));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = Adam::new(0.05);
            let mut p = [0.3f64, -0.4];
            for i in 0..25 {
                let g = [0.1 * (i as f64 + 1.0), -0.2];
                adam.update(&mut [("p", &mut p, &g)]).unwrap();
            }
            [p[0].to_bits(), p[1].to_bits()]
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_rejects_zero_iterations() {
        let config = TrainConfig {
            batch_size: 8,
            iterations: 0,
            learning_rate: 1e-3,
            hidden: vec![8],
            seed: 0,
            dataset: "hexagon".into(),
        };
        let err = train(&mut HexagonPairs::new(0), &config).unwrap_err();
        assert!(matches!(err, TrainError::InvalidConfig(_)));
    }

    #[test]
    fn training_is_seed_deterministic_and_reduces_loss() {
        let config = TrainConfig {
            batch_size: 64,
            iterations: 150,
            learning_rate: 2e-3,
            hidden: vec![16, 16],
            seed: 0,
            dataset: "hexagon".into(),
        };
        let (m1, losses1) = train(&mut HexagonPairs::new(42), &config).unwrap();
        let (m2, losses2) = train(&mut HexagonPairs::new(42), &config).unwrap();
        assert_eq!(model_bits(&m1), model_bits(&m2));
        assert_eq!(losses1, losses2);
        let head: f64 = losses1[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses1[losses1.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("flowguide_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let model = MlpVectorField::random(3, &[9, 5], 31);
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(model_bits(&model), model_bits(&back));
        assert_eq!(back.input_dim(), 3);
        assert_eq!(back.freqs(), model.freqs());
    }

    #[test]
    fn checkpoint_bad_magic() {
        let dir = std::env::temp_dir().join("flowguide_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badmagic.ckpt");
        std::fs::write(&path, b"NOTCKPT!restoffile").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn checkpoint_bad_version() {
        let dir = std::env::temp_dir().join("flowguide_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badver.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FLOWCKPT");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn checkpoint_truncated_payload() {
        let dir = std::env::temp_dir().join("flowguide_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let good = dir.join("good.ckpt");
        let model = MlpVectorField::random(2, &[4], 1);
        save_checkpoint(&model, &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 24);
        let bad = dir.join("trunc.ckpt");
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::Truncated { .. })));
    }
}
