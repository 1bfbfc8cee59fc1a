//! Forward operators, simulated measurements, and terminal losses.
//!
//! Every operator offers a structured `apply`, an adjoint for the linear
//! tags, and a dense matrix built independently of the structured path so
//! the two can be checked against each other. The matrix also backs the
//! tape evaluation of terminal losses, whose matvec backward rule is the
//! adjoint by construction.

use std::sync::Arc;

use thiserror::Error;

use crate::data::SplitMix64;
use crate::tape::{NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("nonlinear operator has no adjoint")]
    NonlinearAdjoint,
    #[error("nonlinear operator has no matrix representation")]
    NonlinearMatrix,
}

#[derive(Clone, Debug)]
enum OpKind {
    Identity,
    /// Keep the listed pixel indices, in increasing order.
    Mask { kept: Vec<usize> },
    GaussianBlur { kernel1d: Vec<f64>, radius: usize },
    Downsample2,
    Radon { rows: Vec<Vec<usize>> },
    /// `y = tanh(gamma * blur(x))`.
    NonlinearBlur { kernel1d: Vec<f64>, radius: usize, gamma: f64 },
}

/// A forward operator `A` acting on flattened `h x w` images (or plain
/// vectors for `identity`/`mask`).
#[derive(Clone, Debug)]
pub struct ForwardOperator {
    h: usize,
    w: usize,
    kind: OpKind,
    tag: &'static str,
    /// Dense `[m x d]` representation; for the nonlinear tag this is the
    /// matrix of the inner blur.
    matrix: Tensor,
}

fn gaussian_kernel(sigma: f64) -> (Vec<f64>, usize) {
    assert!(sigma > 0.0, "blur: sigma must be positive");
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    (k, radius)
}

/// Zero-padded separable convolution with a symmetric 1D kernel.
fn blur2d(h: usize, w: usize, kernel: &[f64], radius: usize, x: &[f64]) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = c as isize + ki as isize - radius as isize;
                if (0..w as isize).contains(&cc) {
                    acc += kv * x[r * w + cc as usize];
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = r as isize + ki as isize - radius as isize;
                if (0..h as isize).contains(&rr) {
                    acc += kv * tmp[rr as usize * w + c];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Dense blur matrix from the full 2D kernel (outer product of the 1D
/// kernel), assembled entry by entry.
fn blur_matrix(h: usize, w: usize, kernel: &[f64], radius: usize) -> Tensor {
    let d = h * w;
    let mut m = vec![0.0; d * d];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let row = (r as usize * w + c as usize) * d;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = r + ki as isize - radius as isize;
                if !(0..h as isize).contains(&rr) {
                    continue;
                }
                for (kj, kw) in kernel.iter().enumerate() {
                    let cc = c + kj as isize - radius as isize;
                    if !(0..w as isize).contains(&cc) {
                        continue;
                    }
                    m[row + rr as usize * w + cc as usize] += kv * kw;
                }
            }
        }
    }
    Tensor::matrix(d, d, m)
}

fn selection_matrix(d: usize, kept: &[usize]) -> Tensor {
    let mut m = vec![0.0; kept.len() * d];
    for (i, &j) in kept.iter().enumerate() {
        m[i * d + j] = 1.0;
    }
    Tensor::matrix(kept.len(), d, m)
}

impl ForwardOperator {
    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        ForwardOperator {
            h: 1,
            w: dim,
            kind: OpKind::Identity,
            tag: "identity",
            matrix: Tensor::matrix(dim, dim, m),
        }
    }

    /// Keeps the given coordinate indices (sorted, deduplicated).
    pub fn mask(dim: usize, mut kept: Vec<usize>) -> Self {
        kept.sort_unstable();
        kept.dedup();
        assert!(!kept.is_empty(), "mask: must keep at least one index");
        assert!(*kept.last().unwrap() < dim, "mask: index out of range");
        let matrix = selection_matrix(dim, &kept);
        ForwardOperator { h: 1, w: dim, kind: OpKind::Mask { kept }, tag: "mask", matrix }
    }

    /// Random mask keeping `round(keep_fraction * d)` pixels (at least one),
    /// chosen by a seeded partial shuffle. Note the parameter is the kept
    /// fraction: a task described as "70% removed" uses `keep_fraction 0.3`.
    pub fn random_mask(h: usize, w: usize, keep_fraction: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&keep_fraction), "mask: keep_fraction in [0,1]");
        let d = h * w;
        let m = ((keep_fraction * d as f64).round() as usize).clamp(1, d);
        let mut rng = SplitMix64::new(seed);
        let mut idx: Vec<usize> = (0..d).collect();
        for i in 0..m {
            let j = i + (rng.next_u64() as usize) % (d - i);
            idx.swap(i, j);
        }
        let mut kept = idx[..m].to_vec();
        kept.sort_unstable();
        let matrix = selection_matrix(d, &kept);
        ForwardOperator { h, w, kind: OpKind::Mask { kept }, tag: "mask", matrix }
    }

    /// Keeps everything outside a centered `box_size x box_size` square.
    pub fn box_mask(h: usize, w: usize, box_size: usize) -> Self {
        assert!(box_size < h && box_size < w, "box-mask: box larger than image");
        let (r0, c0) = ((h - box_size) / 2, (w - box_size) / 2);
        let kept: Vec<usize> = (0..h * w)
            .filter(|&p| {
                let (r, c) = (p / w, p % w);
                !(r0..r0 + box_size).contains(&r) || !(c0..c0 + box_size).contains(&c)
            })
            .collect();
        let matrix = selection_matrix(h * w, &kept);
        ForwardOperator { h, w, kind: OpKind::Mask { kept }, tag: "box-mask", matrix }
    }

    /// Zero-padded Gaussian blur with kernel radius `ceil(3 sigma)`.
    pub fn gaussian_blur(h: usize, w: usize, sigma: f64) -> Self {
        let (kernel1d, radius) = gaussian_kernel(sigma);
        let matrix = blur_matrix(h, w, &kernel1d, radius);
        ForwardOperator {
            h,
            w,
            kind: OpKind::GaussianBlur { kernel1d, radius },
            tag: "gaussian-blur",
            matrix,
        }
    }

    /// Keeps every second pixel along each axis.
    pub fn downsample2(h: usize, w: usize) -> Self {
        assert!(h % 2 == 0 && w % 2 == 0, "downsample2: even image sides required");
        let kept: Vec<usize> = (0..h)
            .step_by(2)
            .flat_map(|r| (0..w).step_by(2).map(move |c| r * w + c))
            .collect();
        let matrix = selection_matrix(h * w, &kept);
        ForwardOperator { h, w, kind: OpKind::Downsample2, tag: "downsample2", matrix }
    }

    /// Parallel-beam ray sums: for each of `n_angles` equispaced angles in
    /// `[0, pi)`, each pixel center is binned into one of `w` detector
    /// cells by its projection onto the angle's normal.
    pub fn radon(h: usize, w: usize, n_angles: usize) -> Self {
        assert!(n_angles >= 1, "radon: need at least one angle");
        let detectors = w;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_angles * detectors];
        for a in 0..n_angles {
            let theta = std::f64::consts::PI * a as f64 / n_angles as f64;
            let (nx, ny) = (theta.cos(), theta.sin());
            for r in 0..h {
                for c in 0..w {
                    let x = c as f64 + 0.5 - w as f64 / 2.0;
                    let y = r as f64 + 0.5 - h as f64 / 2.0;
                    let proj = x * nx + y * ny;
                    let det = ((proj + detectors as f64 / 2.0).floor() as isize)
                        .clamp(0, detectors as isize - 1) as usize;
                    rows[a * detectors + det].push(r * w + c);
                }
            }
        }
        let d = h * w;
        let mut m = vec![0.0; rows.len() * d];
        for (i, row) in rows.iter().enumerate() {
            for &p in row {
                m[i * d + p] = 1.0;
            }
        }
        let matrix = Tensor::matrix(rows.len(), d, m);
        ForwardOperator { h, w, kind: OpKind::Radon { rows }, tag: "radon", matrix }
    }

    /// Analytic nonlinear operator `y = tanh(gamma * blur(x))`.
    pub fn nonlinear_blur(h: usize, w: usize, sigma: f64, gamma: f64) -> Self {
        let (kernel1d, radius) = gaussian_kernel(sigma);
        let matrix = blur_matrix(h, w, &kernel1d, radius);
        ForwardOperator {
            h,
            w,
            kind: OpKind::NonlinearBlur { kernel1d, radius, gamma },
            tag: "nonlinear-blur",
            matrix,
        }
    }

    pub fn tag(&self) -> &'static str {
        self.tag
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, OpKind::NonlinearBlur { .. })
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn input_dim(&self) -> usize {
        self.h * self.w
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            OpKind::Identity | OpKind::GaussianBlur { .. } | OpKind::NonlinearBlur { .. } => {
                self.input_dim()
            }
            OpKind::Mask { kept } => kept.len(),
            OpKind::Downsample2 => self.input_dim() / 4,
            OpKind::Radon { rows } => rows.len(),
        }
    }

    /// Kept indices for the selection tags, if any.
    pub fn kept_indices(&self) -> Option<&[usize]> {
        match &self.kind {
            OpKind::Mask { kept } => Some(kept),
            _ => None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "apply: input dim {} vs {}", x.len(), self.input_dim());
        match &self.kind {
            OpKind::Identity => x.to_vec(),
            OpKind::Mask { kept } => kept.iter().map(|&i| x[i]).collect(),
            OpKind::GaussianBlur { kernel1d, radius } => blur2d(self.h, self.w, kernel1d, *radius, x),
            OpKind::Downsample2 => (0..self.h)
                .step_by(2)
                .flat_map(|r| (0..self.w).step_by(2).map(move |c| x[r * self.w + c]))
                .collect(),
            OpKind::Radon { rows } => rows
                .iter()
                .map(|row| row.iter().map(|&p| x[p]).sum())
                .collect(),
            OpKind::NonlinearBlur { kernel1d, radius, gamma } => {
                blur2d(self.h, self.w, kernel1d, *radius, x)
                    .into_iter()
                    .map(|v| (gamma * v).tanh())
                    .collect()
            }
        }
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>, OperatorError> {
        assert_eq!(y.len(), self.output_dim(), "adjoint: input dim {} vs {}", y.len(), self.output_dim());
        match &self.kind {
            OpKind::Identity => Ok(y.to_vec()),
            OpKind::Mask { kept } => {
                let mut out = vec![0.0; self.input_dim()];
                for (i, &j) in kept.iter().enumerate() {
                    out[j] = y[i];
                }
                Ok(out)
            }
            // symmetric kernel with zero padding is self-adjoint
            OpKind::GaussianBlur { kernel1d, radius } => {
                Ok(blur2d(self.h, self.w, kernel1d, *radius, y))
            }
            OpKind::Downsample2 => {
                let mut out = vec![0.0; self.input_dim()];
                let half_w = self.w / 2;
                for (i, &v) in y.iter().enumerate() {
                    let (r, c) = (i / half_w, i % half_w);
                    out[2 * r * self.w + 2 * c] = v;
                }
                Ok(out)
            }
            OpKind::Radon { rows } => {
                let mut out = vec![0.0; self.input_dim()];
                for (row, &v) in rows.iter().zip(y) {
                    for &p in row {
                        out[p] += v;
                    }
                }
                Ok(out)
            }
            OpKind::NonlinearBlur { .. } => Err(OperatorError::NonlinearAdjoint),
        }
    }

    /// Dense matrix of a linear operator, built independently of `apply`.
    pub fn matrix(&self) -> Result<&Tensor, OperatorError> {
        if self.is_linear() {
            Ok(&self.matrix)
        } else {
            Err(OperatorError::NonlinearMatrix)
        }
    }

    /// Records `A x` on the tape. Linear tags go through one matvec whose
    /// backward rule is exactly the adjoint; the nonlinear tag adds its
    /// pointwise head.
    pub fn apply_tape(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let m = tape.constant(self.matrix.clone());
        let bx = tape.matvec(m, x);
        match &self.kind {
            OpKind::NonlinearBlur { gamma, .. } => {
                let scaled = tape.scalar_mul(*gamma, bx);
                tape.tanh(scaled)
            }
            _ => bx,
        }
    }
}

/// A measurement `y = A(x_true) + noise` with its noise level; the ground
/// truth is carried only for evaluation metrics.
#[derive(Clone, Debug)]
pub struct Observation {
    pub operator: Arc<ForwardOperator>,
    pub y: Vec<f64>,
    pub sigma: f64,
    pub x_true: Option<Vec<f64>>,
}

/// Applies the operator and adds seeded Gaussian noise of scale `sigma`.
pub fn simulate_measurement(
    operator: &Arc<ForwardOperator>,
    x_true: &[f64],
    sigma: f64,
    seed: u64,
) -> Observation {
    assert!(sigma >= 0.0, "simulate_measurement: sigma must be >= 0");
    let mut y = operator.apply(x_true);
    if sigma > 0.0 {
        let mut rng = SplitMix64::new(seed);
        let noise = rng.normal_vec(y.len());
        for (v, n) in y.iter_mut().zip(noise) {
            *v += sigma * n;
        }
    }
    Observation {
        operator: Arc::clone(operator),
        y,
        sigma,
        x_true: Some(x_true.to_vec()),
    }
}

/// Terminal cost `Φ` on the trajectory endpoint.
#[derive(Clone, Debug)]
pub enum TerminalLoss {
    /// `scale * ||A(x) - y||^2` with `scale = 1/(2 sigma^2)` by default
    /// (`1/2` when `sigma = 0`), or `1` when the prefactor is disabled.
    DataFidelity { obs: Observation, include_prefactor: bool },
    /// `||x - target||^2`.
    Target { target: Vec<f64> },
}

impl TerminalLoss {
    pub fn data_fidelity(obs: Observation) -> Self {
        TerminalLoss::DataFidelity { obs, include_prefactor: true }
    }

    /// The plain `||A(x) - y||^2` form with the noise prefactor absorbed
    /// into the data-consistency weight.
    pub fn data_fidelity_unscaled(obs: Observation) -> Self {
        TerminalLoss::DataFidelity { obs, include_prefactor: false }
    }

    pub fn target(target: Vec<f64>) -> Self {
        TerminalLoss::Target { target }
    }

    fn scale(&self) -> f64 {
        match self {
            TerminalLoss::DataFidelity { obs, include_prefactor } => {
                if !include_prefactor {
                    1.0
                } else if obs.sigma > 0.0 {
                    1.0 / (2.0 * obs.sigma * obs.sigma)
                } else {
                    0.5
                }
            }
            TerminalLoss::Target { .. } => 1.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TerminalLoss::DataFidelity { obs, .. } => {
                let ax = obs.operator.apply(x);
                let ss: f64 = ax.iter().zip(&obs.y).map(|(a, b)| (a - b) * (a - b)).sum();
                self.scale() * ss
            }
            TerminalLoss::Target { target } => {
                assert_eq!(x.len(), target.len(), "target loss: dim {} vs {}", x.len(), target.len());
                x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
            }
        }
    }

    pub fn tape_eval(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            TerminalLoss::DataFidelity { obs, .. } => {
                let ax = obs.operator.apply_tape(tape, x);
                let y = tape.constant(Tensor::vector(obs.y.clone()));
                let diff = tape.sub(ax, y);
                let ss = tape.sq_norm(diff);
                tape.scalar_mul(self.scale(), ss)
            }
            TerminalLoss::Target { target } => {
                let t = tape.constant(Tensor::vector(target.clone()));
                let diff = tape.sub(x, t);
                tape.sq_norm(diff)
            }
        }
    }
}
