//! Local objective, minibatch SGD and evaluation.
//!
//! Two model kinds are supported: multinomial logistic (softmax) regression,
//! which is convex once `l2 > 0`, and a one-hidden-layer `tanh` perceptron.
//! Both report mean cross-entropy plus `l2/2 · ‖x‖²` as their loss.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::vector::DenseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    TwoLayerPerceptron,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub l2: f64,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize, l2: f64) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            num_classes,
            hidden_dim: 0,
            l2,
        }
    }

    pub fn perceptron(input_dim: usize, hidden_dim: usize, num_classes: usize, l2: f64) -> Self {
        ModelSpec {
            kind: ModelKind::TwoLayerPerceptron,
            input_dim,
            num_classes,
            hidden_dim,
            l2,
        }
    }

    /// Number of parameters `d`.
    pub fn dim(&self) -> usize {
        let (i, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::SoftmaxRegression => i * c + c,
            ModelKind::TwoLayerPerceptron => h * i + h + c * h + c,
        }
    }

    /// Starting point `x^0`. Softmax starts at zero; the perceptron needs a
    /// seeded symmetric-breaking draw.
    pub fn init_params(&self, seed: u64) -> DenseVector {
        match self.kind {
            ModelKind::SoftmaxRegression => DenseVector::zeros(self.dim()),
            ModelKind::TwoLayerPerceptron => {
                let mut rng = rng::stream(seed, &["init".into()]);
                let (i, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
                let mut v = Vec::with_capacity(self.dim());
                let s1 = 1.0 / (i as f64).sqrt();
                v.extend((0..h * i).map(|_| rng.random_range(-s1..s1)));
                v.extend(std::iter::repeat_n(0.0, h));
                let s2 = 1.0 / (h as f64).sqrt();
                v.extend((0..c * h).map(|_| rng.random_range(-s2..s2)));
                v.extend(std::iter::repeat_n(0.0, c));
                DenseVector::from(v)
            }
        }
    }

    fn validate(&self, params: &DenseVector, data: &Dataset) -> Result<()> {
        params.check_len(self.dim())?;
        if data.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: data.dim(),
            });
        }
        Ok(())
    }
}

fn log_softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

struct Forward {
    hidden: Vec<f64>,
    log_probs: Vec<f64>,
}

fn forward(spec: &ModelSpec, p: &[f64], x: &[f64]) -> Forward {
    let (i, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let (w, b) = p.split_at(c * i);
            let mut z: Vec<f64> = (0..c)
                .map(|k| b[k] + w[k * i..(k + 1) * i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            log_softmax_in_place(&mut z);
            Forward {
                hidden: Vec::new(),
                log_probs: z,
            }
        }
        ModelKind::TwoLayerPerceptron => {
            let (w1, rest) = p.split_at(h * i);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let hidden: Vec<f64> = (0..h)
                .map(|j| {
                    (b1[j] + w1[j * i..(j + 1) * i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
                })
                .collect();
            let mut z: Vec<f64> = (0..c)
                .map(|k| {
                    b2[k] + w2[k * h..(k + 1) * h].iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            log_softmax_in_place(&mut z);
            Forward {
                hidden,
                log_probs: z,
            }
        }
    }
}

/// Accumulates the cross-entropy gradient of one sample into `grad`.
fn backward(spec: &ModelSpec, p: &[f64], x: &[f64], y: usize, fwd: &Forward, grad: &mut [f64]) {
    let (i, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let dz: Vec<f64> = fwd
        .log_probs
        .iter()
        .enumerate()
        .map(|(k, lp)| lp.exp() - if k == y { 1.0 } else { 0.0 })
        .collect();
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let (gw, gb) = grad.split_at_mut(c * i);
            for k in 0..c {
                for (g, xv) in gw[k * i..(k + 1) * i].iter_mut().zip(x) {
                    *g += dz[k] * xv;
                }
                gb[k] += dz[k];
            }
        }
        ModelKind::TwoLayerPerceptron => {
            let w2 = &p[h * i + h..h * i + h + c * h];
            let (gw1, rest) = grad.split_at_mut(h * i);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            for k in 0..c {
                for (g, hv) in gw2[k * h..(k + 1) * h].iter_mut().zip(&fwd.hidden) {
                    *g += dz[k] * hv;
                }
                gb2[k] += dz[k];
            }
            for j in 0..h {
                let dh: f64 = (0..c).map(|k| w2[k * h + j] * dz[k]).sum();
                let da = dh * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
                for (g, xv) in gw1[j * i..(j + 1) * i].iter_mut().zip(x) {
                    *g += da * xv;
                }
                gb1[j] += da;
            }
        }
    }
}

/// Mean cross-entropy over `batch` plus the L2 penalty, with its exact
/// gradient.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &DenseVector,
    batch: &[usize],
    dataset: &Dataset,
) -> Result<(f64, DenseVector)> {
    spec.validate(params, dataset)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    let mut grad = vec![0.0; spec.dim()];
    let mut loss = 0.0;
    for &r in batch {
        let x = dataset.row(r);
        let y = dataset.label(r);
        let fwd = forward(spec, params, x);
        loss -= fwd.log_probs[y];
        backward(spec, params, x, y, &fwd, &mut grad);
    }
    let n = batch.len() as f64;
    loss /= n;
    loss += 0.5 * spec.l2 * params.norm_sq();
    for (g, p) in grad.iter_mut().zip(params.iter()) {
        *g = *g / n + spec.l2 * p;
    }
    Ok((loss, DenseVector::from(grad)))
}

/// Decaying step size `η_k = λ / (k + τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lambda: f64,
    pub tau: f64,
}

impl LrSchedule {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        if !(lambda > 0.0 && tau > 0.0 && lambda.is_finite() && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate schedule needs lambda > 0 and tau > 0, got ({lambda}, {tau})"
            )));
        }
        Ok(LrSchedule { lambda, tau })
    }
}

pub fn lr_at(schedule: &LrSchedule, k: usize) -> f64 {
    schedule.lambda / (k as f64 + schedule.tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `G = Σ_j ∇F(x^{j}; ξ^{j})` over the H local steps.
    pub summed_gradient: DenseVector,
    pub iterations: usize,
    pub samples_used: usize,
}

/// Runs `h` minibatch SGD steps with constant step `eta` from
/// `global_params`. Minibatches are drawn uniformly with replacement from
/// `client_data`.
///
/// The local iterate is kept as `global − eta·G_j`, so the returned final
/// parameters equal `global_params − eta·summed_gradient` bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    global_params: &DenseVector,
    dataset: &Dataset,
    client_data: &[usize],
    h: usize,
    batch_size: usize,
    eta: f64,
    stream: &mut rng::Stream,
) -> Result<(LocalUpdate, DenseVector)> {
    if h == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("H and batch_size must be >= 1".into()));
    }
    if client_data.is_empty() {
        return Err(Error::InvalidArgument("client has no data".into()));
    }
    spec.validate(global_params, dataset)?;

    let mut summed = DenseVector::zeros(spec.dim());
    let mut local = global_params.clone();
    let mut batch = vec![0; batch_size];
    for _ in 0..h {
        for b in batch.iter_mut() {
            *b = client_data[stream.random_range(0..client_data.len())];
        }
        let (_, g) = loss_and_gradient(spec, &local, &batch, dataset)?;
        for (s, gi) in summed.iter_mut().zip(g.iter()) {
            *s += gi;
        }
        for ((l, x0), s) in local.iter_mut().zip(global_params.iter()).zip(summed.iter()) {
            *l = x0 - eta * s;
        }
    }
    if !summed.is_finite() {
        return Err(Error::NonFinite("local_train"));
    }
    Ok((
        LocalUpdate {
            summed_gradient: summed,
            iterations: h,
            samples_used: h * batch_size,
        },
        local,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean cross-entropy, without the L2 term.
    pub loss: f64,
}

/// Index of the largest score; ties go to the lowest class id.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = k;
        }
    }
    best
}

pub fn predict(spec: &ModelSpec, params: &DenseVector, x: &[f64]) -> usize {
    argmax(&forward(spec, params, x).log_probs)
}

pub fn evaluate(spec: &ModelSpec, params: &DenseVector, test: &Dataset) -> Result<Evaluation> {
    spec.validate(params, test)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for r in 0..test.len() {
        let fwd = forward(spec, params, test.row(r));
        let y = test.label(r);
        loss -= fwd.log_probs[y];
        correct += usize::from(argmax(&fwd.log_probs) == y);
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FSIMCKPT";

/// Checkpoint layout: 8-byte magic, little-endian `u64` dimension, then `d`
/// little-endian `f64` values.
pub fn encode_checkpoint(params: &DenseVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenseVector> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != d * 8 {
        return Err(Error::Format(format!(
            "checkpoint declares {d} values but carries {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>()
        .into())
}

pub fn save_checkpoint(path: &Path, params: &DenseVector) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DenseVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
