//! Top-k sparsification with per-client error feedback.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vector::DenseVector;

/// Bits per uncompressed coordinate in the transmission-time model.
pub const BITS_PER_PARAM: u64 = 32;
const WIRE_MAGIC: u32 = 0x4653_5055; // "FSPU"
const WIRE_HEADER_BYTES: usize = 16;

/// A compressed client update: the retained coordinates of one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
    pub theta: f64,
    pub client_id: usize,
    pub round: i64,
}

/// Number of coordinates kept at ratio `theta`: `max(1, ⌈theta·d⌉)`.
pub fn kept_count(dim: usize, theta: f64) -> usize {
    ((theta * dim as f64).ceil() as usize).clamp(1, dim.max(1))
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "compression ratio must lie in (0, 1], got {theta}"
        )))
    }
}

/// Keeps the `k` largest-magnitude entries of `g` (ties to the lower index)
/// and returns the update together with the residual `g − densify(update)`.
pub fn top_k_compress(g: &DenseVector, theta: f64) -> Result<(SparseUpdate, DenseVector)> {
    check_theta(theta)?;
    if g.is_empty() {
        return Err(Error::InvalidArgument("cannot compress an empty vector".into()));
    }
    let d = g.len();
    let k = kept_count(d, theta);
    let mut order: Vec<usize> = (0..d).collect();
    if k < d {
        let by_mag = |a: &usize, b: &usize| g[*b].abs().total_cmp(&g[*a].abs()).then(a.cmp(b));
        order.select_nth_unstable_by(k - 1, by_mag);
        order.truncate(k);
        order.sort_unstable();
    }
    let mut residual = g.clone();
    let mut values = Vec::with_capacity(k);
    for &i in &order {
        values.push(g[i]);
        residual[i] = 0.0;
    }
    Ok((
        SparseUpdate {
            dim: d,
            indices: order.into_iter().map(|i| i as u32).collect(),
            values,
            theta,
            client_id: 0,
            round: 0,
        },
        residual,
    ))
}

pub fn densify(u: &SparseUpdate) -> DenseVector {
    let mut out = DenseVector::zeros(u.dim);
    for (&i, &v) in u.indices.iter().zip(&u.values) {
        out[i as usize] = v;
    }
    out
}

/// Un-transmitted mass per client.
#[derive(Debug, Clone, Default)]
pub struct ErrorState {
    dim: usize,
    residuals: BTreeMap<usize, DenseVector>,
}

impl ErrorState {
    pub fn new(dim: usize) -> Self {
        ErrorState {
            dim,
            residuals: BTreeMap::new(),
        }
    }

    /// The client's residual; zero if it never compressed anything.
    pub fn residual(&self, client: usize) -> DenseVector {
        self.residuals
            .get(&client)
            .cloned()
            .unwrap_or_else(|| DenseVector::zeros(self.dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Result of one error-compensated compression.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub update: SparseUpdate,
    /// `‖densify(update) − (g + residual)‖`, the compression error of the
    /// compensated vector.
    pub beta: f64,
}

/// Compresses `g + residual[client]` and stores the new residual.
pub fn compress_with_feedback(
    g: &DenseVector,
    theta: f64,
    state: &mut ErrorState,
    client: usize,
) -> Result<SparseUpdate> {
    Ok(compress_with_feedback_traced(g, theta, state, client)?.update)
}

pub fn compress_with_feedback_traced(
    g: &DenseVector,
    theta: f64,
    state: &mut ErrorState,
    client: usize,
) -> Result<Compressed> {
    g.check_len(state.dim)?;
    check_theta(theta)?;
    let compensated = match state.residuals.get(&client) {
        Some(r) => g.add(r),
        None => g.clone(),
    };
    let (mut update, residual) = top_k_compress(&compensated, theta)?;
    update.client_id = client;
    let beta = residual.norm();
    state.residuals.insert(client, residual);
    Ok(Compressed { update, beta })
}

/// `β = ‖densify(u) − g_plus_residual‖`.
pub fn compression_error(u: &SparseUpdate, g_plus_residual: &DenseVector) -> Result<f64> {
    g_plus_residual.check_len(u.dim)?;
    Ok(densify(u).distance(g_plus_residual))
}

/// Update size under the transmission-time model (`round(θ·32d)`) and
/// under the actual wire format (64 bits per kept entry plus a 128-bit
/// header).
pub fn wire_bits(u: &SparseUpdate) -> (u64, u64) {
    let full = BITS_PER_PARAM * u.dim as u64;
    let model = (u.theta * full as f64).round() as u64;
    let wire = u.indices.len() as u64 * 64 + 8 * WIRE_HEADER_BYTES as u64;
    (model, wire)
}

/// Serializes to the wire layout: a 16-byte big-endian header
/// `(magic, dim, count, round)`, then `count` big-endian `u32` indices,
/// then `count` big-endian `f32` values.
pub fn encode(u: &SparseUpdate) -> Vec<u8> {
    let n = u.indices.len();
    let mut out = Vec::with_capacity(WIRE_HEADER_BYTES + 8 * n);
    out.extend_from_slice(&WIRE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(u.dim as u32).to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(u.round as i32).to_be_bytes());
    for &i in &u.indices {
        out.extend_from_slice(&i.to_be_bytes());
    }
    for &v in &u.values {
        out.extend_from_slice(&(v as f32).to_be_bytes());
    }
    out
}

/// Parses the wire layout. The header carries no ratio or sender, so the
/// ratio is reported as the effective `count / dim` and the sender is
/// supplied by the caller.
pub fn decode(bytes: &[u8], client_id: usize) -> Result<SparseUpdate> {
    if bytes.len() < WIRE_HEADER_BYTES {
        return Err(Error::Format("sparse update shorter than its header".into()));
    }
    let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(0) != WIRE_MAGIC {
        return Err(Error::Format(format!("bad sparse update magic {:#010x}", word(0))));
    }
    let dim = word(4) as usize;
    let count = word(8) as usize;
    let round = word(12) as i32 as i64;
    if bytes.len() != WIRE_HEADER_BYTES + 8 * count {
        return Err(Error::Format(format!(
            "sparse update of {count} entries needs {} bytes, got {}",
            WIRE_HEADER_BYTES + 8 * count,
            bytes.len()
        )));
    }
    if count == 0 || count > dim {
        return Err(Error::Format(format!("entry count {count} invalid for dimension {dim}")));
    }
    let body = &bytes[WIRE_HEADER_BYTES..];
    let indices: Vec<u32> = body[..4 * count]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i as usize >= dim) {
        return Err(Error::Format("indices must be strictly increasing and below dim".into()));
    }
    let values = body[4 * count..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_be_bytes(c.try_into().unwrap())))
        .collect();
    Ok(SparseUpdate {
        dim,
        indices,
        values,
        theta: count as f64 / dim as f64,
        client_id,
        round,
    })
}
