//! Per-round compression ratios under the remaining time budget.
//!
//! The round problem maximizes `Σ θ_n` subject to every selected client
//! finishing within the per-round deadline `D_k` and `0 < θ_n ≤ 1`. The
//! objective is separable and the deadline is shared, so each client simply
//! takes the largest ratio it can upload in time:
//!
//! ```text
//! θ_n = clamp((D_k − H·T_cmp,n) · C_n / R, 0, 1)
//! ```
//!
//! Clients that cannot meet the deadline at all get `theta_min` and are
//! flagged infeasible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientTiming {
    /// Seconds per local iteration.
    pub compute_time_per_iter: f64,
    /// Uplink bits per second.
    pub upload_bps: f64,
}

impl ClientTiming {
    /// `H·T_cmp + θ·R/C`.
    pub fn completion_time(&self, h: usize, theta: f64, r_bits: u64) -> f64 {
        h as f64 * self.compute_time_per_iter + theta * r_bits as f64 / self.upload_bps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetState {
    pub total_budget_s: f64,
    pub elapsed_s: f64,
    pub rounds_total: usize,
    pub round_index: usize,
    pub update_bits: u64,
}

/// `D_k = (T − elapsed) / (K − k)`.
pub fn round_deadline(b: &BudgetState) -> Result<f64> {
    if b.round_index >= b.rounds_total {
        return Err(Error::InvalidArgument(format!(
            "round {} is past the last round {}",
            b.round_index, b.rounds_total
        )));
    }
    let remaining = b.total_budget_s - b.elapsed_s;
    let rounds_left = b.rounds_total - b.round_index;
    if remaining <= 0.0 {
        return Err(Error::BudgetExhausted {
            remaining_s: remaining,
            rounds_left,
        });
    }
    Ok(remaining / rounds_left as f64)
}

/// Largest ratio that lets the client finish within `deadline`, clamped
/// to `[0, 1]`. Zero means even the computation alone misses it.
pub fn max_feasible_theta(t: &ClientTiming, h: usize, deadline: f64, r_bits: u64) -> f64 {
    let slack = deadline - h as f64 * t.compute_time_per_iter;
    if slack <= 0.0 {
        return 0.0;
    }
    (slack * t.upload_bps / r_bits as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioPlan {
    pub deadline: f64,
    pub theta: Vec<f64>,
    pub feasible: Vec<bool>,
}

/// Ratios for the given clients at a known deadline.
pub fn solve_ratios_at(timings: &[ClientTiming], h: usize, deadline: f64, r_bits: u64, theta_min: f64) -> Result<RatioPlan> {
    if timings.is_empty() {
        return Err(Error::InvalidArgument("no clients to plan for".into()));
    }
    if !(theta_min > 0.0 && theta_min <= 1.0) {
        return Err(Error::InvalidArgument(format!("theta_min must lie in (0, 1], got {theta_min}")));
    }
    let mut theta = Vec::with_capacity(timings.len());
    let mut feasible = Vec::with_capacity(timings.len());
    for t in timings {
        let best = max_feasible_theta(t, h, deadline, r_bits);
        theta.push(best.max(theta_min));
        feasible.push(best >= theta_min);
    }
    Ok(RatioPlan {
        deadline,
        theta,
        feasible,
    })
}

pub fn solve_ratios(timings: &[ClientTiming], h: usize, b: &BudgetState, theta_min: f64) -> Result<RatioPlan> {
    let deadline = round_deadline(b)?;
    solve_ratios_at(timings, h, deadline, b.update_bits, theta_min)
}
