//! The simulated world: per-client compute and uplink processes, round
//! completion time and traffic accounting.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compression::{wire_bits, SparseUpdate};
use crate::error::{Error, Result};
use crate::orchestrator::RoundPlan;
use crate::ratioplan::ClientTiming;
use crate::rng;

/// Compute samples never fall below this fraction of the mean.
pub const COMPUTE_FLOOR_FRACTION: f64 = 0.1;

/// Per-iteration compute means of the three default device classes.
pub const DEFAULT_COMPUTE_MEANS_S: [f64; 3] = [0.08, 0.12, 0.20];
pub const DEFAULT_COMPUTE_STD_FRACTION: f64 = 0.1;
pub const DEFAULT_UPLINK_BPS: (f64, f64) = (1e6, 5e6);
/// Recorded for completeness; downlink time is not modelled.
pub const DEFAULT_DOWNLINK_BPS: (f64, f64) = (10e6, 20e6);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub id: usize,
    pub compute_mean_s: f64,
    pub compute_std_s: f64,
    pub bw_low_bps: f64,
    pub bw_high_bps: f64,
    /// Index into the data partition.
    pub partition_slot: usize,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::Validation(format!("client profile {}: {why}", self.id)));
        if !(self.compute_mean_s > 0.0 && self.compute_mean_s.is_finite()) {
            return bad("compute_mean_s must be positive");
        }
        if !(self.compute_std_s >= 0.0 && self.compute_std_s.is_finite()) {
            return bad("compute_std_s must be nonnegative");
        }
        if !(self.bw_low_bps > 0.0 && self.bw_low_bps <= self.bw_high_bps && self.bw_high_bps.is_finite()) {
            return bad("bandwidth range must satisfy 0 < bw_low_bps <= bw_high_bps");
        }
        Ok(())
    }
}

/// `n` clients split into contiguous blocks, one per compute class, with the
/// standard deviation a fixed fraction of each class mean.
pub fn default_profiles(n: usize, compute_means_s: &[f64], std_fraction: f64, uplink_bps: (f64, f64)) -> Vec<ClientProfile> {
    let classes = compute_means_s.len().max(1);
    (0..n)
        .map(|id| {
            let mean = compute_means_s[id * classes / n.max(1)];
            ClientProfile {
                id,
                compute_mean_s: mean,
                compute_std_s: mean * std_fraction,
                bw_low_bps: uplink_bps.0,
                bw_high_bps: uplink_bps.1,
                partition_slot: id,
            }
        })
        .collect()
}

/// Reads a JSON array of profiles. Ids must be `0..n` in order.
pub fn load_profiles(path: &Path) -> Result<Vec<ClientProfile>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let profiles: Vec<ClientProfile> = serde_json::from_str(&text)
        .map_err(|e| Error::ConfigParse(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))?;
    for (i, p) in profiles.iter().enumerate() {
        if p.id != i {
            return Err(Error::Validation(format!("profile at position {i} has id {}", p.id)));
        }
        p.validate()?;
    }
    Ok(profiles)
}

pub fn save_profiles(path: &Path, profiles: &[ClientProfile]) -> Result<()> {
    let text = serde_json::to_string_pretty(profiles).expect("profiles serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sample_compute(p: &ClientProfile, stream: &mut rng::Stream) -> f64 {
    let floor = COMPUTE_FLOOR_FRACTION * p.compute_mean_s;
    if p.compute_std_s == 0.0 {
        return p.compute_mean_s;
    }
    let normal = Normal::new(p.compute_mean_s, p.compute_std_s).expect("validated std");
    for _ in 0..64 {
        let x = normal.sample(stream);
        if x >= floor {
            return x;
        }
    }
    floor
}

/// Compute time and uplink speed of every client at `round`, drawn from a
/// stream keyed by `(seed, round, client id)`.
pub fn sample_round_conditions(profiles: &[ClientProfile], round: i64, seed: u64) -> Vec<ClientTiming> {
    profiles
        .iter()
        .map(|p| {
            let mut s = rng::stream(seed, &["net".into(), round.into(), p.id.into()]);
            let compute = sample_compute(p, &mut s);
            let bw = if p.bw_high_bps > p.bw_low_bps {
                s.random_range(p.bw_low_bps..=p.bw_high_bps)
            } else {
                p.bw_low_bps
            };
            ClientTiming {
                compute_time_per_iter: compute,
                upload_bps: bw,
            }
        })
        .collect()
}

/// Completion time of the slowest selected client. `timings` is indexed by
/// client id.
pub fn round_time(plan: &RoundPlan, timings: &[ClientTiming], h: usize, r_bits: u64) -> f64 {
    plan.selected
        .iter()
        .zip(&plan.theta)
        .map(|(&c, &th)| timings[c].completion_time(h, th, r_bits))
        .fold(0.0, f64::max)
}

/// Uplink traffic of one round as `(model bits, wire bits)`.
pub fn account(updates: &[SparseUpdate]) -> (u64, u64) {
    updates.iter().map(wire_bits).fold((0, 0), |(a, b), (x, y)| (a + x, b + y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::top_k_compress;
    use crate::vector::DenseVector;

    fn plan(selected: Vec<usize>, theta: Vec<f64>) -> RoundPlan {
        let feasible = vec![true; selected.len()];
        RoundPlan {
            round: 0,
            selected,
            theta,
            feasible,
        }
    }

    #[test]
    fn zero_std_returns_the_mean() {
        let ps = default_profiles(6, &[0.1, 0.2, 0.3], 0.0, (1e6, 5e6));
        for r in 0..5 {
            for (p, t) in ps.iter().zip(sample_round_conditions(&ps, r, 9)) {
                assert_eq!(t.compute_time_per_iter, p.compute_mean_s);
            }
        }
    }

    #[test]
    fn bandwidth_stays_in_range_and_compute_above_floor() {
        let ps = default_profiles(100, &DEFAULT_COMPUTE_MEANS_S, 0.5, DEFAULT_UPLINK_BPS);
        for r in 0..100 {
            for (p, t) in ps.iter().zip(sample_round_conditions(&ps, r, 1)) {
                assert!((1e6..=5e6).contains(&t.upload_bps));
                assert!(t.compute_time_per_iter >= 0.1 * p.compute_mean_s);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let ps = default_profiles(10, &DEFAULT_COMPUTE_MEANS_S, 0.1, DEFAULT_UPLINK_BPS);
        assert_eq!(sample_round_conditions(&ps, 3, 5), sample_round_conditions(&ps, 3, 5));
        assert_ne!(sample_round_conditions(&ps, 3, 5), sample_round_conditions(&ps, 4, 5));
    }

    #[test]
    fn default_classes_are_contiguous_blocks() {
        let ps = default_profiles(30, &DEFAULT_COMPUTE_MEANS_S, 0.1, DEFAULT_UPLINK_BPS);
        assert_eq!(ps[0].compute_mean_s, 0.08);
        assert_eq!(ps[9].compute_mean_s, 0.08);
        assert_eq!(ps[10].compute_mean_s, 0.12);
        assert_eq!(ps[29].compute_mean_s, 0.20);
        assert!((ps[29].compute_std_s - 0.02).abs() < 1e-15);
    }

    #[test]
    fn round_time_examples() {
        let t = ClientTiming { compute_time_per_iter: 0.1, upload_bps: 2e6 };
        assert!((round_time(&plan(vec![0], vec![0.5]), &[t], 50, 8_000_000) - 7.0).abs() < 1e-12);
        let slow = ClientTiming { compute_time_per_iter: 0.14, upload_bps: 2e6 };
        assert!((round_time(&plan(vec![0, 1], vec![0.5, 0.5]), &[t, slow], 50, 8_000_000) - 9.0).abs() < 1e-12);
        assert!((round_time(&plan(vec![0], vec![0.0]), &[t], 50, 8_000_000) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn traffic_accounting() {
        let g = DenseVector::from(vec![1.0; 1000]);
        let ups: Vec<_> = (0..10).map(|_| top_k_compress(&g, 0.1).unwrap().0).collect();
        let (model_bits, wire) = account(&ups);
        assert_eq!(model_bits, 10 * 3200);
        assert!(wire >= model_bits);
        let full: Vec<_> = (0..10).map(|_| top_k_compress(&g, 1.0).unwrap().0).collect();
        assert_eq!(account(&full).0, 10 * 32 * 1000);
    }

    #[test]
    fn profiles_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let ps = default_profiles(4, &DEFAULT_COMPUTE_MEANS_S, 0.1, DEFAULT_UPLINK_BPS);
        save_profiles(&path, &ps).unwrap();
        assert_eq!(load_profiles(&path).unwrap(), ps);

        let mut bad = ps.clone();
        bad[1].bw_low_bps = 9e6;
        save_profiles(&path, &bad).unwrap();
        assert!(matches!(load_profiles(&path), Err(Error::Validation(_))));
    }
}
