//! Round records, run summaries and the files they are written to.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::orchestrator::StopReason;

/// One line of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: i64,
    pub strategy: String,
    pub selected: Vec<usize>,
    pub theta: Vec<f64>,
    pub feasible: Vec<bool>,
    pub deadline_s: Option<f64>,
    pub round_time_s: f64,
    pub elapsed_s: f64,
    pub paper_bits_cum: u64,
    pub wire_bits_cum: u64,
    pub eta_k: Option<f64>,
    pub alpha_bound: f64,
    pub beta_mean: f64,
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
    /// Nearest-member multiplicities of the selected clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<usize>>,
    /// Digest of every client's sampled conditions for this round.
    pub env_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_skipped: Option<bool>,
}

impl RoundRecord {
    pub fn empty(round: i64, strategy: &str, env_digest: String) -> Self {
        RoundRecord {
            round,
            strategy: strategy.to_string(),
            selected: Vec::new(),
            theta: Vec::new(),
            feasible: Vec::new(),
            deadline_s: None,
            round_time_s: 0.0,
            elapsed_s: 0.0,
            paper_bits_cum: 0,
            wire_bits_cum: 0,
            eta_k: None,
            alpha_bound: 0.0,
            beta_mean: 0.0,
            test_acc: None,
            test_loss: None,
            gamma: None,
            env_digest,
            probe_skipped: None,
        }
    }
}

/// Simulated time and model-bit traffic at the first evaluation reaching
/// `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetHit {
    pub round: i64,
    pub time_s: f64,
    pub paper_bits: u64,
    pub wire_bits: u64,
}

pub fn time_to_target(records: &[RoundRecord], target: f64) -> Option<TargetHit> {
    records
        .iter()
        .find(|r| r.test_acc.is_some_and(|a| a >= target))
        .map(|r| TargetHit {
            round: r.round,
            time_s: r.elapsed_s,
            paper_bits: r.paper_bits_cum,
            wire_bits: r.wire_bits_cum,
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub rounds_completed: usize,
    pub stop_reason: StopReason,
    pub elapsed_s: f64,
    pub final_acc: Option<f64>,
    pub total_paper_bits: u64,
    pub total_wire_bits: u64,
    pub targets: Vec<(f64, Option<TargetHit>)>,
}

impl Summary {
    pub fn from_records(cfg: &ExperimentConfig, records: &[RoundRecord], stop: StopReason) -> Self {
        let last = records.last();
        Summary {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            strategy: cfg.strategy.clone(),
            rounds_completed: records.iter().filter(|r| r.round >= 0).count(),
            stop_reason: stop,
            elapsed_s: last.map_or(0.0, |r| r.elapsed_s),
            final_acc: records.iter().rev().find_map(|r| r.test_acc),
            total_paper_bits: last.map_or(0, |r| r.paper_bits_cum),
            total_wire_bits: last.map_or(0, |r| r.wire_bits_cum),
            targets: cfg
                .accuracy_targets
                .iter()
                .map(|&t| (t, time_to_target(records, t)))
                .collect(),
        }
    }

    /// Header and the single data row of `summary.csv`.
    pub fn csv_rows(&self) -> (Vec<String>, Vec<String>) {
        let mut header: Vec<String> = [
            "config_hash",
            "seed",
            "strategy",
            "rounds_completed",
            "stop_reason",
            "elapsed_s",
            "final_acc",
            "total_paper_bits",
            "total_wire_bits",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut row = vec![
            self.config_hash.clone(),
            self.seed.to_string(),
            self.strategy.clone(),
            self.rounds_completed.to_string(),
            match self.stop_reason {
                StopReason::RoundsCompleted => "rounds_completed".into(),
                StopReason::BudgetExhausted => "budget_exhausted".into(),
            },
            self.elapsed_s.to_string(),
            self.final_acc.map_or(String::new(), |a| a.to_string()),
            self.total_paper_bits.to_string(),
            self.total_wire_bits.to_string(),
        ];
        for (t, hit) in &self.targets {
            header.push(format!("time_to_target_s@{t}"));
            header.push(format!("paper_bits_to_target@{t}"));
            row.push(hit.map_or(String::new(), |h| h.time_s.to_string()));
            row.push(hit.map_or(String::new(), |h| h.paper_bits.to_string()));
        }
        (header, row)
    }
}

pub fn write_jsonl(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<()> {
    let (header, row) = summary.csv_rows();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(&header)
        .and_then(|_| w.write_record(&row))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub hit: Option<TargetHit>,
    /// Time of the first run divided by this run's time.
    pub speedup: Option<f64>,
}

pub fn compare(runs: &[(String, Vec<RoundRecord>)], target: f64) -> Vec<CompareRow> {
    let hits: Vec<Option<TargetHit>> = runs.iter().map(|(_, r)| time_to_target(r, target)).collect();
    let base = hits.first().copied().flatten();
    runs.iter()
        .zip(&hits)
        .map(|((label, _), hit)| CompareRow {
            label: label.clone(),
            hit: *hit,
            speedup: match (base, hit) {
                (Some(b), Some(h)) if h.time_s > 0.0 => Some(b.time_s / h.time_s),
                (Some(_), Some(_)) => Some(1.0),
                _ => None,
            },
        })
        .collect()
}

pub fn write_compare_table(out: &mut impl Write, rows: &[CompareRow], target: f64) -> std::io::Result<()> {
    writeln!(out, "target accuracy {target}")?;
    writeln!(
        out,
        "{:<40} {:>16} {:>20} {:>20} {:>9}",
        "run", "time_to_target_s", "paper_bits_to_target", "wire_bits_to_target", "speedup"
    )?;
    let dash = "—".to_string();
    for r in rows {
        let (t, pb, wb) = match r.hit {
            Some(h) => (format!("{:.3}", h.time_s), h.paper_bits.to_string(), h.wire_bits.to_string()),
            None => (dash.clone(), dash.clone(), dash.clone()),
        };
        let s = r.speedup.map_or(dash.clone(), |s| format!("{s:.2}×"));
        writeln!(out, "{:<40} {:>16} {:>20} {:>20} {:>9}", r.label, t, pb, wb, s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: i64, acc: Option<f64>, t: f64, bits: u64) -> RoundRecord {
        let mut r = RoundRecord::empty(round, "x", String::new());
        r.test_acc = acc;
        r.elapsed_s = t;
        r.paper_bits_cum = bits;
        r
    }

    #[test]
    fn speedup_against_first_run() {
        let fedavg = vec![rec(0, Some(0.5), 3000.0, 10), rec(1, Some(0.9), 6000.0, 20)];
        let fedcg = vec![rec(0, Some(0.91), 2000.0, 5)];
        let rows = compare(&[("fedavg".into(), fedavg), ("fedcg".into(), fedcg)], 0.9);
        assert_eq!(rows[0].speedup, Some(1.0));
        assert_eq!(rows[1].speedup, Some(3.0));
    }

    #[test]
    fn unreached_target_prints_dash() {
        let runs = vec![("a".to_string(), vec![rec(0, Some(0.2), 1.0, 1), rec(1, None, 2.0, 2)])];
        let rows = compare(&runs, 0.9);
        assert_eq!(rows[0].hit, None);
        let mut out = Vec::new();
        write_compare_table(&mut out, &rows, 0.9).unwrap();
        assert!(String::from_utf8(out).unwrap().contains('—'));
    }

    #[test]
    fn single_run_speedup_is_one() {
        let rows = compare(&[("a".into(), vec![rec(0, Some(1.0), 4.0, 1)])], 0.5);
        assert_eq!(rows[0].speedup, Some(1.0));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut r = rec(-1, Some(0.1), 0.0, 0);
        r.probe_skipped = Some(true);
        let recs = vec![r, rec(0, None, 1.5, 3)];
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 2);
    }
}
