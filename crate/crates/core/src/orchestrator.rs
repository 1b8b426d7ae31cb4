//! Round protocol, joint selection/compression planning, baselines and
//! aggregation.
//!
//! A round samples the environment, builds a [`RoundPlan`], runs local SGD on
//! every selected client, compresses the results, advances the simulated
//! clock by the slowest client's completion time and applies
//! `x ← x − (η_k/M)·Σ G̃_n`.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compression::{compress_with_feedback_traced, top_k_compress, ErrorState, SparseUpdate, BITS_PER_PARAM};
use crate::config::{ExperimentConfig, PlannerKnowledge};
use crate::datagen::{generate_synthetic, load_idx, partition, Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::{evaluate, local_train, loss_and_gradient, lr_at, LrSchedule, ModelSpec};
use crate::ratioplan::{max_feasible_theta, round_deadline, solve_ratios_at, BudgetState, ClientTiming};
use crate::report::{RoundRecord, Summary};
use crate::rng;
use crate::selection::{estimate_alpha, greedy_select, pairwise_distances, update_cache, DistanceMatrix, GradientCache};
use crate::simenv::{self, ClientProfile};
use crate::vector::DenseVector;

/// Round index used for the bootstrap probe.
pub const PROBE_ROUND: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Diverse selection plus per-client ratios from the round LP.
    Fedcg,
    /// Uniform random selection, full updates.
    Fedavg,
    /// Random selection, one deadline-feasible ratio shared by all.
    UniformTopk,
    /// Random selection, per-client ratios from the round LP.
    HeteroTopk,
    /// Capability-weighted sampling, full updates.
    ProbSample,
}

impl StrategyKind {
    pub const NAMES: &'static [&'static str] = &["fedcg", "fedavg", "uniform_topk", "hetero_topk", "prob_sample"];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fedcg" => StrategyKind::Fedcg,
            "fedavg" => StrategyKind::Fedavg,
            "uniform_topk" => StrategyKind::UniformTopk,
            "hetero_topk" => StrategyKind::HeteroTopk,
            "prob_sample" => StrategyKind::ProbSample,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fedcg => "fedcg",
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::UniformTopk => "uniform_topk",
            StrategyKind::HeteroTopk => "hetero_topk",
            StrategyKind::ProbSample => "prob_sample",
        }
    }

    /// Whether the strategy needs the gradient cache, and therefore the probe.
    pub fn uses_cache(self) -> bool {
        self == StrategyKind::Fedcg
    }

    /// Whether uploads are compressed with error feedback.
    pub fn uses_error_feedback(self) -> bool {
        matches!(self, StrategyKind::Fedcg | StrategyKind::UniformTopk | StrategyKind::HeteroTopk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Replaces every planned ratio when set.
    pub force_theta: Option<f64>,
}

/// Clients chosen for one round and their compression ratios, aligned by
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: i64,
    pub selected: Vec<usize>,
    pub theta: Vec<f64>,
    pub feasible: Vec<bool>,
}

impl RoundPlan {
    pub fn theta_sum(&self) -> f64 {
        self.theta.iter().sum()
    }

    pub fn all_feasible(&self) -> bool {
        self.feasible.iter().all(|&f| f)
    }

    fn sort_by_client(&mut self) {
        let mut rows: Vec<(usize, f64, bool)> = self
            .selected
            .iter()
            .zip(&self.theta)
            .zip(&self.feasible)
            .map(|((&c, &t), &f)| (c, t, f))
            .collect();
        rows.sort_by_key(|r| r.0);
        self.selected = rows.iter().map(|r| r.0).collect();
        self.theta = rows.iter().map(|r| r.1).collect();
        self.feasible = rows.iter().map(|r| r.2).collect();
    }
}

/// One pass of the joint-optimization loop.
#[derive(Debug, Clone, PartialEq)]
pub struct JointIteration {
    pub candidates: usize,
    pub selected: Vec<usize>,
    pub theta: Vec<f64>,
    pub theta_sum: f64,
    pub adopted: bool,
    pub removed: usize,
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub plan: RoundPlan,
    pub iterations: Vec<JointIteration>,
}

/// Alternates diverse selection and ratio planning for up to `m`
/// iterations.
///
/// Each iteration greedily selects `m` clients from the candidate set,
/// solves their ratios at `deadline`, adopts the result if its `Σθ` strictly
/// beats the best so far, and then drops the selected client with the
/// smallest ratio (lowest id on ties) from the candidates. The loop stops
/// early once fewer than `m` candidates remain.
#[allow(clippy::too_many_arguments)]
pub fn joint_optimize_at(
    distances: &DistanceMatrix,
    candidates: &[usize],
    timings: &[ClientTiming],
    deadline: f64,
    r_bits: u64,
    m: usize,
    h: usize,
    theta_min: f64,
) -> Result<JointOutcome> {
    if m == 0 || m > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} clients from {} candidates",
            candidates.len()
        )));
    }
    let mut pool: Vec<usize> = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();

    let mut best: Option<RoundPlan> = None;
    let mut best_sum = 0.0;
    let mut iterations = Vec::new();
    for _ in 0..m {
        if pool.len() < m {
            break;
        }
        let selected = greedy_select(distances, &pool, m)?;
        let ts: Vec<ClientTiming> = selected.iter().map(|&c| timings[c]).collect();
        let ratios = solve_ratios_at(&ts, h, deadline, r_bits, theta_min)?;
        let sum: f64 = ratios.theta.iter().sum();
        let adopted = sum > best_sum;
        if adopted {
            best_sum = sum;
            best = Some(RoundPlan {
                round: 0,
                selected: selected.clone(),
                theta: ratios.theta.clone(),
                feasible: ratios.feasible.clone(),
            });
        }
        let removed = selected
            .iter()
            .zip(&ratios.theta)
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
            .map(|(&c, _)| c)
            .expect("m >= 1");
        iterations.push(JointIteration {
            candidates: pool.len(),
            selected,
            theta: ratios.theta,
            theta_sum: sum,
            adopted,
            removed,
        });
        pool.retain(|&c| c != removed);
    }
    let mut plan = best.expect("the first iteration has a positive ratio sum");
    plan.sort_by_client();
    Ok(JointOutcome { plan, iterations })
}

/// [`joint_optimize_at`] over every cached client, at the deadline implied
/// by the budget. `timings` is indexed by client id.
pub fn joint_optimize(
    cache: &GradientCache,
    timings: &[ClientTiming],
    budget: &BudgetState,
    m: usize,
    h: usize,
    theta_min: f64,
) -> Result<JointOutcome> {
    let universe: Vec<usize> = (0..timings.len()).collect();
    if m > universe.len() {
        return Err(Error::InvalidArgument(format!(
            "M = {m} exceeds the {} available clients",
            universe.len()
        )));
    }
    let distances = pairwise_distances(cache, &universe)?;
    let deadline = round_deadline(budget)?;
    joint_optimize_at(&distances, &universe, timings, deadline, budget.update_bits, m, h, theta_min)
}

/// `x − (η/M)·Σ densify(G̃_n)`, summed in ascending client-id order.
pub fn aggregate(global: &DenseVector, updates: &[SparseUpdate], eta: f64, m: usize) -> Result<DenseVector> {
    if updates.len() != m {
        return Err(Error::InvalidArgument(format!(
            "expected {m} updates, got {}",
            updates.len()
        )));
    }
    let mut order: Vec<&SparseUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut sum = DenseVector::zeros(global.len());
    for u in order {
        if u.dim != global.len() {
            return Err(Error::DimensionMismatch {
                expected: global.len(),
                got: u.dim,
            });
        }
        for (&i, &v) in u.indices.iter().zip(&u.values) {
            sum[i as usize] += v;
        }
    }
    let step = eta / m as f64;
    Ok(global.iter().zip(sum.iter()).map(|(x, s)| x - step * s).collect::<Vec<_>>().into())
}

/// Worker parallelism for local training. Zero runs everything on the
/// calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub threads: usize,
}

impl RunOptions {
    /// Reads `FEDSIM_THREADS`; unset or unparsable means serial.
    pub fn from_env() -> Self {
        let threads = std::env::var("FEDSIM_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        RunOptions { threads }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RoundsCompleted,
    BudgetExhausted,
}

/// Outcome of [`Experiment::run_round`].
#[derive(Debug)]
pub enum RoundOutcome {
    Completed(Box<RoundRecord>),
    BudgetExhausted,
}

struct ClientResult {
    update: SparseUpdate,
    beta: f64,
}

fn env_digest(timings: &[ClientTiming]) -> String {
    let mut h = Sha256::new();
    for t in timings {
        h.update(t.compute_time_per_iter.to_le_bytes());
        h.update(t.upload_bps.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads the train and test sets described by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.as_str() {
        "synthetic" => {
            let seed = rng::derive_seed(cfg.seed, &["data".into()]);
            let all = generate_synthetic(
                cfg.synthetic_classes,
                cfg.synthetic_dim,
                cfg.synthetic_samples_per_class + cfg.synthetic_test_per_class,
                cfg.synthetic_separation,
                seed,
            )?;
            all.split_per_class(cfg.synthetic_test_per_class)
        }
        "idx" => {
            let need = |p: &Option<std::path::PathBuf>, name: &str| {
                p.clone().ok_or_else(|| Error::Validation(format!("{name} is required")))
            };
            let train = load_idx(&need(&cfg.idx_train_images, "idx_train_images")?, &need(&cfg.idx_train_labels, "idx_train_labels")?)?;
            let test = load_idx(&need(&cfg.idx_test_images, "idx_test_images")?, &need(&cfg.idx_test_labels, "idx_test_labels")?)?;
            if train.dim() != test.dim() {
                return Err(Error::Mismatch(format!(
                    "train images have {} features, test images {}",
                    train.dim(),
                    test.dim()
                )));
            }
            let classes = train.num_classes().max(test.num_classes());
            let widen = |d: Dataset| Dataset::new(d.features().to_vec(), d.labels().to_vec(), d.dim(), classes);
            Ok((widen(train)?, widen(test)?))
        }
        other => Err(Error::Validation(format!("unknown dataset {other:?}"))),
    }
}

/// Client data split used by a config; shared by every strategy for a seed.
pub fn build_partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<Partition> {
    let spec = cfg.partition_spec(rng::derive_seed(cfg.seed, &["partition".into()]))?;
    spec.validate(train.num_classes()).map_err(|e| Error::Validation(format!("psi: {e}")))?;
    partition(train, cfg.num_clients, &spec)
}

pub fn build_profiles(cfg: &ExperimentConfig) -> Result<Vec<ClientProfile>> {
    let profiles = match &cfg.profiles_path {
        Some(p) => simenv::load_profiles(p)?,
        None => simenv::default_profiles(
            cfg.num_clients,
            &cfg.compute_means_s,
            cfg.compute_std_fraction,
            (cfg.uplink_low_bps, cfg.uplink_high_bps),
        ),
    };
    if profiles.len() != cfg.num_clients {
        return Err(Error::Validation(format!(
            "{} client profiles for num_clients = {}",
            profiles.len(),
            cfg.num_clients
        )));
    }
    if let Some(p) = profiles.iter().find(|p| p.partition_slot >= cfg.num_clients) {
        return Err(Error::Validation(format!(
            "client {} points at partition slot {}",
            p.id, p.partition_slot
        )));
    }
    Ok(profiles)
}

/// Full state of one simulated run.
pub struct Experiment {
    cfg: ExperimentConfig,
    strategy: Strategy,
    planner: PlannerKnowledge,
    train: Dataset,
    test: Dataset,
    partition: Partition,
    profiles: Vec<ClientProfile>,
    spec: ModelSpec,
    schedule: LrSchedule,
    r_bits: u64,
    params: DenseVector,
    cache: GradientCache,
    errors: ErrorState,
    elapsed_s: f64,
    paper_bits_cum: u64,
    wire_bits_cum: u64,
    pool: Option<rayon::ThreadPool>,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_datasets(cfg)?;
        let partition = build_partition(cfg, &train)?;
        let profiles = build_profiles(cfg)?;
        let spec = cfg.model_spec(train.dim(), train.num_classes())?;
        let params = spec.init_params(rng::derive_seed(cfg.seed, &["model".into()]));
        let pool = if opts.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(opts.threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Experiment {
            strategy: Strategy {
                kind: cfg.strategy_kind()?,
                force_theta: cfg.force_theta,
            },
            planner: cfg.planner()?,
            schedule: cfg.lr_schedule()?,
            r_bits: BITS_PER_PARAM * spec.dim() as u64,
            errors: ErrorState::new(spec.dim()),
            cfg: cfg.clone(),
            train,
            test,
            partition,
            profiles,
            spec,
            params,
            cache: GradientCache::new(),
            elapsed_s: 0.0,
            paper_bits_cum: 0,
            wire_bits_cum: 0,
            pool,
        })
    }

    pub fn params(&self) -> &DenseVector {
        &self.params
    }

    pub fn elapsed_s(&self) -> f64 {
        self.elapsed_s
    }

    pub fn cache(&self) -> &GradientCache {
        &self.cache
    }

    pub fn error_state(&self) -> &ErrorState {
        &self.errors
    }

    pub fn model_spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn update_bits(&self) -> u64 {
        self.r_bits
    }

    fn client_rows(&self, client: usize) -> &[usize] {
        &self.partition.assignments[self.profiles[client].partition_slot]
    }

    fn conditions(&self, round: i64) -> Vec<ClientTiming> {
        simenv::sample_round_conditions(&self.profiles, round, self.cfg.seed)
    }

    fn evaluate_into(&self, rec: &mut RoundRecord) -> Result<()> {
        let ev = evaluate(&self.spec, &self.params, &self.test)?;
        rec.test_acc = Some(ev.accuracy);
        rec.test_loss = Some(ev.loss);
        Ok(())
    }

    /// Bootstrap round: every client uploads one compressed minibatch
    /// gradient at `x^0` to seed the gradient cache. Strategies that never
    /// read the cache log a skipped probe instead and are charged nothing.
    /// Returns the round −1 record, evaluated at the initial model.
    pub fn probe(&mut self) -> Result<RoundRecord> {
        let timings = self.conditions(PROBE_ROUND);
        let mut rec = RoundRecord::empty(PROBE_ROUND, self.strategy.kind.name(), env_digest(&timings));
        if !self.strategy.kind.uses_cache() {
            rec.probe_skipped = Some(true);
            self.evaluate_into(&mut rec)?;
            return Ok(rec);
        }
        let theta = self.cfg.theta_probe;
        let n = self.profiles.len();
        let results: Vec<Result<ClientResult>> = self.map_clients(&(0..n).collect::<Vec<_>>(), |exp, c| {
            let rows = exp.client_rows(c);
            let mut s = rng::stream(exp.cfg.seed, &["probe".into(), c.into()]);
            let batch: Vec<usize> = (0..exp.cfg.batch_size)
                .map(|_| rows[rand::Rng::random_range(&mut s, 0..rows.len())])
                .collect();
            let (_, g) = loss_and_gradient(&exp.spec, &exp.params, &batch, &exp.train)?;
            let (mut update, residual) = top_k_compress(&g, theta)?;
            update.client_id = c;
            update.round = PROBE_ROUND;
            Ok(ClientResult {
                update,
                beta: residual.norm(),
            })
        });
        let results: Vec<ClientResult> = results.into_iter().collect::<Result<_>>()?;
        let updates: Vec<SparseUpdate> = results.iter().map(|r| r.update.clone()).collect();
        update_cache(&mut self.cache, &updates, 1, PROBE_ROUND);

        let plan = RoundPlan {
            round: PROBE_ROUND,
            selected: (0..n).collect(),
            theta: vec![theta; n],
            feasible: vec![true; n],
        };
        let rt = simenv::round_time(&plan, &timings, 1, self.r_bits);
        let (model_bits, wire) = simenv::account(&updates);
        self.elapsed_s += rt;
        self.paper_bits_cum += model_bits;
        self.wire_bits_cum += wire;

        rec.selected = plan.selected;
        rec.theta = plan.theta;
        rec.feasible = plan.feasible;
        rec.round_time_s = rt;
        rec.alpha_bound = 0.0;
        rec.beta_mean = results.iter().map(|r| r.beta).sum::<f64>() / n as f64;
        self.fill_totals(&mut rec);
        self.evaluate_into(&mut rec)?;
        Ok(rec)
    }

    fn fill_totals(&self, rec: &mut RoundRecord) {
        rec.elapsed_s = self.elapsed_s;
        rec.paper_bits_cum = self.paper_bits_cum;
        rec.wire_bits_cum = self.wire_bits_cum;
    }

    fn map_clients<T: Send>(&self, clients: &[usize], f: impl Fn(&Self, usize) -> T + Sync) -> Vec<T> {
        match &self.pool {
            Some(pool) => pool.install(|| clients.par_iter().map(|&c| f(self, c)).collect()),
            None => clients.iter().map(|&c| f(self, c)).collect(),
        }
    }

    fn random_selection(&self, round: usize) -> Vec<usize> {
        let mut s = rng::stream(self.cfg.seed, &["select".into(), round.into()]);
        let mut v = index::sample(&mut s, self.profiles.len(), self.cfg.clients_per_round).into_vec();
        v.sort_unstable();
        v
    }

    fn capability_sampling(&self, round: usize) -> Result<Vec<usize>> {
        let h = self.cfg.local_iters as f64;
        let r = self.r_bits as f64;
        let weights: Vec<f64> = self
            .profiles
            .iter()
            .map(|p| 1.0 / (h * p.compute_mean_s + r / (2.0 * 0.5 * (p.bw_low_bps + p.bw_high_bps))))
            .collect();
        let mut s = rng::stream(self.cfg.seed, &["select".into(), round.into()]);
        let mut v = index::sample_weighted(&mut s, weights.len(), |i| weights[i], self.cfg.clients_per_round)
            .map_err(|e| Error::InvalidArgument(format!("weighted sampling: {e}")))?
            .into_vec();
        v.sort_unstable();
        Ok(v)
    }

    /// Builds the round plan for `round` at `deadline` using the planner's
    /// view of the client conditions.
    pub fn plan_round(&self, round: usize, deadline: f64, planning: &[ClientTiming]) -> Result<RoundPlan> {
        let (h, m, tmin) = (self.cfg.local_iters, self.cfg.clients_per_round, self.cfg.theta_min);
        let mut plan = match self.strategy.kind {
            StrategyKind::Fedavg | StrategyKind::ProbSample => {
                let selected = if self.strategy.kind == StrategyKind::Fedavg {
                    self.random_selection(round)
                } else {
                    self.capability_sampling(round)?
                };
                RoundPlan {
                    round: 0,
                    theta: vec![1.0; selected.len()],
                    feasible: vec![true; selected.len()],
                    selected,
                }
            }
            StrategyKind::UniformTopk => {
                let selected = self.random_selection(round);
                let best: Vec<f64> = selected
                    .iter()
                    .map(|&c| max_feasible_theta(&planning[c], h, deadline, self.r_bits))
                    .collect();
                let shared = best.iter().copied().fold(1.0, f64::min).clamp(tmin, 1.0);
                RoundPlan {
                    round: 0,
                    theta: vec![shared; selected.len()],
                    feasible: best.iter().map(|&b| b >= tmin).collect(),
                    selected,
                }
            }
            StrategyKind::HeteroTopk => {
                let selected = self.random_selection(round);
                let ts: Vec<ClientTiming> = selected.iter().map(|&c| planning[c]).collect();
                let ratios = solve_ratios_at(&ts, h, deadline, self.r_bits, tmin)?;
                RoundPlan {
                    round: 0,
                    selected,
                    theta: ratios.theta,
                    feasible: ratios.feasible,
                }
            }
            StrategyKind::Fedcg => {
                let universe: Vec<usize> = (0..self.profiles.len()).collect();
                let distances = pairwise_distances(&self.cache, &universe)?;
                joint_optimize_at(&distances, &universe, planning, deadline, self.r_bits, m, h, tmin)?.plan
            }
        };
        if let Some(t) = self.strategy.force_theta {
            plan.theta.iter_mut().for_each(|x| *x = t);
        }
        plan.round = round as i64;
        Ok(plan)
    }

    /// Runs round `round`. Returns [`RoundOutcome::BudgetExhausted`] without
    /// touching any state when no budget is left, or when a plan whose
    /// clients all claim feasibility would still overrun the budget.
    pub fn run_round(&mut self, round: usize) -> Result<RoundOutcome> {
        let budget = BudgetState {
            total_budget_s: self.cfg.total_budget_s,
            elapsed_s: self.elapsed_s,
            rounds_total: self.cfg.rounds,
            round_index: round,
            update_bits: self.r_bits,
        };
        let deadline = match round_deadline(&budget) {
            Ok(d) => d,
            Err(Error::BudgetExhausted { .. }) => return Ok(RoundOutcome::BudgetExhausted),
            Err(e) => return Err(e),
        };
        let timings = self.conditions(round as i64);
        let planning = match self.planner {
            PlannerKnowledge::Oracle => timings.clone(),
            PlannerKnowledge::PreviousRound => self.conditions(round as i64 - 1),
        };
        let plan = self.plan_round(round, deadline, &planning)?;
        let (h, m) = (self.cfg.local_iters, plan.selected.len());
        let rt = simenv::round_time(&plan, &timings, h, self.r_bits);
        if plan.all_feasible() && self.elapsed_s + rt > self.cfg.total_budget_s {
            return Ok(RoundOutcome::BudgetExhausted);
        }

        let eta = lr_at(&self.schedule, round);
        let kind = self.strategy.kind;
        let trained = self.map_clients(&plan.selected, |exp, c| {
            let mut s = rng::stream(exp.cfg.seed, &["sgd".into(), round.into(), c.into()]);
            local_train(&exp.spec, &exp.params, &exp.train, exp.client_rows(c), h, exp.cfg.batch_size, eta, &mut s)
                .map(|(u, _)| u)
        });
        let mut results = Vec::with_capacity(m);
        for ((&c, &theta), local) in plan.selected.iter().zip(&plan.theta).zip(trained) {
            let g = local?.summed_gradient;
            let (mut update, beta) = if kind.uses_error_feedback() {
                let out = compress_with_feedback_traced(&g, theta, &mut self.errors, c)?;
                (out.update, out.beta)
            } else {
                let (u, residual) = top_k_compress(&g, theta)?;
                (u, residual.norm())
            };
            update.client_id = c;
            update.round = round as i64;
            results.push(ClientResult { update, beta });
        }
        let updates: Vec<SparseUpdate> = results.iter().map(|r| r.update.clone()).collect();
        let next = aggregate(&self.params, &updates, eta, m)?;
        if !next.is_finite() {
            return Err(Error::NonFinite("aggregate"));
        }
        self.params = next;

        let (model_bits, wire) = simenv::account(&updates);
        self.elapsed_s += rt;
        self.paper_bits_cum += model_bits;
        self.wire_bits_cum += wire;
        update_cache(&mut self.cache, &updates, h, round as i64);

        let universe = self.cache.clients();
        let distances = pairwise_distances(&self.cache, &universe)?;
        let alpha = estimate_alpha(&distances, &plan.selected, &universe)?;

        let mut rec = RoundRecord::empty(round as i64, kind.name(), env_digest(&timings));
        rec.selected = plan.selected.clone();
        rec.theta = plan.theta.clone();
        rec.feasible = plan.feasible.clone();
        rec.deadline_s = Some(deadline);
        rec.round_time_s = rt;
        rec.eta_k = Some(eta);
        rec.alpha_bound = alpha.alpha_bound;
        rec.gamma = Some(alpha.gamma);
        rec.beta_mean = results.iter().map(|r| r.beta).sum::<f64>() / m as f64;
        self.fill_totals(&mut rec);
        if (round + 1).is_multiple_of(self.cfg.eval_every) || round + 1 == self.cfg.rounds {
            self.evaluate_into(&mut rec)?;
        }
        Ok(RoundOutcome::Completed(Box::new(rec)))
    }

    /// Probe plus rounds until `K` or the budget runs out. The final record
    /// is always evaluated.
    pub fn run(&mut self) -> Result<(Vec<RoundRecord>, StopReason)> {
        let mut records = vec![self.probe()?];
        let mut stop = StopReason::RoundsCompleted;
        if self.elapsed_s >= self.cfg.total_budget_s && self.cfg.rounds > 0 {
            return Ok((records, StopReason::BudgetExhausted));
        }
        for k in 0..self.cfg.rounds {
            match self.run_round(k)? {
                RoundOutcome::Completed(rec) => records.push(*rec),
                RoundOutcome::BudgetExhausted => {
                    stop = StopReason::BudgetExhausted;
                    break;
                }
            }
        }
        let last = records.last_mut().expect("probe record");
        if last.test_acc.is_none() {
            let ev = evaluate(&self.spec, &self.params, &self.test)?;
            last.test_acc = Some(ev.accuracy);
            last.test_loss = Some(ev.loss);
        }
        Ok((records, stop))
    }
}

/// Runs one configured experiment with `FEDSIM_THREADS` parallelism.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<RoundRecord>, Summary)> {
    run_experiment_with(cfg, RunOptions::from_env())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: RunOptions) -> Result<(Vec<RoundRecord>, Summary)> {
    let mut exp = Experiment::new(cfg, opts)?;
    let (records, stop) = exp.run()?;
    let summary = Summary::from_records(cfg, &records, stop);
    Ok((records, summary))
}
