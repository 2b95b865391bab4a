//! Direct-Method off-policy evaluation and the adaptive stopping rule for
//! offline stabilization phases.
//!
//! The DM signal is `J = mean over held-out states s of agg_i Q_i(s, a)`,
//! with `a` drawn from the current policy, so the estimate tracks the value
//! the critic assigns to the actor's own actions. A stabilization phase runs
//! blocks of critic updates on the train side of a buffer split, re-estimates
//! J on the validation side after each block with a fixed evaluation seed
//! (pairing the draws across blocks), and stops once J has failed to improve
//! `patience` times in a row, or at a hard update cap.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::SacAgent;
use crate::error::{Error, Result};
use crate::numerics::{forward_batch, Mode};
use crate::replay::{symmetric_sample_indices, BatchSpec, DualReplayBuffer, ValidationSplit};

/// How per-member critic values are reduced before averaging over states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Min,
    Mean,
}

impl Aggregation {
    pub fn named(name: &str) -> Result<Aggregation> {
        match name {
            "min" => Ok(Aggregation::Min),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?}; expected min or mean"
            ))),
        }
    }

    fn reduce(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        }
    }
}

/// A Direct-Method value estimate over a set of held-out states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmEstimate {
    pub value: f64,
    pub n_states: usize,
}

/// Core DM estimator, generic over the policy and critic so tests can plug
/// in exact table-backed oracles. `policy` draws one action per state;
/// `q_members` returns one value per ensemble member for a state-action
/// pair.
pub fn estimate_j_dm<P, Q>(
    states: &[Vec<f64>],
    mut policy: P,
    mut q_members: Q,
    agg: Aggregation,
    rng: &mut dyn RngCore,
) -> Result<DmEstimate>
where
    P: FnMut(&[f64], &mut dyn RngCore) -> Vec<f64>,
    Q: FnMut(&[f64], &[f64]) -> Vec<f64>,
{
    if states.is_empty() {
        return Err(Error::Usage("DM estimate over zero states".into()));
    }
    let mut total = 0.0;
    for s in states {
        let a = policy(s, rng);
        let q = q_members(s, &a);
        if q.is_empty() {
            return Err(Error::Usage("critic returned no ensemble values".into()));
        }
        let v = agg.reduce(&q);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite DM value {v}")));
        }
        total += v;
    }
    Ok(DmEstimate {
        value: total / states.len() as f64,
        n_states: states.len(),
    })
}

/// DM estimate using an agent's own stochastic policy and live critics.
pub fn estimate_j_dm_agent(
    agent: &SacAgent,
    states: &[Vec<f64>],
    agg: Aggregation,
    rng: &mut dyn RngCore,
) -> Result<DmEstimate> {
    if states.is_empty() {
        return Err(Error::Usage("DM estimate over zero states".into()));
    }
    let mut total = 0.0;
    for s in states {
        let a = agent.sample_action(s, false, rng)?.action;
        let mut x = Vec::with_capacity(s.len() + a.len());
        x.extend_from_slice(s);
        x.extend_from_slice(&a);
        let mut q = Vec::with_capacity(agent.critics.len());
        for critic in &agent.critics {
            let (out, _) = forward_batch(critic, &x, 1, Mode::Eval)?;
            q.push(out[0]);
        }
        let v = agg.reduce(&q);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite DM value {v}")));
        }
        total += v;
    }
    Ok(DmEstimate {
        value: total / states.len() as f64,
        n_states: states.len(),
    })
}

/// Dense FLOPs of one DM evaluation over `n` states (forward passes only).
pub fn flops_dm_eval(agent: &SacAgent, n: usize) -> u64 {
    let a = agent.actor.forward_flops_per_sample();
    let c = agent.critics[0].forward_flops_per_sample();
    (n as u64) * (a + agent.config.ensemble_size as u64 * c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Best-so-far tracker with a patience budget: a strict improvement resets
/// the counter, anything else consumes one unit of patience.
#[derive(Debug, Clone)]
pub struct OpeController {
    best: f64,
    patience: u32,
    limit: u32,
}

impl OpeController {
    pub fn new(patience_limit: u32) -> Result<OpeController> {
        if patience_limit == 0 {
            return Err(Error::Config("patience limit must be positive".into()));
        }
        Ok(OpeController {
            best: f64::NEG_INFINITY,
            patience: 0,
            limit: patience_limit,
        })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn patience_used(&self) -> u32 {
        self.patience
    }

    pub fn observe(&mut self, j: f64) -> StopDecision {
        if j > self.best {
            self.best = j;
            self.patience = 0;
        } else {
            self.patience += 1;
        }
        if self.patience >= self.limit {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The DM signal failed to improve `patience` consecutive evaluations.
    Patience,
    /// The hard per-phase update cap was reached first.
    Cap,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::Cap => "cap",
        }
    }
}

/// Knobs for one stabilization phase.
#[derive(Debug, Clone)]
pub struct StabilizationConfig {
    /// Critic updates between consecutive DM evaluations.
    pub updates_per_eval: u64,
    pub patience: u32,
    /// Hard cap on critic updates within the phase.
    pub max_updates: u64,
    pub batch: BatchSpec,
    pub aggregation: Aggregation,
    /// Seed for the DM evaluation stream; reused for every evaluation in
    /// the phase so successive estimates are paired on the same draws.
    pub eval_seed: u64,
}

/// What one stabilization phase did.
#[derive(Debug, Clone)]
pub struct PhaseRecord {
    pub updates: u64,
    /// DM estimate after each block of updates, in order.
    pub evals: Vec<f64>,
    pub final_j_dm: f64,
    pub best_j_dm: f64,
    pub stop_reason: StopReason,
    pub grad_updates: u64,
    pub flops: u64,
    /// Training batches audited against the validation set; equals
    /// `updates` when every batch passed the disjointness check.
    pub audited_batches: u64,
}

/// Run one offline stabilization phase: critic-only updates on symmetric
/// train-restricted batches, DM evaluations on the validation states, and
/// the patience stopping rule. The actor and temperature are frozen
/// throughout.
pub fn run_stabilization(
    agent: &mut SacAgent,
    buffer: &DualReplayBuffer,
    split: &ValidationSplit,
    cfg: &StabilizationConfig,
    batch_rng: &mut dyn RngCore,
) -> Result<PhaseRecord> {
    if cfg.updates_per_eval == 0 {
        return Err(Error::Config("updates_per_eval must be positive".into()));
    }
    if cfg.max_updates == 0 {
        return Err(Error::Config("max_updates must be positive".into()));
    }
    let val_states: Vec<Vec<f64>> = split
        .validation_indices()
        .map(|(origin, idx)| buffer.get(origin, idx).obs.clone())
        .collect();
    let val_set: std::collections::HashSet<(crate::replay::Origin, u32)> =
        split.validation_indices().collect();

    let mut controller = OpeController::new(cfg.patience)?;
    let mut updates = 0u64;
    let mut audited = 0u64;
    let mut flops = 0u64;
    let mut evals = Vec::new();
    let stop_reason = 'phase: loop {
        for _ in 0..cfg.updates_per_eval {
            if updates >= cfg.max_updates {
                break 'phase StopReason::Cap;
            }
            let indices = symmetric_sample_indices(buffer, cfg.batch, Some(split), batch_rng)?;
            // hard guarantee: held-out states never train the critic
            if indices.iter().any(|key| val_set.contains(key)) {
                return Err(Error::Usage(
                    "validation transition drawn into a stabilization training batch".into(),
                ));
            }
            audited += 1;
            let batch: Vec<_> = indices.iter().map(|&(o, i)| buffer.get(o, i)).collect();
            let report = agent.critic_update(&batch, batch_rng)?;
            agent.target_soft_update()?;
            updates += 1;
            flops += report.flops;
        }
        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
        let est = estimate_j_dm_agent(agent, &val_states, cfg.aggregation, &mut eval_rng)?;
        flops += flops_dm_eval(agent, est.n_states);
        evals.push(est.value);
        if controller.observe(est.value) == StopDecision::Stop {
            break StopReason::Patience;
        }
    };

    let final_j_dm = evals.last().copied().unwrap_or(f64::NEG_INFINITY);
    Ok(PhaseRecord {
        updates,
        final_j_dm,
        best_j_dm: controller.best(),
        evals,
        stop_reason,
        grad_updates: updates,
        flops,
        audited_batches: audited,
    })
}
