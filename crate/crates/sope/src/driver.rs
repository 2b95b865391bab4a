//! End-to-end training schedules, FLOP accounting, seeding, metrics
//! emission, and the pieces behind the CLI.
//!
//! Four schedules share one loop: `sacfd` (one SAC update per environment
//! step), `rlpd_lite` (UTD critic updates per step on a large ensemble),
//! `sope` (online phases punctuated by adaptive, DM-terminated offline
//! stabilization phases), and `speq_fixed` (the same structure with a fixed
//! stabilization length and no controller). All randomness flows from a
//! single root seed split into named streams, so two schedules that perform
//! the same operations consume the same draws and produce identical logs.
//!
//! FLOP cost model: a dense layer forward costs `2 * fan_in * fan_out` per
//! sample, a backward pass costs twice its forward; activation, norm, and
//! optimizer arithmetic are not counted. The ledger accumulates closed-form
//! costs per executed pass and is independently cross-checked against the
//! global instrumentation meter in tests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{load_agent, save_agent, AgentConfig, SacAgent, StochasticActor};
use crate::envlab::{
    compute_anchors, generate_dataset, load_anchors, load_dataset, normalized_score,
    save_anchors, save_dataset, DatasetTier, Env, EnvSpec, RandomPolicy, ScoreAnchors,
};
use crate::error::{Error, Result};
use crate::opestop::{run_stabilization, Aggregation, StabilizationConfig};
use crate::replay::{symmetric_sample, BatchSpec, DualReplayBuffer};

pub const DEFAULT_TOTAL_STEPS: u64 = 50_000;
pub const DEFAULT_N_ONLINE: u64 = 5_000;
pub const DEFAULT_EVAL_INTERVAL: u64 = 2_500;
pub const DEFAULT_EVAL_EPISODES: usize = 10;
pub const DEFAULT_PATIENCE: u32 = 5;
pub const DEFAULT_UPDATES_PER_EVAL: u64 = 500;
pub const DEFAULT_CAP: u64 = 50_000;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_RLPD_UTD: u64 = 20;
pub const DEFAULT_DATASET_SIZE: usize = 50_000;

/// Derive a named random stream from the root seed. Streams are independent
/// by construction (FNV-1a over the name, mixed into the seed), so one
/// component consuming more draws never perturbs another.
pub fn stream_rng(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(root_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Sope,
    Sacfd,
    RlpdLite,
    SpeqFixed,
}

impl ScheduleKind {
    pub fn named(name: &str) -> Result<ScheduleKind> {
        match name {
            "sope" => Ok(ScheduleKind::Sope),
            "sacfd" => Ok(ScheduleKind::Sacfd),
            "rlpd_lite" | "rlpd-lite" => Ok(ScheduleKind::RlpdLite),
            "speq_fixed" | "speq-fixed" => Ok(ScheduleKind::SpeqFixed),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Sope => "sope",
            ScheduleKind::Sacfd => "sacfd",
            ScheduleKind::RlpdLite => "rlpd_lite",
            ScheduleKind::SpeqFixed => "speq_fixed",
        }
    }

    fn has_phases(self) -> bool {
        matches!(self, ScheduleKind::Sope | ScheduleKind::SpeqFixed)
    }
}

/// Everything a single training run needs. Construct with
/// [`ScheduleConfig::new`] for kind-appropriate defaults, then override
/// fields directly, via [`ScheduleConfig::set`], or from a key=value file.
#[derive(Debug, Clone)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub env: String,
    pub tier: DatasetTier,
    pub seed: u64,
    /// Total online environment steps T.
    pub total_steps: u64,
    /// Environment steps between stabilization phases (sope/speq_fixed).
    pub n_online: u64,
    /// Fixed stabilization length (speq_fixed only).
    pub n_fix: u64,
    /// Critic updates per environment step during online interaction.
    pub utd: u64,
    pub patience: u32,
    /// Critic updates between DM evaluations inside a phase.
    pub updates_per_eval: u64,
    /// Hard cap on updates per stabilization phase.
    pub cap: u64,
    /// Validation fraction of the buffer at each split.
    pub rho: f64,
    pub aggregation: Aggregation,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub ensemble_size: usize,
    pub target_subset: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub dropout_keep: f64,
    pub layer_norm: bool,
    pub entropy_in_target: bool,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Online ring-buffer capacity; defaults to `total_steps` (keep all).
    pub online_capacity: usize,
}

impl ScheduleConfig {
    pub fn new(kind: ScheduleKind, env: &str, tier: DatasetTier, seed: u64) -> ScheduleConfig {
        let (utd, ensemble_size, dropout_keep) = match kind {
            ScheduleKind::RlpdLite => (DEFAULT_RLPD_UTD, 10, 1.0),
            _ => (1, 2, 0.99),
        };
        ScheduleConfig {
            kind,
            env: env.to_string(),
            tier,
            seed,
            total_steps: DEFAULT_TOTAL_STEPS,
            n_online: DEFAULT_N_ONLINE,
            n_fix: DEFAULT_N_ONLINE,
            utd,
            patience: DEFAULT_PATIENCE,
            updates_per_eval: DEFAULT_UPDATES_PER_EVAL,
            cap: DEFAULT_CAP,
            rho: DEFAULT_VALIDATION_FRACTION,
            aggregation: Aggregation::Min,
            batch: DEFAULT_BATCH,
            hidden: vec![256, 256],
            ensemble_size,
            target_subset: 2,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            dropout_keep,
            layer_norm: true,
            entropy_in_target: true,
            eval_interval: DEFAULT_EVAL_INTERVAL,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            online_capacity: DEFAULT_TOTAL_STEPS as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.kind.has_phases() && self.n_online == 0 {
            return Err(Error::Config("n_online must be positive".into()));
        }
        if self.kind == ScheduleKind::Sope {
            if self.cap == 0 {
                return Err(Error::Config("cap must be positive for sope".into()));
            }
            if self.updates_per_eval == 0 {
                return Err(Error::Config("updates_per_eval must be positive".into()));
            }
            if self.cap < self.updates_per_eval {
                return Err(Error::Config(
                    "cap must be at least updates_per_eval".into(),
                ));
            }
            if self.total_steps == self.n_online {
                return Err(Error::Config(
                    "total_steps equal to n_online leaves no stabilization phase".into(),
                ));
            }
        }
        if self.utd == 0 {
            return Err(Error::Config("utd must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0,1)",
                self.rho
            )));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("evaluation cadence must be positive".into()));
        }
        BatchSpec::new(self.batch)?;
        Ok(())
    }

    /// Override one field from its key=value text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
        }
        match key {
            "schedule" => self.kind = ScheduleKind::named(value)?,
            "env" => self.env = value.to_string(),
            "tier" => self.tier = DatasetTier::named(value)?,
            "seed" => self.seed = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "n_online" => self.n_online = parse(key, value)?,
            "n_fix" => self.n_fix = parse(key, value)?,
            "utd" => self.utd = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "updates_per_eval" => self.updates_per_eval = parse(key, value)?,
            "cap" => self.cap = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "aggregation" => self.aggregation = Aggregation::named(value)?,
            "batch" => self.batch = parse(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse("hidden", s.trim()))
                    .collect::<Result<_>>()?;
            }
            "ensemble_size" => self.ensemble_size = parse(key, value)?,
            "target_subset" => self.target_subset = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "actor_lr" => self.actor_lr = parse(key, value)?,
            "critic_lr" => self.critic_lr = parse(key, value)?,
            "alpha_lr" => self.alpha_lr = parse(key, value)?,
            "dropout_keep" => self.dropout_keep = parse(key, value)?,
            "layer_norm" => self.layer_norm = parse(key, value)?,
            "entropy_in_target" => self.entropy_in_target = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "online_capacity" => self.online_capacity = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply overrides from a flat key=value file (blank lines and `#`
    /// comments ignored).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                lineno + 1
            )))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical key=value snapshot (sorted keys), written next to run
    /// outputs so any run can be reproduced from its directory.
    pub fn snapshot(&self) -> String {
        let hidden = self
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("actor_lr", format!("{:?}", self.actor_lr)),
            ("aggregation", match self.aggregation {
                Aggregation::Min => "min".into(),
                Aggregation::Mean => "mean".into(),
            }),
            ("alpha_lr", format!("{:?}", self.alpha_lr)),
            ("batch", self.batch.to_string()),
            ("cap", self.cap.to_string()),
            ("critic_lr", format!("{:?}", self.critic_lr)),
            ("dropout_keep", format!("{:?}", self.dropout_keep)),
            ("ensemble_size", self.ensemble_size.to_string()),
            ("entropy_in_target", self.entropy_in_target.to_string()),
            ("env", self.env.clone()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("hidden", hidden),
            ("layer_norm", self.layer_norm.to_string()),
            ("n_fix", self.n_fix.to_string()),
            ("n_online", self.n_online.to_string()),
            ("online_capacity", self.online_capacity.to_string()),
            ("patience", self.patience.to_string()),
            ("rho", format!("{:?}", self.rho)),
            ("schedule", self.kind.name().to_string()),
            ("seed", self.seed.to_string()),
            ("target_subset", self.target_subset.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("tier", self.tier.name().to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("updates_per_eval", self.updates_per_eval.to_string()),
            ("utd", self.utd.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn agent_config(&self, spec: EnvSpec) -> AgentConfig {
        AgentConfig {
            obs_dim: spec.obs_dim,
            act_dim: spec.act_dim,
            hidden: self.hidden.clone(),
            ensemble_size: self.ensemble_size,
            target_subset: self.target_subset,
            gamma: self.gamma,
            tau: self.tau,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            alpha_lr: self.alpha_lr,
            dropout_keep: self.dropout_keep,
            layer_norm: self.layer_norm,
            entropy_in_target: self.entropy_in_target,
            init_log_alpha: 0.0,
            target_entropy: -(spec.act_dim as f64),
        }
    }
}

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

/// Which dense-network pass a FLOP charge belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// One TD step on the full critic ensemble.
    CriticUpdate,
    /// One reparameterized actor + temperature step.
    ActorUpdate,
    /// One actor forward to pick an action (exploration or evaluation).
    PolicyAction,
    /// One Direct-Method evaluation pass over held-out states.
    DmEval,
}

/// Per-sample forward costs of the current networks; all closed forms
/// derive from these.
#[derive(Debug, Clone, Copy)]
pub struct FlopCost {
    pub actor_forward: u64,
    pub critic_forward: u64,
    pub ensemble: u64,
    pub subset: u64,
}

impl FlopCost {
    pub fn of(cfg: &AgentConfig) -> FlopCost {
        let dense = |dims: &[usize]| -> u64 {
            dims.windows(2).map(|w| 2 * (w[0] * w[1]) as u64).sum()
        };
        let mut actor_dims = vec![cfg.obs_dim];
        actor_dims.extend(&cfg.hidden);
        actor_dims.push(2 * cfg.act_dim);
        let mut critic_dims = vec![cfg.obs_dim + cfg.act_dim];
        critic_dims.extend(&cfg.hidden);
        critic_dims.push(1);
        FlopCost {
            actor_forward: dense(&actor_dims),
            critic_forward: dense(&critic_dims),
            ensemble: cfg.ensemble_size as u64,
            subset: cfg.target_subset as u64,
        }
    }

    /// (forward, backward) FLOPs of one pass over a batch of `n`.
    pub fn pass_flops(&self, pass: Pass, n: u64) -> (u64, u64) {
        let (a, c, e, z) = (
            self.actor_forward,
            self.critic_forward,
            self.ensemble,
            self.subset,
        );
        match pass {
            // target action sample + subset target values + per-member
            // train forward; backward through each live member
            Pass::CriticUpdate => (n * (a + z * c + e * c), n * 2 * e * c),
            // action resample + full-ensemble values; backward through the
            // actor and through each member for action gradients
            Pass::ActorUpdate => (n * (a + e * c), n * (2 * a + 2 * e * c)),
            Pass::PolicyAction => (n * a, 0),
            Pass::DmEval => (n * (a + e * c), 0),
        }
    }
}

/// Documented closed-form cost of one pass: total FLOPs, forward + backward.
pub fn flops_per_update(cfg: &AgentConfig, pass: Pass, batch: usize) -> u64 {
    let (f, b) = FlopCost::of(cfg).pass_flops(pass, batch as u64);
    f + b
}

/// Monotone cumulative FLOP/update counters for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub forward_flops: u64,
    pub backward_flops: u64,
    /// Critic-ensemble update steps (the headline gradient-update count).
    pub grad_updates: u64,
    pub actor_updates: u64,
    pub env_steps: u64,
    /// Total FLOPs charged to each stabilization phase, in order.
    pub phase_flops: Vec<u64>,
}

impl FlopLedger {
    pub fn total_flops(&self) -> u64 {
        self.forward_flops + self.backward_flops
    }

    fn charge(&mut self, cost: &FlopCost, pass: Pass, n: u64) {
        let (f, b) = cost.pass_flops(pass, n);
        self.forward_flops += f;
        self.backward_flops += b;
        match pass {
            Pass::CriticUpdate => self.grad_updates += 1,
            Pass::ActorUpdate => self.actor_updates += 1,
            _ => {}
        }
    }
}

/// One entry of the update log: which pass ran at which environment step on
/// how many samples. The log replays the run's entire compute sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateLogEntry {
    pub env_step: u64,
    pub pass: Pass,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub env_step: u64,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub cum_grad_updates: u64,
    pub cum_flops: u64,
    pub cum_forward_flops: u64,
    pub cum_backward_flops: u64,
}

/// One stabilization phase as seen by the schedule.
#[derive(Debug, Clone)]
pub struct PhaseSummary {
    pub index: u32,
    pub start_env_step: u64,
    pub updates: u64,
    /// DM estimates over the phase (empty for fixed-length phases).
    pub evals: Vec<f64>,
    pub final_j_dm: Option<f64>,
    /// "patience", "cap", or "fixed".
    pub stop_reason: &'static str,
    pub flops: u64,
    pub audited_batches: u64,
    pub actor_checksum_before: u64,
    pub actor_checksum_after: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub evals: Vec<EvalPoint>,
    pub final_score: f64,
    pub ledger: FlopLedger,
    pub phases: Vec<PhaseSummary>,
    pub update_log: Vec<UpdateLogEntry>,
    pub wall_seconds: f64,
}

// ---------------------------------------------------------------------------
// data-directory layout
// ---------------------------------------------------------------------------

/// Dataset/anchor root: `$SOPE_DATA_DIR` or `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("SOPE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("./data"))
}

pub fn dataset_path(root: &Path, spec: EnvSpec, tier: DatasetTier) -> PathBuf {
    root.join(format!("{}-{}.sopd", spec.kind.name(), tier.name()))
}

pub fn anchors_path(root: &Path, spec: EnvSpec) -> PathBuf {
    root.join(format!("{}-anchors.txt", spec.kind.name()))
}

pub fn checkpoint_path(root: &Path, spec: EnvSpec, tier: DatasetTier) -> PathBuf {
    root.join(format!("{}-{}-policy.sopa", spec.kind.name(), tier.name()))
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Mean return and normalized score of the deterministic (squashed-mean)
/// policy over `episodes` seeded episodes. Returns the environment-step
/// count so callers can charge the actor forwards to the ledger.
pub fn evaluate_policy(
    agent: &SacAgent,
    spec: EnvSpec,
    anchors: &ScoreAnchors,
    episodes: usize,
    eval_rng: &mut dyn RngCore,
) -> Result<(f64, f64, u64)> {
    if episodes == 0 {
        return Err(Error::Usage("evaluation over zero episodes".into()));
    }
    let mut total = 0.0;
    let mut steps = 0u64;
    let mut null = NullRng;
    for _ in 0..episodes {
        let (mut env, mut obs) = Env::reset(spec, eval_rng.next_u64());
        loop {
            let a = agent.sample_action(&obs, true, &mut null)?;
            let t = env.step(&a.action)?;
            total += t.reward;
            steps += 1;
            if t.terminal || t.truncated {
                break;
            }
            obs = t.next_obs;
        }
    }
    let mean = total / episodes as f64;
    let score = normalized_score(mean, anchors)?;
    Ok((mean, score, steps))
}

struct NullRng;

impl RngCore for NullRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        dest.fill(0);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// the schedule loop
// ---------------------------------------------------------------------------

/// Run any schedule end to end against previously generated datasets and
/// anchors under `root`.
pub fn run_schedule(cfg: &ScheduleConfig, root: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let spec = EnvSpec::named(&cfg.env)?;
    let (dspec, _tier, data) = load_dataset(&dataset_path(root, spec, cfg.tier))?;
    if dspec.kind != spec.kind {
        return Err(Error::Config(format!(
            "dataset was generated for {}, not {}",
            dspec.kind.name(),
            spec.kind.name()
        )));
    }
    let anchors = load_anchors(&anchors_path(root, spec))?;

    let mut agent = SacAgent::new(
        cfg.agent_config(spec),
        &mut stream_rng(cfg.seed, "agent-init"),
    )?;
    let mut buffer = DualReplayBuffer::new(cfg.online_capacity.max(1));
    buffer.load_offline(data)?;

    let mut env_seed_rng = stream_rng(cfg.seed, "env");
    let mut explore_rng = stream_rng(cfg.seed, "explore");
    let mut batch_rng = stream_rng(cfg.seed, "batch-sampling");
    let mut split_rng = stream_rng(cfg.seed, "split");
    let mut dm_rng = stream_rng(cfg.seed, "dm-eval");
    let mut eval_rng = stream_rng(cfg.seed, "eval");

    let cost = FlopCost::of(&agent.config);
    let batch_spec = BatchSpec::new(cfg.batch)?;
    let mut ledger = FlopLedger::default();
    let mut update_log = Vec::new();
    let mut evals = Vec::new();
    let mut phases = Vec::new();
    let started = Instant::now();

    let (mut env, mut obs) = Env::reset(spec, env_seed_rng.next_u64());
    for step in 1..=cfg.total_steps {
        // one environment interaction
        let a = agent.sample_action(&obs, false, &mut explore_rng)?;
        ledger.charge(&cost, Pass::PolicyAction, 1);
        update_log.push(UpdateLogEntry {
            env_step: step,
            pass: Pass::PolicyAction,
            samples: 1,
        });
        let t = env.step(&a.action)?;
        let episode_over = t.terminal || t.truncated;
        obs = t.next_obs.clone();
        buffer.push_online(t);
        ledger.env_steps += 1;
        if episode_over {
            let (e, o) = Env::reset(spec, env_seed_rng.next_u64());
            env = e;
            obs = o;
        }

        // online updates: `utd` critic steps, then one actor step, each on
        // a freshly drawn symmetric batch
        for _ in 0..cfg.utd {
            let batch = symmetric_sample(&buffer, batch_spec, None, &mut batch_rng)?;
            agent.critic_update(&batch, &mut batch_rng)?;
            agent.target_soft_update()?;
            ledger.charge(&cost, Pass::CriticUpdate, cfg.batch as u64);
            update_log.push(UpdateLogEntry {
                env_step: step,
                pass: Pass::CriticUpdate,
                samples: cfg.batch as u64,
            });
        }
        {
            let batch = symmetric_sample(&buffer, batch_spec, None, &mut batch_rng)?;
            agent.actor_and_temperature_update(&batch, &mut batch_rng)?;
            ledger.charge(&cost, Pass::ActorUpdate, cfg.batch as u64);
            update_log.push(UpdateLogEntry {
                env_step: step,
                pass: Pass::ActorUpdate,
                samples: cfg.batch as u64,
            });
        }

        // stabilization phase at online-phase boundaries (not after the
        // final step; training ends there anyway)
        if cfg.kind.has_phases() && step % cfg.n_online == 0 && step < cfg.total_steps {
            let split = crate::replay::make_split(&buffer, cfg.rho, split_rng.next_u64(), step)?;
            let checksum_before = agent.actor_checksum();
            let summary = match cfg.kind {
                ScheduleKind::Sope => {
                    let scfg = StabilizationConfig {
                        updates_per_eval: cfg.updates_per_eval,
                        patience: cfg.patience,
                        max_updates: cfg.cap,
                        batch: batch_spec,
                        aggregation: cfg.aggregation,
                        eval_seed: dm_rng.next_u64(),
                    };
                    let rec =
                        run_stabilization(&mut agent, &buffer, &split, &scfg, &mut batch_rng)?;
                    for _ in 0..rec.updates {
                        ledger.charge(&cost, Pass::CriticUpdate, cfg.batch as u64);
                        update_log.push(UpdateLogEntry {
                            env_step: step,
                            pass: Pass::CriticUpdate,
                            samples: cfg.batch as u64,
                        });
                    }
                    for _ in 0..rec.evals.len() {
                        ledger.charge(&cost, Pass::DmEval, split.validation_len() as u64);
                        update_log.push(UpdateLogEntry {
                            env_step: step,
                            pass: Pass::DmEval,
                            samples: split.validation_len() as u64,
                        });
                    }
                    PhaseSummary {
                        index: phases.len() as u32,
                        start_env_step: step,
                        updates: rec.updates,
                        final_j_dm: Some(rec.final_j_dm),
                        evals: rec.evals,
                        stop_reason: rec.stop_reason.as_str(),
                        flops: rec.flops,
                        audited_batches: rec.audited_batches,
                        actor_checksum_before: checksum_before,
                        actor_checksum_after: 0, // filled below
                    }
                }
                ScheduleKind::SpeqFixed => {
                    let mut flops = 0u64;
                    for _ in 0..cfg.n_fix {
                        let batch =
                            symmetric_sample(&buffer, batch_spec, Some(&split), &mut batch_rng)?;
                        let rep = agent.critic_update(&batch, &mut batch_rng)?;
                        agent.target_soft_update()?;
                        flops += rep.flops;
                        ledger.charge(&cost, Pass::CriticUpdate, cfg.batch as u64);
                        update_log.push(UpdateLogEntry {
                            env_step: step,
                            pass: Pass::CriticUpdate,
                            samples: cfg.batch as u64,
                        });
                    }
                    PhaseSummary {
                        index: phases.len() as u32,
                        start_env_step: step,
                        updates: cfg.n_fix,
                        final_j_dm: None,
                        evals: Vec::new(),
                        stop_reason: "fixed",
                        flops,
                        audited_batches: 0,
                        actor_checksum_before: checksum_before,
                        actor_checksum_after: 0,
                    }
                }
                _ => unreachable!(),
            };
            let mut summary = summary;
            summary.actor_checksum_after = agent.actor_checksum();
            ledger.phase_flops.push(summary.flops);
            phases.push(summary);
        }

        // periodic deterministic evaluation
        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let (mean, score, eval_steps) =
                evaluate_policy(&agent, spec, &anchors, cfg.eval_episodes, &mut eval_rng)?;
            ledger.charge(&cost, Pass::PolicyAction, eval_steps);
            update_log.push(UpdateLogEntry {
                env_step: step,
                pass: Pass::PolicyAction,
                samples: eval_steps,
            });
            evals.push(EvalPoint {
                env_step: step,
                mean_return: mean,
                normalized_score: score,
                cum_grad_updates: ledger.grad_updates,
                cum_flops: ledger.total_flops(),
                cum_forward_flops: ledger.forward_flops,
                cum_backward_flops: ledger.backward_flops,
            });
        }
    }

    let final_score = evals.last().map(|e| e.normalized_score).unwrap_or(0.0);
    Ok(RunResult {
        evals,
        final_score,
        ledger,
        phases,
        update_log,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_sope(cfg: &ScheduleConfig, root: &Path) -> Result<RunResult> {
    expect_kind(cfg, ScheduleKind::Sope)?;
    run_schedule(cfg, root)
}

pub fn run_sacfd(cfg: &ScheduleConfig, root: &Path) -> Result<RunResult> {
    expect_kind(cfg, ScheduleKind::Sacfd)?;
    run_schedule(cfg, root)
}

pub fn run_rlpd_lite(cfg: &ScheduleConfig, root: &Path) -> Result<RunResult> {
    expect_kind(cfg, ScheduleKind::RlpdLite)?;
    run_schedule(cfg, root)
}

pub fn run_speq_fixed(cfg: &ScheduleConfig, root: &Path) -> Result<RunResult> {
    expect_kind(cfg, ScheduleKind::SpeqFixed)?;
    run_schedule(cfg, root)
}

fn expect_kind(cfg: &ScheduleConfig, kind: ScheduleKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Usage(format!(
            "config is for schedule {}, expected {}",
            cfg.kind.name(),
            kind.name()
        )));
    }
    Ok(())
}

/// Closed-form total FLOPs of an update log; the ledger must equal this
/// exactly for every run.
pub fn closed_form_flops(cfg: &AgentConfig, log: &[UpdateLogEntry]) -> u64 {
    let cost = FlopCost::of(cfg);
    log.iter()
        .map(|e| {
            let (f, b) = cost.pass_flops(e.pass, e.samples);
            f + b
        })
        .sum()
}

// ---------------------------------------------------------------------------
// run artifacts
// ---------------------------------------------------------------------------

/// Write metrics.csv, phases.csv, flops.csv, and a config snapshot into
/// `dir` (created if needed).
pub fn write_run_artifacts(dir: &Path, cfg: &ScheduleConfig, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut metrics = String::from("env_step,mean_return,normalized_score,cum_grad_updates,cum_flops\n");
    for e in &result.evals {
        metrics.push_str(&format!(
            "{},{:?},{:?},{},{}\n",
            e.env_step, e.mean_return, e.normalized_score, e.cum_grad_updates, e.cum_flops
        ));
    }
    std::fs::write(dir.join("metrics.csv"), metrics)?;

    let mut phases = String::from("phase_index,start_env_step,updates_in_phase,final_j_dm,stop_reason\n");
    for p in &result.phases {
        let j = match p.final_j_dm {
            Some(v) => format!("{v:?}"),
            None => "nan".to_string(),
        };
        phases.push_str(&format!(
            "{},{},{},{},{}\n",
            p.index, p.start_env_step, p.updates, j, p.stop_reason
        ));
    }
    std::fs::write(dir.join("phases.csv"), phases)?;

    let mut flops = String::from("env_step,cum_forward_flops,cum_backward_flops\n");
    for e in &result.evals {
        flops.push_str(&format!(
            "{},{},{}\n",
            e.env_step, e.cum_forward_flops, e.cum_backward_flops
        ));
    }
    std::fs::write(dir.join("flops.csv"), flops)?;

    std::fs::write(dir.join("config.txt"), cfg.snapshot())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bootstrap and data generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub env: String,
    pub seed: u64,
    /// Online SAC environment-step budget for the expert policy.
    pub budget: u64,
    pub hidden: Vec<usize>,
    pub batch: usize,
    pub anchor_episodes: usize,
}

impl BootstrapConfig {
    pub fn new(env: &str) -> BootstrapConfig {
        BootstrapConfig {
            env: env.to_string(),
            seed: 0,
            budget: 60_000,
            hidden: vec![64, 64],
            batch: 64,
            anchor_episodes: 100,
        }
    }
}

/// Train source policies online (no prior data) and save the three tier
/// checkpoints at ~10% / ~40% / 100% of the training budget, plus
/// random/expert score anchors.
pub fn bootstrap(root: &Path, cfg: &BootstrapConfig) -> Result<()> {
    let spec = EnvSpec::named(&cfg.env)?;
    std::fs::create_dir_all(root)?;
    let mut agent_cfg = AgentConfig::sope_profile(spec.obs_dim, spec.act_dim);
    agent_cfg.hidden = cfg.hidden.clone();
    let mut agent = SacAgent::new(agent_cfg, &mut stream_rng(cfg.seed, "bootstrap-init"))?;
    let mut buffer = DualReplayBuffer::new(cfg.budget as usize);
    let batch_spec = BatchSpec::new(cfg.batch)?;
    let mut env_seed_rng = stream_rng(cfg.seed, "bootstrap-env");
    let mut explore_rng = stream_rng(cfg.seed, "bootstrap-explore");
    let mut batch_rng = stream_rng(cfg.seed, "bootstrap-batch");

    let marks: Vec<(u64, DatasetTier)> = vec![
        ((cfg.budget as f64 * DatasetTier::Simple.training_fraction()) as u64, DatasetTier::Simple),
        ((cfg.budget as f64 * DatasetTier::Medium.training_fraction()) as u64, DatasetTier::Medium),
        (cfg.budget, DatasetTier::Expert),
    ];

    let (mut env, mut obs) = Env::reset(spec, env_seed_rng.next_u64());
    for step in 1..=cfg.budget {
        let a = agent.sample_action(&obs, false, &mut explore_rng)?;
        let t = env.step(&a.action)?;
        let over = t.terminal || t.truncated;
        obs = t.next_obs.clone();
        buffer.push_online(t);
        if over {
            let (e, o) = Env::reset(spec, env_seed_rng.next_u64());
            env = e;
            obs = o;
        }
        let batch = symmetric_sample(&buffer, batch_spec, None, &mut batch_rng)?;
        agent.critic_update(&batch, &mut batch_rng)?;
        agent.target_soft_update()?;
        let batch = symmetric_sample(&buffer, batch_spec, None, &mut batch_rng)?;
        agent.actor_and_temperature_update(&batch, &mut batch_rng)?;

        for &(mark, tier) in &marks {
            if step == mark {
                save_agent(&checkpoint_path(root, spec, tier), &agent)?;
            }
        }
    }

    let expert = load_agent(&checkpoint_path(root, spec, DatasetTier::Expert))?;
    let mut random = RandomPolicy {
        act_dim: spec.act_dim,
    };
    let mut expert_policy = crate::agent::DeterministicActor(&expert);
    let anchors = compute_anchors(
        spec,
        &mut random,
        &mut expert_policy,
        cfg.anchor_episodes,
        stream_rng(cfg.seed, "bootstrap-anchors").next_u64(),
    )?;
    save_anchors(&anchors_path(root, spec), &anchors)?;
    Ok(())
}

/// Generate one tier dataset by rolling out the tier's checkpoint policy
/// with stochastic action sampling.
pub fn gen_data(
    root: &Path,
    env: &str,
    tier: DatasetTier,
    count: usize,
    seed: u64,
) -> Result<()> {
    let spec = EnvSpec::named(env)?;
    let agent = load_agent(&checkpoint_path(root, spec, tier))?;
    let mut policy = StochasticActor(&agent);
    let data = generate_dataset(spec, &mut policy, count, stream_rng(seed, "data").next_u64());
    save_dataset(&dataset_path(root, spec, tier), spec, tier, &data)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// aggregation (report / sweep)
// ---------------------------------------------------------------------------

/// Aggregate metrics.csv files from several run directories into one CSV
/// with mean and standard deviation per evaluation point.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    // env_step -> per-run (score, return, flops)
    let mut by_step: BTreeMap<u64, Vec<(f64, f64, u64)>> = BTreeMap::new();
    for dir in run_dirs {
        let path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Dependency(format!("{} not found; run `sope run` first", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        for (lineno, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Format {
                    path: path.clone(),
                    message: format!("expected 5 columns, got {}", fields.len()),
                    offset: lineno as u64,
                });
            }
            let bad = |m: &str| Error::Format {
                path: path.clone(),
                message: m.to_string(),
                offset: lineno as u64,
            };
            let step: u64 = fields[0].parse().map_err(|_| bad("bad env_step"))?;
            let ret: f64 = fields[1].parse().map_err(|_| bad("bad mean_return"))?;
            let score: f64 = fields[2].parse().map_err(|_| bad("bad normalized_score"))?;
            let flops: u64 = fields[4].parse().map_err(|_| bad("bad cum_flops"))?;
            by_step.entry(step).or_default().push((score, ret, flops));
        }
    }
    let mut out_text = String::from(
        "env_step,runs,mean_score,std_score,mean_return,std_return,mean_cum_flops\n",
    );
    for (step, rows) in &by_step {
        let n = rows.len() as f64;
        let (ms, mr) = (
            rows.iter().map(|r| r.0).sum::<f64>() / n,
            rows.iter().map(|r| r.1).sum::<f64>() / n,
        );
        let var = |mean: f64, vals: Vec<f64>| {
            if vals.len() < 2 {
                0.0
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0))
                    .sqrt()
            }
        };
        let ss = var(ms, rows.iter().map(|r| r.0).collect());
        let sr = var(mr, rows.iter().map(|r| r.1).collect());
        let mf = rows.iter().map(|r| r.2 as f64).sum::<f64>() / n;
        out_text.push_str(&format!(
            "{step},{},{ms:?},{ss:?},{mr:?},{sr:?},{mf:?}\n",
            rows.len()
        ));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, out_text)?;
    Ok(())
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Patience,
    NFix,
}

impl SweepParam {
    pub fn named(name: &str) -> Result<SweepParam> {
        match name {
            "patience" => Ok(SweepParam::Patience),
            "n_fix" | "nfix" => Ok(SweepParam::NFix),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Patience => "patience",
            SweepParam::NFix => "n_fix",
        }
    }
}

/// Run a grid of (value x seed) runs and write each run's artifacts plus a
/// comparison CSV of final scores per value.
pub fn sweep(
    base: &ScheduleConfig,
    param: SweepParam,
    values: &[u64],
    seeds: &[u64],
    root: &Path,
    out_dir: &Path,
) -> Result<()> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("sweep needs at least one value and one seed".into()));
    }
    let mut rows: Vec<(u64, u64, f64, u64)> = Vec::new(); // (value, seed, score, grad updates)
    for &value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match param {
                SweepParam::Patience => cfg.patience = u32::try_from(value).map_err(|_| {
                    Error::Config(format!("patience value {value} out of range"))
                })?,
                SweepParam::NFix => cfg.n_fix = value,
            }
            let result = run_schedule(&cfg, root)?;
            let dir = out_dir.join(format!("{}-{}-seed{}", param.name(), value, seed));
            write_run_artifacts(&dir, &cfg, &result)?;
            rows.push((value, seed, result.final_score, result.ledger.grad_updates));
        }
    }
    let mut text = String::from("param,value,seed,final_score,grad_updates\n");
    for &(value, seed, score, updates) in &rows {
        text.push_str(&format!(
            "{},{value},{seed},{score:?},{updates}\n",
            param.name()
        ));
    }
    text.push_str("\nparam,value,mean_final_score,std_final_score\n");
    for &value in values {
        let scores: Vec<f64> = rows
            .iter()
            .filter(|r| r.0 == value)
            .map(|r| r.2)
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let std = if scores.len() < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
                / (scores.len() as f64 - 1.0))
                .sqrt()
        };
        text.push_str(&format!("{},{value},{mean:?},{std:?}\n", param.name()));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("comparison.csv"), text)?;
    Ok(())
}

/// Export a binary dataset to CSV for inspection.
pub fn export_csv(dataset: &Path, out: &Path) -> Result<()> {
    let (spec, _tier, data) = load_dataset(dataset)?;
    let file = std::fs::File::create(out)?;
    let mut w = std::io::BufWriter::new(file);
    crate::envlab::export_dataset_csv(&mut w, spec, &data)?;
    w.flush()?;
    Ok(())
}
