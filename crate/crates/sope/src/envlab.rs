//! Deterministic desk-scale continuous-control environments, dataset
//! generation in three quality tiers, and random/expert return anchors for
//! score normalization.
//!
//! All dynamics are closed-form and documented here:
//!
//! - `pendulum-swingup`: torque-limited pendulum, Euler-integrated at
//!   dt = 0.05. State (theta, omega) with theta = 0 upright; the episode
//!   starts hanging down. Torque is `action * MAX_TORQUE`;
//!   `omega' = omega + (3g/(2l) sin(theta) + 3/(m l^2) u) dt` with omega
//!   clipped to +-8, `theta' = theta + omega' dt`. Reward is
//!   `-(wrap(theta)^2 + 0.1 omega^2 + 0.001 u^2)`. Observation
//!   `[cos theta, sin theta, omega]`. No terminal states; truncation at 200.
//! - `point-reacher`: double-integrator point mass on the plane.
//!   `vel' = clip(vel + action * dt, +-1)`, `pos' = pos + vel' dt`. Reward
//!   `-(|pos - goal| + 0.01 |action|^2)`. The goal is drawn uniformly from
//!   `[-0.8, 0.8]^2` at reset. Observation `[pos, vel, goal]`. Truncation
//!   at 100.
//! - `tabular-chain`: 10 discrete cells behind a 1-D continuous action
//!   interface (`action > 0` moves right, else left). Every step costs
//!   0.01; entering the last cell pays +1 and terminates. Truncation at 30.
//!   The task exists to give the OPE machinery an exact enumeration oracle.

use std::io::{Read, Write};
use std::path::Path;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::unit_f64;

pub const PENDULUM_MAX_TORQUE: f64 = 1.0;
pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_G: f64 = 10.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_EPISODE_STEPS: u32 = 200;

pub const REACHER_DT: f64 = 0.1;
pub const REACHER_MAX_SPEED: f64 = 1.0;
pub const REACHER_GOAL_RANGE: f64 = 0.8;
pub const REACHER_EPISODE_STEPS: u32 = 100;

pub const CHAIN_CELLS: usize = 10;
pub const CHAIN_STEP_COST: f64 = 0.01;
pub const CHAIN_GOAL_REWARD: f64 = 1.0;
pub const CHAIN_EPISODE_STEPS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PendulumSwingup,
    PointReacher,
    TabularChain,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PendulumSwingup => "pendulum-swingup",
            EnvKind::PointReacher => "point-reacher",
            EnvKind::TabularChain => "tabular-chain",
        }
    }
}

/// Static description of an environment: widths, bounds, episode length.
#[derive(Debug, Clone, Copy)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub max_episode_steps: u32,
}

impl EnvSpec {
    pub fn named(name: &str) -> Result<EnvSpec> {
        match name {
            "pendulum-swingup" | "pendulum" => Ok(Self::pendulum()),
            "point-reacher" | "reacher" => Ok(Self::reacher()),
            "tabular-chain" | "chain" => Ok(Self::chain()),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }

    pub fn pendulum() -> EnvSpec {
        EnvSpec {
            kind: EnvKind::PendulumSwingup,
            obs_dim: 3,
            act_dim: 1,
            max_episode_steps: PENDULUM_EPISODE_STEPS,
        }
    }

    pub fn reacher() -> EnvSpec {
        EnvSpec {
            kind: EnvKind::PointReacher,
            obs_dim: 6,
            act_dim: 2,
            max_episode_steps: REACHER_EPISODE_STEPS,
        }
    }

    pub fn chain() -> EnvSpec {
        EnvSpec {
            kind: EnvKind::TabularChain,
            obs_dim: CHAIN_CELLS,
            act_dim: 1,
            max_episode_steps: CHAIN_EPISODE_STEPS,
        }
    }
}

#[derive(Debug, Clone)]
enum PhysState {
    Pendulum { theta: f64, omega: f64 },
    Reacher { pos: [f64; 2], vel: [f64; 2], goal: [f64; 2] },
    Chain { cell: usize },
}

/// One environment step record: the atom of every buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    pub truncated: bool,
}

/// A single-owner environment state machine.
#[derive(Debug, Clone)]
pub struct Env {
    pub spec: EnvSpec,
    state: PhysState,
    elapsed: u32,
    terminal: bool,
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + std::f64::consts::PI) % (2.0 * std::f64::consts::PI);
    if t < 0.0 {
        t += 2.0 * std::f64::consts::PI;
    }
    t - std::f64::consts::PI
}

impl Env {
    /// Deterministic initial state for a given seed; elapsed steps 0.
    pub fn reset(spec: EnvSpec, seed: u64) -> (Env, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = match spec.kind {
            EnvKind::PendulumSwingup => PhysState::Pendulum {
                theta: std::f64::consts::PI + 0.1 * (2.0 * unit_f64(&mut rng) - 1.0),
                omega: 0.05 * (2.0 * unit_f64(&mut rng) - 1.0),
            },
            EnvKind::PointReacher => PhysState::Reacher {
                pos: [0.0, 0.0],
                vel: [0.0, 0.0],
                goal: [
                    REACHER_GOAL_RANGE * (2.0 * unit_f64(&mut rng) - 1.0),
                    REACHER_GOAL_RANGE * (2.0 * unit_f64(&mut rng) - 1.0),
                ],
            },
            EnvKind::TabularChain => PhysState::Chain { cell: 0 },
        };
        let env = Env {
            spec,
            state,
            elapsed: 0,
            terminal: false,
        };
        let obs = env.observation();
        (env, obs)
    }

    pub fn observation(&self) -> Vec<f64> {
        match &self.state {
            PhysState::Pendulum { theta, omega } => vec![theta.cos(), theta.sin(), *omega],
            PhysState::Reacher { pos, vel, goal } => {
                vec![pos[0], pos[1], vel[0], vel[1], goal[0], goal[1]]
            }
            PhysState::Chain { cell } => {
                let mut o = vec![0.0; CHAIN_CELLS];
                o[*cell] = 1.0;
                o
            }
        }
    }

    pub fn elapsed(&self) -> u32 {
        self.elapsed
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Advance one step. The action is clipped to `[-1, 1]` per dimension
    /// before the dynamics; the truncation flag is set exactly at the
    /// episode length limit.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if self.terminal {
            return Err(Error::Usage("stepping a terminal environment state".into()));
        }
        if action.len() != self.spec.act_dim {
            return Err(Error::Config(format!(
                "action width {} does not match environment width {}",
                action.len(),
                self.spec.act_dim
            )));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let obs = self.observation();

        let (reward, terminal) = match &mut self.state {
            PhysState::Pendulum { theta, omega } => {
                let u = a[0] * PENDULUM_MAX_TORQUE;
                let th = wrap_angle(*theta);
                let reward = -(th * th + 0.1 * *omega * *omega + 0.001 * u * u);
                let new_omega = (*omega
                    + (3.0 * PENDULUM_G / 2.0 * theta.sin() + 3.0 * u) * PENDULUM_DT)
                    .clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                *theta += new_omega * PENDULUM_DT;
                *omega = new_omega;
                (reward, false)
            }
            PhysState::Reacher { pos, vel, goal } => {
                for d in 0..2 {
                    vel[d] = (vel[d] + a[d] * REACHER_DT).clamp(-REACHER_MAX_SPEED, REACHER_MAX_SPEED);
                    pos[d] += vel[d] * REACHER_DT;
                }
                let dist = ((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt();
                let reward = -(dist + 0.01 * (a[0] * a[0] + a[1] * a[1]));
                (reward, false)
            }
            PhysState::Chain { cell } => {
                let next = if a[0] > 0.0 {
                    (*cell + 1).min(CHAIN_CELLS - 1)
                } else {
                    cell.saturating_sub(1)
                };
                let reached_goal = next == CHAIN_CELLS - 1 && *cell != CHAIN_CELLS - 1;
                *cell = next;
                let reward = -CHAIN_STEP_COST + if reached_goal { CHAIN_GOAL_REWARD } else { 0.0 };
                (reward, reached_goal)
            }
        };

        self.elapsed += 1;
        self.terminal = terminal;
        let truncated = !terminal && self.elapsed >= self.spec.max_episode_steps;
        if truncated {
            self.terminal = true; // episode over either way; a fresh reset is required
        }
        Ok(Transition {
            obs,
            action: a,
            reward,
            next_obs: self.observation(),
            terminal,
            truncated,
        })
    }
}

/// Anything that can pick actions during a rollout.
pub trait RolloutPolicy {
    fn action(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Uniform actions over `[-1, 1]` per dimension.
pub struct RandomPolicy {
    pub act_dim: usize,
}

impl RolloutPolicy for RandomPolicy {
    fn action(&mut self, _obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.act_dim)
            .map(|_| 2.0 * unit_f64(rng) - 1.0)
            .collect()
    }
}

/// Play one episode and return the undiscounted return. The episode seed
/// drives both the reset and the policy's action noise.
pub fn rollout_return(spec: EnvSpec, policy: &mut dyn RolloutPolicy, seed: u64) -> f64 {
    let (mut env, mut obs) = Env::reset(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut total = 0.0;
    loop {
        let a = policy.action(&obs, &mut rng);
        let t = env.step(&a).expect("episode stepped past its end");
        total += t.reward;
        obs = t.next_obs.clone();
        if t.terminal || t.truncated {
            return total;
        }
    }
}

/// Dataset quality tier, keyed to how far the source policy was trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetTier {
    Expert,
    Medium,
    Simple,
}

impl DatasetTier {
    pub fn name(self) -> &'static str {
        match self {
            DatasetTier::Expert => "expert",
            DatasetTier::Medium => "medium",
            DatasetTier::Simple => "simple",
        }
    }

    pub fn named(name: &str) -> Result<DatasetTier> {
        match name {
            "expert" => Ok(DatasetTier::Expert),
            "medium" => Ok(DatasetTier::Medium),
            "simple" => Ok(DatasetTier::Simple),
            other => Err(Error::Config(format!("unknown dataset tier `{other}`"))),
        }
    }

    fn code(self) -> u8 {
        match self {
            DatasetTier::Expert => 0,
            DatasetTier::Medium => 1,
            DatasetTier::Simple => 2,
        }
    }

    fn from_code(c: u8) -> Option<DatasetTier> {
        match c {
            0 => Some(DatasetTier::Expert),
            1 => Some(DatasetTier::Medium),
            2 => Some(DatasetTier::Simple),
            _ => None,
        }
    }

    /// Fraction of the expert training budget the tier's source policy saw.
    pub fn training_fraction(self) -> f64 {
        match self {
            DatasetTier::Expert => 1.0,
            DatasetTier::Medium => 0.4,
            DatasetTier::Simple => 0.1,
        }
    }
}

/// Roll out a policy until exactly `count` transitions are collected.
/// Deterministic given the seed; episode boundaries fall where they fall.
pub fn generate_dataset(
    spec: EnvSpec,
    policy: &mut dyn RolloutPolicy,
    count: usize,
    seed: u64,
) -> Vec<Transition> {
    let mut out = Vec::with_capacity(count);
    let mut episode = 0u64;
    while out.len() < count {
        let ep_seed = seed.wrapping_add(episode.wrapping_mul(0x2545f4914f6cdd1d));
        let (mut env, mut obs) = Env::reset(spec, ep_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0x9e3779b97f4a7c15);
        loop {
            let a = policy.action(&obs, &mut rng);
            let t = env.step(&a).expect("episode stepped past its end");
            let done = t.terminal || t.truncated;
            obs = t.next_obs.clone();
            out.push(t);
            if out.len() == count || done {
                break;
            }
        }
        episode += 1;
    }
    out
}

/// Mean episodic return of the transitions in a dataset, counting only
/// episodes that completed inside it.
pub fn dataset_mean_return(transitions: &[Transition]) -> f64 {
    let mut returns = Vec::new();
    let mut acc = 0.0;
    for t in transitions {
        acc += t.reward;
        if t.terminal || t.truncated {
            returns.push(acc);
            acc = 0.0;
        }
    }
    if returns.is_empty() {
        acc
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    }
}

/// Reference return levels for normalized scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreAnchors {
    pub random_return: f64,
    pub expert_return: f64,
}

/// Mean returns of the random and expert policies over `episodes` fixed
/// seeds. Bitwise reproducible for a fixed seed.
pub fn compute_anchors(
    spec: EnvSpec,
    random: &mut dyn RolloutPolicy,
    expert: &mut dyn RolloutPolicy,
    episodes: usize,
    seed: u64,
) -> Result<ScoreAnchors> {
    if episodes < 100 {
        return Err(Error::Config(format!(
            "anchor estimation needs >= 100 episodes, got {episodes}"
        )));
    }
    let mean = |policy: &mut dyn RolloutPolicy| -> f64 {
        (0..episodes)
            .map(|i| rollout_return(spec, policy, seed.wrapping_add(i as u64)))
            .sum::<f64>()
            / episodes as f64
    };
    Ok(ScoreAnchors {
        random_return: mean(random),
        expert_return: mean(expert),
    })
}

/// `100 * (ret - random) / (expert - random)`; may exceed 100 or be negative.
pub fn normalized_score(ret: f64, anchors: &ScoreAnchors) -> Result<f64> {
    let span = anchors.expert_return - anchors.random_return;
    if span == 0.0 {
        return Err(Error::Config(
            "degenerate anchors: expert return equals random return".into(),
        ));
    }
    Ok(100.0 * (ret - anchors.random_return) / span)
}

// ---------------------------------------------------------------------------
// exact enumeration oracle for the tabular chain
// ---------------------------------------------------------------------------

/// Exact quantities for the chain task, computed from the authored reward
/// and transition tables rather than by stepping [`Env`]. `p_right[c]` is
/// the probability a stationary policy moves right from cell `c`.
pub mod chain_oracle {
    use super::{CHAIN_CELLS, CHAIN_GOAL_REWARD, CHAIN_STEP_COST};

    const GOAL: usize = CHAIN_CELLS - 1;

    fn succ(cell: usize, right: bool) -> usize {
        if right {
            (cell + 1).min(GOAL)
        } else {
            cell.saturating_sub(1)
        }
    }

    fn reward(cell: usize, right: bool) -> f64 {
        let next = succ(cell, right);
        -CHAIN_STEP_COST + if next == GOAL { CHAIN_GOAL_REWARD } else { 0.0 }
    }

    /// Exact undiscounted expected return of a stationary policy from cell 0
    /// over a finite horizon, by dynamic programming over (cell, steps left).
    pub fn expected_return(p_right: &[f64; CHAIN_CELLS], horizon: u32) -> f64 {
        // v[t][c]: expected remaining return with t steps left from cell c
        let mut v = vec![0.0f64; CHAIN_CELLS];
        for _ in 0..horizon {
            let mut next = vec![0.0f64; CHAIN_CELLS];
            for c in 0..CHAIN_CELLS {
                if c == GOAL {
                    next[c] = 0.0; // absorbing
                    continue;
                }
                let p = p_right[c];
                let vr = reward(c, true) + if succ(c, true) == GOAL { 0.0 } else { v[succ(c, true)] };
                let vl = reward(c, false) + v[succ(c, false)];
                next[c] = p * vr + (1.0 - p) * vl;
            }
            v = next;
        }
        v[0]
    }

    /// Exact discounted Q^pi(cell, direction) over the infinite horizon
    /// (truncation bootstraps through; only the goal cell is absorbing).
    /// Returned as `q[cell][0 = left, 1 = right]`.
    pub fn q_pi(p_right: &[f64; CHAIN_CELLS], gamma: f64) -> Vec<[f64; 2]> {
        let mut v = vec![0.0f64; CHAIN_CELLS];
        for _ in 0..100_000 {
            let mut next = vec![0.0f64; CHAIN_CELLS];
            let mut delta = 0.0f64;
            for c in 0..CHAIN_CELLS {
                if c == GOAL {
                    continue;
                }
                let q = |right: bool| {
                    let s2 = succ(c, right);
                    reward(c, right) + if s2 == GOAL { 0.0 } else { gamma * v[s2] }
                };
                next[c] = p_right[c] * q(true) + (1.0 - p_right[c]) * q(false);
                delta = delta.max((next[c] - v[c]).abs());
            }
            v = next;
            if delta < 1e-14 {
                break;
            }
        }
        (0..CHAIN_CELLS)
            .map(|c| {
                let q = |right: bool| {
                    let s2 = succ(c, right);
                    reward(c, right) + if s2 == GOAL { 0.0 } else { gamma * v[s2] }
                };
                [q(false), q(true)]
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// dataset serialization
// ---------------------------------------------------------------------------

/// Magic bytes of the columnar binary dataset format.
pub const DATASET_MAGIC: &[u8; 5] = b"SOPD1";

/// Write a dataset: header (magic, env name, tier, count, obs/action
/// widths), then contiguous 64-bit little-endian arrays per column
/// (s, a, r, s', terminal, truncated). Flags are stored as 0.0/1.0.
pub fn write_dataset<W: Write>(
    w: &mut W,
    spec: EnvSpec,
    tier: DatasetTier,
    transitions: &[Transition],
) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    let name = spec.kind.name().as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&[tier.code()])?;
    w.write_all(&(transitions.len() as u64).to_le_bytes())?;
    w.write_all(&(spec.obs_dim as u32).to_le_bytes())?;
    w.write_all(&(spec.act_dim as u32).to_le_bytes())?;

    let mut col = |f: &mut dyn FnMut(&Transition, &mut Vec<u8>)| -> Result<()> {
        let mut buf = Vec::new();
        for t in transitions {
            f(t, &mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    };
    let push = |buf: &mut Vec<u8>, v: f64| buf.extend_from_slice(&v.to_le_bytes());
    col(&mut |t, b| t.obs.iter().for_each(|&v| push(b, v)))?;
    col(&mut |t, b| t.action.iter().for_each(|&v| push(b, v)))?;
    col(&mut |t, b| push(b, t.reward))?;
    col(&mut |t, b| t.next_obs.iter().for_each(|&v| push(b, v)))?;
    col(&mut |t, b| push(b, t.terminal as u8 as f64))?;
    col(&mut |t, b| push(b, t.truncated as u8 as f64))?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset<R: Read>(
    r: &mut R,
    path: &Path,
) -> Result<(EnvSpec, DatasetTier, Vec<Transition>)> {
    use crate::numerics::{read_f64, read_u32, read_u64};
    let mut offset = 0u64;
    let fmt = |message: &str, offset: u64| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
        offset,
    };

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| fmt("unexpected end of file", 0))?;
    offset += 5;
    if &magic != DATASET_MAGIC {
        return Err(fmt("bad magic bytes", 0));
    }
    let name_len = read_u32(r, &mut offset, path)? as usize;
    if name_len > 256 {
        return Err(fmt("implausible environment name length", offset - 4));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|_| fmt("unexpected end of file", offset))?;
    offset += name_len as u64;
    let name = String::from_utf8(name).map_err(|_| fmt("environment name not UTF-8", offset))?;
    let spec = EnvSpec::named(&name)?;

    let mut tier_byte = [0u8; 1];
    r.read_exact(&mut tier_byte)
        .map_err(|_| fmt("unexpected end of file", offset))?;
    offset += 1;
    let tier =
        DatasetTier::from_code(tier_byte[0]).ok_or_else(|| fmt("unknown tier code", offset - 1))?;
    let count = read_u64(r, &mut offset, path)? as usize;
    let obs_dim = read_u32(r, &mut offset, path)? as usize;
    let act_dim = read_u32(r, &mut offset, path)? as usize;
    if obs_dim != spec.obs_dim || act_dim != spec.act_dim {
        return Err(fmt("widths do not match the named environment", offset - 8));
    }

    let mut transitions = vec![
        Transition {
            obs: vec![0.0; obs_dim],
            action: vec![0.0; act_dim],
            reward: 0.0,
            next_obs: vec![0.0; obs_dim],
            terminal: false,
            truncated: false,
        };
        count
    ];
    for t in transitions.iter_mut() {
        for v in t.obs.iter_mut() {
            *v = read_f64(r, &mut offset, path)?;
        }
    }
    for t in transitions.iter_mut() {
        for v in t.action.iter_mut() {
            *v = read_f64(r, &mut offset, path)?;
        }
    }
    for t in transitions.iter_mut() {
        t.reward = read_f64(r, &mut offset, path)?;
    }
    for t in transitions.iter_mut() {
        for v in t.next_obs.iter_mut() {
            *v = read_f64(r, &mut offset, path)?;
        }
    }
    for t in transitions.iter_mut() {
        t.terminal = read_f64(r, &mut offset, path)? != 0.0;
    }
    for t in transitions.iter_mut() {
        t.truncated = read_f64(r, &mut offset, path)? != 0.0;
    }
    Ok((spec, tier, transitions))
}

pub fn save_dataset(
    path: &Path,
    spec: EnvSpec,
    tier: DatasetTier,
    transitions: &[Transition],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut f, spec, tier, transitions)
}

pub fn load_dataset(path: &Path) -> Result<(EnvSpec, DatasetTier, Vec<Transition>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Dependency(format!(
                "dataset {} not found; run `sope gen-data` first",
                path.display()
            ))
        } else {
            Error::Io(e)
        }
    })?);
    read_dataset(&mut f, path)
}

/// Export a dataset to CSV for inspection.
pub fn export_dataset_csv<W: Write>(w: &mut W, spec: EnvSpec, transitions: &[Transition]) -> Result<()> {
    let mut header = Vec::new();
    for i in 0..spec.obs_dim {
        header.push(format!("s{i}"));
    }
    for i in 0..spec.act_dim {
        header.push(format!("a{i}"));
    }
    header.push("r".into());
    for i in 0..spec.obs_dim {
        header.push(format!("sp{i}"));
    }
    header.push("terminal".into());
    header.push("truncated".into());
    writeln!(w, "{}", header.join(","))?;
    for t in transitions {
        let mut row: Vec<String> = Vec::new();
        row.extend(t.obs.iter().map(|v| v.to_string()));
        row.extend(t.action.iter().map(|v| v.to_string()));
        row.push(t.reward.to_string());
        row.extend(t.next_obs.iter().map(|v| v.to_string()));
        row.push((t.terminal as u8).to_string());
        row.push((t.truncated as u8).to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Anchors persist as a two-line key=value text file.
pub fn save_anchors(path: &Path, anchors: &ScoreAnchors) -> Result<()> {
    std::fs::write(
        path,
        format!(
            "random_return={:?}\nexpert_return={:?}\n",
            anchors.random_return, anchors.expert_return
        ),
    )?;
    Ok(())
}

pub fn load_anchors(path: &Path) -> Result<ScoreAnchors> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Dependency(format!(
                "anchors {} not found; run `sope bootstrap` first",
                path.display()
            ))
        } else {
            Error::Io(e)
        }
    })?;
    let mut random = None;
    let mut expert = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad anchor value `{v}`")))?;
            match k.trim() {
                "random_return" => random = Some(v),
                "expert_return" => expert = Some(v),
                _ => {}
            }
        }
    }
    match (random, expert) {
        (Some(r), Some(e)) => Ok(ScoreAnchors {
            random_return: r,
            expert_return: e,
        }),
        _ => Err(Error::Config(format!(
            "anchors file {} is missing keys",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pendulum_reset_is_seed_deterministic() {
        let (_, o1) = Env::reset(EnvSpec::pendulum(), 7);
        let (_, o2) = Env::reset(EnvSpec::pendulum(), 7);
        assert_eq!(o1, o2);
        let (_, o3) = Env::reset(EnvSpec::pendulum(), 8);
        assert_ne!(o1, o3);
    }

    #[test]
    fn chain_starts_at_cell_zero() {
        for seed in [0, 1, 99] {
            let (_, obs) = Env::reset(EnvSpec::chain(), seed);
            assert_eq!(obs[0], 1.0);
            assert_eq!(obs.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn reacher_goal_inside_workspace() {
        let (_, obs) = Env::reset(EnvSpec::reacher(), 3);
        assert!(obs[4].abs() <= REACHER_GOAL_RANGE && obs[5].abs() <= REACHER_GOAL_RANGE);
    }

    #[test]
    fn pendulum_upright_rest_zero_torque_max_reward() {
        let (mut env, _) = Env::reset(EnvSpec::pendulum(), 0);
        // force the fixed point
        env.state = PhysState::Pendulum { theta: 0.0, omega: 0.0 };
        let t = env.step(&[0.0]).unwrap();
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn reacher_at_goal_zero_action_reward() {
        let (mut env, _) = Env::reset(EnvSpec::reacher(), 5);
        env.state = PhysState::Reacher {
            pos: [0.3, -0.2],
            vel: [0.0, 0.0],
            goal: [0.3, -0.2],
        };
        let t = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn chain_step_right_from_zero() {
        let (mut env, _) = Env::reset(EnvSpec::chain(), 0);
        let t = env.step(&[0.7]).unwrap();
        assert_eq!(t.next_obs[1], 1.0);
        assert_eq!(t.reward, -CHAIN_STEP_COST);
        assert!(!t.terminal);
    }

    #[test]
    fn chain_reaching_goal_terminates() {
        let (mut env, _) = Env::reset(EnvSpec::chain(), 0);
        let mut last = None;
        for _ in 0..9 {
            last = Some(env.step(&[1.0]).unwrap());
        }
        let t = last.unwrap();
        assert!(t.terminal);
        assert!((t.reward - (CHAIN_GOAL_REWARD - CHAIN_STEP_COST)).abs() < 1e-12);
        assert!(env.step(&[1.0]).is_err());
    }

    #[test]
    fn truncation_set_exactly_at_episode_limit() {
        let (mut env, _) = Env::reset(EnvSpec::pendulum(), 1);
        for i in 1..=PENDULUM_EPISODE_STEPS {
            let t = env.step(&[0.0]).unwrap();
            assert_eq!(t.truncated, i == PENDULUM_EPISODE_STEPS);
        }
    }

    #[test]
    fn dynamics_determinism() {
        let run = || {
            let (mut env, _) = Env::reset(EnvSpec::pendulum(), 42);
            let mut out = Vec::new();
            for i in 0..50 {
                let a = [((i as f64) * 0.37).sin()];
                out.push(env.step(&a).unwrap());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_request_is_fine() {
        let mut p = RandomPolicy { act_dim: 1 };
        let d = generate_dataset(EnvSpec::pendulum(), &mut p, 0, 0);
        assert!(d.is_empty());
    }

    #[test]
    fn random_chain_anchor_matches_enumeration() {
        // empirical mean return of the uniform-random policy vs exact DP
        let exact = chain_oracle::expected_return(&[0.5; CHAIN_CELLS], CHAIN_EPISODE_STEPS);
        let mut p = RandomPolicy { act_dim: 1 };
        let n = 100_000usize;
        let returns: Vec<f64> = (0..n)
            .map(|i| rollout_return(EnvSpec::chain(), &mut p, i as u64))
            .collect();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "empirical {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn chain_q_pi_fixed_points() {
        // always-right policy: closed-form discounted value
        let q = chain_oracle::q_pi(&[1.0; CHAIN_CELLS], 0.9);
        // from cell 8, going right: immediate r = 0.99, done
        assert!((q[8][1] - 0.99).abs() < 1e-10);
        // from cell 7: -0.01 + 0.9*0.99
        assert!((q[7][1] - (-0.01 + 0.9 * 0.99)).abs() < 1e-10);
    }

    #[test]
    fn normalized_score_linearity() {
        let a = ScoreAnchors {
            random_return: -100.0,
            expert_return: 100.0,
        };
        assert_eq!(normalized_score(-100.0, &a).unwrap(), 0.0);
        assert_eq!(normalized_score(100.0, &a).unwrap(), 100.0);
        assert_eq!(normalized_score(0.0, &a).unwrap(), 50.0);
        let degenerate = ScoreAnchors {
            random_return: 1.0,
            expert_return: 1.0,
        };
        assert!(normalized_score(0.5, &degenerate).is_err());
    }

    #[test]
    fn dataset_round_trip_bitwise() {
        let mut p = RandomPolicy { act_dim: 1 };
        let d = generate_dataset(EnvSpec::pendulum(), &mut p, 500, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pendulum-expert.sopd");
        save_dataset(&path, EnvSpec::pendulum(), DatasetTier::Expert, &d).unwrap();
        let (spec, tier, d2) = load_dataset(&path).unwrap();
        assert_eq!(spec.kind, EnvKind::PendulumSwingup);
        assert_eq!(tier, DatasetTier::Expert);
        assert_eq!(d, d2);
    }

    #[test]
    fn dataset_corruption_reports_offset() {
        let mut buf = Vec::new();
        let mut p = RandomPolicy { act_dim: 1 };
        let d = generate_dataset(EnvSpec::chain(), &mut p, 10, 0);
        write_dataset(&mut buf, EnvSpec::chain(), DatasetTier::Simple, &d).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_dataset(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn anchors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchors.txt");
        let a = ScoreAnchors {
            random_return: -1234.567891011,
            expert_return: -89.000000000123,
        };
        save_anchors(&path, &a).unwrap();
        assert_eq!(load_anchors(&path).unwrap(), a);
    }
}
