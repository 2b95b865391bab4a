//! Soft actor-critic learner with a configurable critic ensemble.
//!
//! TD targets bootstrap through a random subset of target critics
//! (`y = r + gamma * (min over Z of Q'(s', a') - alpha * log pi)`), actions
//! come from a tanh-squashed Gaussian with the exact squash correction in
//! the log-probability, and the entropy temperature follows the usual dual
//! ascent toward a target entropy of `-act_dim`. Two configuration profiles
//! share this code path: a twin-critic profile with light dropout and layer
//! norm, and an ensemble profile (E=10, subset-min, no dropout).

use std::io::{Read, Write};
use std::path::Path;

use rand::RngCore;

use crate::envlab::{RolloutPolicy, Transition};
use crate::error::{Error, Result};
use crate::numerics::{
    self, adam_step, backward_batch, forward_batch, soft_update, Activation, AdamConfig,
    AdamState, LayerSpec, MlpParams, Mode,
};

use crate::numerics::unit_f64;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.8378770664093453;

/// Learner configuration; see [`AgentConfig::sope_profile`] and
/// [`AgentConfig::rlpd_lite_profile`] for the two standard presets.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub ensemble_size: usize,
    pub target_subset: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    /// Dropout keep-probability for critic training passes; 1.0 disables.
    pub dropout_keep: f64,
    pub layer_norm: bool,
    /// Include the `-alpha * log pi` bonus inside the TD target.
    pub entropy_in_target: bool,
    pub init_log_alpha: f64,
    pub target_entropy: f64,
}

impl AgentConfig {
    /// Twin critics with light dropout and layer norm.
    pub fn sope_profile(obs_dim: usize, act_dim: usize) -> AgentConfig {
        AgentConfig {
            obs_dim,
            act_dim,
            hidden: vec![256, 256],
            ensemble_size: 2,
            target_subset: 2,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            dropout_keep: 0.99,
            layer_norm: true,
            entropy_in_target: true,
            init_log_alpha: 0.0,
            target_entropy: -(act_dim as f64),
        }
    }

    /// Ensemble profile: ten critics, subset-min targets, no dropout.
    pub fn rlpd_lite_profile(obs_dim: usize, act_dim: usize) -> AgentConfig {
        AgentConfig {
            ensemble_size: 10,
            dropout_keep: 1.0,
            ..Self::sope_profile(obs_dim, act_dim)
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::Config("ensemble size must be >= 2".into()));
        }
        if self.target_subset < 2 || self.target_subset > self.ensemble_size {
            return Err(Error::Config(format!(
                "target subset {} outside 2..={}",
                self.target_subset, self.ensemble_size
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0,1]", self.tau)));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config("dropout keep-probability outside (0,1]".into()));
        }
        Ok(())
    }

    fn actor_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut prev = self.obs_dim;
        for &h in &self.hidden {
            specs.push(LayerSpec {
                in_dim: prev,
                out_dim: h,
                activation: Activation::Relu,
                layer_norm: false,
            });
            prev = h;
        }
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: 2 * self.act_dim,
            activation: Activation::Identity,
            layer_norm: false,
        });
        specs
    }

    fn critic_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut prev = self.obs_dim + self.act_dim;
        for &h in &self.hidden {
            specs.push(LayerSpec {
                in_dim: prev,
                out_dim: h,
                activation: Activation::Relu,
                layer_norm: self.layer_norm,
            });
            prev = h;
        }
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: 1,
            activation: Activation::Identity,
            layer_norm: false,
        });
        specs
    }
}

/// One action draw: pre-squash Gaussian value, squashed action, and the
/// squash-corrected log-probability (stochastic mode only).
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub pre_squash: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: Option<f64>,
}

/// What one gradient update did: losses, target statistics, and the exact
/// dense-FLOP cost of the passes executed.
#[derive(Debug, Clone, Default)]
pub struct UpdateReport {
    pub critic_losses: Vec<f64>,
    pub actor_loss: Option<f64>,
    pub temperature_loss: Option<f64>,
    pub mean_td_target: Option<f64>,
    pub mean_log_prob: Option<f64>,
    pub grad_updates: u64,
    pub flops: u64,
}

/// Soft actor-critic agent: actor, critic ensemble, target ensemble,
/// entropy temperature, and per-network optimizer state.
#[derive(Clone)]
pub struct SacAgent {
    pub config: AgentConfig,
    pub actor: MlpParams,
    pub critics: Vec<MlpParams>,
    pub targets: Vec<MlpParams>,
    pub log_alpha: f64,
    actor_opt: AdamState,
    critic_opts: Vec<AdamState>,
    alpha_opt: (f64, f64, u64), // scalar Adam (m, v, step)
}

impl SacAgent {
    pub fn new(config: AgentConfig, rng: &mut dyn RngCore) -> Result<SacAgent> {
        config.validate()?;
        let actor = MlpParams::init(&config.actor_specs(), rng)?;
        let critics: Vec<MlpParams> = (0..config.ensemble_size)
            .map(|_| MlpParams::init(&config.critic_specs(), rng))
            .collect::<Result<_>>()?;
        let targets = critics.clone();
        let actor_opt = AdamState::new(&actor, AdamConfig::with_lr(config.actor_lr));
        let critic_opts = critics
            .iter()
            .map(|c| AdamState::new(c, AdamConfig::with_lr(config.critic_lr)))
            .collect();
        Ok(SacAgent {
            log_alpha: config.init_log_alpha,
            config,
            actor,
            critics,
            targets,
            actor_opt,
            critic_opts,
            alpha_opt: (0.0, 0.0, 0),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Combined checksum over actor parameters and the temperature, for
    /// actor-freeze assertions.
    pub fn actor_checksum(&self) -> u64 {
        self.actor.checksum() ^ self.log_alpha.to_bits().rotate_left(17)
    }

    fn actor_heads(&self, obs: &[f64], n: usize) -> Result<(Vec<f64>, numerics::Tape)> {
        let (out, tape) = forward_batch(&self.actor, obs, n, Mode::Eval)?;
        Ok((out, tape))
    }

    /// Draw one action per observation row. Returns per-sample actions,
    /// log-probabilities, and the intermediates needed for reparameterized
    /// gradients.
    fn sample_batch(
        &self,
        obs: &[f64],
        n: usize,
        deterministic: bool,
        rng: &mut dyn RngCore,
    ) -> Result<SampledActions> {
        let act_dim = self.config.act_dim;
        let (heads, tape) = self.actor_heads(obs, n)?;
        let mut eps = vec![0.0; n * act_dim];
        if !deterministic {
            for e in eps.iter_mut() {
                *e = standard_normal(rng);
            }
        }
        let mut mean = vec![0.0; n * act_dim];
        let mut log_std = vec![0.0; n * act_dim];
        let mut clamp_pass = vec![true; n * act_dim];
        let mut action = vec![0.0; n * act_dim];
        let mut log_prob = vec![0.0; n];
        for s in 0..n {
            for j in 0..act_dim {
                let k = s * act_dim + j;
                let m = heads[s * 2 * act_dim + j];
                let raw_t = heads[s * 2 * act_dim + act_dim + j];
                let t = raw_t.clamp(LOG_STD_MIN, LOG_STD_MAX);
                clamp_pass[k] = (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_t);
                let std = t.exp();
                let pre = m + std * eps[k];
                let a = pre.tanh();
                mean[k] = m;
                log_std[k] = t;
                action[k] = if deterministic { m.tanh() } else { a };
                if !deterministic {
                    log_prob[s] += -0.5 * eps[k] * eps[k]
                        - t
                        - 0.5 * LN_2PI
                        - (1.0 - a * a + SQUASH_EPS).ln();
                }
                if !action[k].is_finite() {
                    return Err(Error::Numeric("non-finite action from actor".into()));
                }
            }
        }
        Ok(SampledActions {
            n,
            action,
            log_prob,
            mean,
            log_std,
            eps,
            clamp_pass,
            tape,
        })
    }

    /// Sample one action for a single observation.
    pub fn sample_action(
        &self,
        obs: &[f64],
        deterministic: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ActionSample> {
        let s = self.sample_batch(obs, 1, deterministic, rng)?;
        let pre: Vec<f64> = (0..self.config.act_dim)
            .map(|j| s.mean[j] + s.log_std[j].exp() * s.eps[j])
            .collect();
        Ok(ActionSample {
            pre_squash: pre,
            action: s.action,
            log_prob: (!deterministic).then_some(s.log_prob[0]),
        })
    }

    /// Analytic log-density of a squashed action under the current policy,
    /// summed over dimensions. Used by density checks.
    pub fn action_log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let (heads, _) = self.actor_heads(obs, 1)?;
        let act_dim = self.config.act_dim;
        let mut lp = 0.0;
        for j in 0..act_dim {
            let a = action[j].clamp(-1.0 + 1e-12, 1.0 - 1e-12);
            let m = heads[j];
            let t = heads[act_dim + j].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let std = t.exp();
            let pre = a.atanh();
            let z = (pre - m) / std;
            lp += -0.5 * z * z - t - 0.5 * LN_2PI - (1.0 - a * a + SQUASH_EPS).ln();
        }
        Ok(lp)
    }

    fn critic_inputs(&self, obs: &[f64], actions: &[f64], n: usize) -> Vec<f64> {
        let (od, ad) = (self.config.obs_dim, self.config.act_dim);
        let mut x = vec![0.0; n * (od + ad)];
        for s in 0..n {
            x[s * (od + ad)..s * (od + ad) + od].copy_from_slice(&obs[s * od..(s + 1) * od]);
            x[s * (od + ad) + od..(s + 1) * (od + ad)]
                .copy_from_slice(&actions[s * ad..(s + 1) * ad]);
        }
        x
    }

    fn stack_obs(batch: &[&Transition], next: bool) -> Vec<f64> {
        let mut v = Vec::with_capacity(batch.len() * batch[0].obs.len());
        for t in batch {
            v.extend_from_slice(if next { &t.next_obs } else { &t.obs });
        }
        v
    }

    /// Draw a fresh random subset Z of target-critic indices.
    fn draw_subset(&self, rng: &mut dyn RngCore) -> Vec<usize> {
        let e = self.config.ensemble_size;
        let z = self.config.target_subset;
        let mut idx: Vec<usize> = (0..e).collect();
        for i in 0..z {
            let j = i + ((unit_f64(rng) * (e - i) as f64) as usize).min(e - i - 1);
            idx.swap(i, j);
        }
        idx.truncate(z);
        idx
    }

    /// Bootstrapped regression targets
    /// `y = r + gamma*(1-terminal)*(min_Z Q'(s',a') - alpha*log pi(a'|s'))`.
    /// Truncation does not zero the bootstrap.
    pub fn td_target(&self, batch: &[&Transition], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let n = batch.len();
        let next_obs = Self::stack_obs(batch, true);
        let sampled = self.sample_batch(&next_obs, n, false, rng)?;
        let subset = self.draw_subset(rng);
        let x = self.critic_inputs(&next_obs, &sampled.action, n);
        let mut min_q = vec![f64::INFINITY; n];
        for &i in &subset {
            let (q, _) = forward_batch(&self.targets[i], &x, n, Mode::Eval)?;
            for s in 0..n {
                min_q[s] = min_q[s].min(q[s]);
            }
        }
        let alpha = self.alpha();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(s, t)| {
                let mut boot = min_q[s];
                if self.config.entropy_in_target {
                    boot -= alpha * sampled.log_prob[s];
                }
                t.reward + self.config.gamma * if t.terminal { 0.0 } else { boot }
            })
            .collect())
    }

    /// Dense FLOPs of one critic update on a batch of `n`.
    pub fn flops_critic_update(&self, n: usize) -> u64 {
        let a = self.actor.forward_flops_per_sample();
        let c = self.critics[0].forward_flops_per_sample();
        let e = self.config.ensemble_size as u64;
        let z = self.config.target_subset as u64;
        (n as u64) * (a + z * c + 3 * e * c)
    }

    /// Dense FLOPs of one actor + temperature update on a batch of `n`.
    pub fn flops_actor_update(&self, n: usize) -> u64 {
        let a = self.actor.forward_flops_per_sample();
        let c = self.critics[0].forward_flops_per_sample();
        let e = self.config.ensemble_size as u64;
        (n as u64) * (3 * a + 3 * e * c)
    }

    /// One gradient step on every ensemble member toward the shared TD
    /// target. Live critics change; targets, actor, and temperature do not.
    pub fn critic_update(
        &mut self,
        batch: &[&Transition],
        rng: &mut dyn RngCore,
    ) -> Result<UpdateReport> {
        let n = batch.len();
        let y = self.td_target(batch, rng)?;
        let obs = Self::stack_obs(batch, false);
        let actions: Vec<f64> = batch.iter().flat_map(|t| t.action.iter().copied()).collect();
        let x = self.critic_inputs(&obs, &actions, n);

        let mut losses = Vec::with_capacity(self.critics.len());
        for i in 0..self.critics.len() {
            let mode = if self.config.dropout_keep < 1.0 {
                Mode::Train {
                    keep_prob: self.config.dropout_keep,
                    rng,
                }
            } else {
                Mode::Eval
            };
            let (q, tape) = forward_batch(&self.critics[i], &x, n, mode)?;
            let mut loss = 0.0;
            let upstream: Vec<f64> = q
                .iter()
                .zip(&y)
                .map(|(qi, yi)| {
                    let d = qi - yi;
                    loss += d * d;
                    2.0 * d / n as f64
                })
                .collect();
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite critic loss {loss}")));
            }
            losses.push(loss);
            let (grads, _) = backward_batch(&self.critics[i], &tape, &upstream)?;
            adam_step(&mut self.critics[i], &grads, &mut self.critic_opts[i])?;
        }
        let mean_y = y.iter().sum::<f64>() / n as f64;
        Ok(UpdateReport {
            critic_losses: losses,
            mean_td_target: Some(mean_y),
            grad_updates: 1,
            flops: self.flops_critic_update(n),
            ..Default::default()
        })
    }

    /// Reparameterized actor loss `mean(alpha*log pi - min_E Q(s, a))` and
    /// its gradient with respect to the actor parameters. Split out from
    /// [`SacAgent::actor_and_temperature_update`] so tests can check the
    /// gradient against finite differences of the same loss.
    pub(crate) fn actor_loss_grad(
        &self,
        batch: &[&Transition],
        rng: &mut dyn RngCore,
    ) -> Result<(f64, crate::numerics::GradientBuffer, f64)> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let n = batch.len();
        let (od, ad) = (self.config.obs_dim, self.config.act_dim);
        let obs = Self::stack_obs(batch, false);
        let sampled = self.sample_batch(&obs, n, false, rng)?;

        // min over the full live ensemble, tracking the argmin member per
        // sample so the action gradient is routed through it
        let x = self.critic_inputs(&obs, &sampled.action, n);
        let mut member_q: Vec<Vec<f64>> = Vec::with_capacity(self.critics.len());
        let mut tapes = Vec::with_capacity(self.critics.len());
        for critic in &self.critics {
            let (q, tape) = forward_batch(critic, &x, n, Mode::Eval)?;
            member_q.push(q);
            tapes.push(tape);
        }
        let mut argmin = vec![0usize; n];
        let mut min_q = member_q[0].clone();
        for (i, q) in member_q.iter().enumerate().skip(1) {
            for s in 0..n {
                if q[s] < min_q[s] {
                    min_q[s] = q[s];
                    argmin[s] = i;
                }
            }
        }

        // dQ/da via input gradients of each member, masked to its argmin rows
        let mut dq_da = vec![0.0; n * ad];
        for (i, tape) in tapes.iter().enumerate() {
            let upstream: Vec<f64> = (0..n)
                .map(|s| if argmin[s] == i { 1.0 } else { 0.0 })
                .collect();
            let (_, dx) = backward_batch(&self.critics[i], tape, &upstream)?;
            for s in 0..n {
                if argmin[s] == i {
                    for j in 0..ad {
                        dq_da[s * ad + j] = dx[s * (od + ad) + od + j];
                    }
                }
            }
        }

        let alpha = self.alpha();
        // upstream on the actor heads: d(loss)/d(mean), d(loss)/d(raw log-std)
        let mut upstream = vec![0.0; n * 2 * ad];
        let mut actor_loss = 0.0;
        for s in 0..n {
            actor_loss += alpha * sampled.log_prob[s] - min_q[s];
            for j in 0..ad {
                let k = s * ad + j;
                let std = sampled.log_std[k].exp();
                let pre = sampled.mean[k] + std * sampled.eps[k];
                let a = pre.tanh();
                let one_minus_a2 = 1.0 - a * a;
                let da_dm = one_minus_a2;
                let da_dt = one_minus_a2 * std * sampled.eps[k];
                let dlogp_da_common = 2.0 * a / (one_minus_a2 + SQUASH_EPS);
                let dlogp_dm = dlogp_da_common * da_dm;
                let dlogp_dt = -1.0 + dlogp_da_common * da_dt;
                let scale = 1.0 / n as f64;
                let dm = scale * (alpha * dlogp_dm - dq_da[k] * da_dm);
                let mut dt = scale * (alpha * dlogp_dt - dq_da[k] * da_dt);
                if !sampled.clamp_pass[k] {
                    dt = 0.0;
                }
                upstream[s * 2 * ad + j] = dm;
                upstream[s * 2 * ad + ad + j] = dt;
            }
        }
        actor_loss /= n as f64;
        if !actor_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite actor loss {actor_loss}")));
        }
        let (grads, _) = backward_batch(&self.actor, &sampled.tape, &upstream)?;
        let mean_logp = sampled.log_prob.iter().sum::<f64>() / n as f64;
        Ok((actor_loss, grads, mean_logp))
    }

    /// One reparameterized actor step against the full-ensemble minimum,
    /// plus one temperature step toward the target entropy. Critics and
    /// targets are unchanged by this call.
    pub fn actor_and_temperature_update(
        &mut self,
        batch: &[&Transition],
        rng: &mut dyn RngCore,
    ) -> Result<UpdateReport> {
        let n = batch.len().max(1);
        let (actor_loss, grads, mean_logp) = self.actor_loss_grad(batch, rng)?;
        adam_step(&mut self.actor, &grads, &mut self.actor_opt)?;

        // temperature: descend -log_alpha * (mean log pi + target entropy)
        let temp_loss = -self.log_alpha * (mean_logp + self.config.target_entropy);
        let temp_grad = -(mean_logp + self.config.target_entropy);
        scalar_adam(
            &mut self.log_alpha,
            temp_grad,
            &mut self.alpha_opt,
            self.config.alpha_lr,
        );

        Ok(UpdateReport {
            actor_loss: Some(actor_loss),
            temperature_loss: Some(temp_loss),
            mean_log_prob: Some(mean_logp),
            grad_updates: 1,
            flops: self.flops_actor_update(n),
            ..Default::default()
        })
    }

    /// `target <- tau*live + (1-tau)*target`, elementwise, every member.
    pub fn target_soft_update(&mut self) -> Result<()> {
        for (t, c) in self.targets.iter_mut().zip(&self.critics) {
            soft_update(t, c, self.config.tau)?;
        }
        Ok(())
    }
}

struct SampledActions {
    #[allow(dead_code)]
    n: usize,
    action: Vec<f64>,
    log_prob: Vec<f64>,
    mean: Vec<f64>,
    log_std: Vec<f64>,
    eps: Vec<f64>,
    clamp_pass: Vec<bool>,
    tape: numerics::Tape,
}

fn scalar_adam(param: &mut f64, grad: f64, state: &mut (f64, f64, u64), lr: f64) {
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    state.2 += 1;
    state.0 = beta1 * state.0 + (1.0 - beta1) * grad;
    state.1 = beta2 * state.1 + (1.0 - beta2) * grad * grad;
    let mhat = state.0 / (1.0 - beta1.powi(state.2 as i32));
    let vhat = state.1 / (1.0 - beta2.powi(state.2 as i32));
    *param -= lr * mhat / (vhat.sqrt() + eps);
}

/// Box-Muller standard normal from the shared 53-bit uniform source.
fn standard_normal(rng: &mut dyn RngCore) -> f64 {
    let u1 = 1.0 - unit_f64(rng); // (0, 1]
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Rollout adapter: stochastic action sampling from the agent's policy.
pub struct StochasticActor<'a>(pub &'a SacAgent);

impl RolloutPolicy for StochasticActor<'_> {
    fn action(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.0
            .sample_action(obs, false, rng)
            .expect("actor produced non-finite action")
            .action
    }
}

/// Rollout adapter: deterministic (squashed-mean) actions.
pub struct DeterministicActor<'a>(pub &'a SacAgent);

impl RolloutPolicy for DeterministicActor<'_> {
    fn action(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let _ = rng;
        self.0
            .sample_action(obs, true, &mut NullRng)
            .expect("actor produced non-finite action")
            .action
    }
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
// agent checkpoints
// ---------------------------------------------------------------------------

pub const AGENT_MAGIC: &[u8; 5] = b"SOPA1";

fn write_adam<W: Write>(w: &mut W, st: &AdamState) -> Result<()> {
    w.write_all(&st.step.to_le_bytes())?;
    for slice in st.m.iter().chain(st.v.iter()) {
        for v in slice {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_adam<R: Read>(r: &mut R, params: &MlpParams, lr: f64, path: &Path) -> Result<AdamState> {
    let mut offset = 0u64;
    let mut st = AdamState::new(params, AdamConfig::with_lr(lr));
    st.step = numerics::read_u64(r, &mut offset, path)?;
    for slice in st.m.iter_mut().chain(st.v.iter_mut()) {
        for v in slice.iter_mut() {
            *v = numerics::read_f64(r, &mut offset, path)?;
        }
    }
    Ok(st)
}

/// Save the full agent: header (E, |Z|, gamma, tau, log alpha, ...) followed
/// by each network in the flat checkpoint format with its optimizer state.
pub fn save_agent(path: &Path, agent: &SacAgent) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let c = &agent.config;
    w.write_all(AGENT_MAGIC)?;
    w.write_all(&(c.obs_dim as u32).to_le_bytes())?;
    w.write_all(&(c.act_dim as u32).to_le_bytes())?;
    w.write_all(&(c.ensemble_size as u32).to_le_bytes())?;
    w.write_all(&(c.target_subset as u32).to_le_bytes())?;
    for v in [
        c.gamma,
        c.tau,
        c.actor_lr,
        c.critic_lr,
        c.alpha_lr,
        c.dropout_keep,
        c.target_entropy,
        agent.log_alpha,
        agent.alpha_opt.0,
        agent.alpha_opt.1,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&agent.alpha_opt.2.to_le_bytes())?;
    w.write_all(&[c.entropy_in_target as u8, c.layer_norm as u8])?;
    w.write_all(&(c.hidden.len() as u32).to_le_bytes())?;
    for &h in &c.hidden {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    numerics::write_mlp(&mut w, &agent.actor)?;
    write_adam(&mut w, &agent.actor_opt)?;
    for (critic, opt) in agent.critics.iter().zip(&agent.critic_opts) {
        numerics::write_mlp(&mut w, critic)?;
        write_adam(&mut w, opt)?;
    }
    for target in &agent.targets {
        numerics::write_mlp(&mut w, target)?;
    }
    Ok(())
}

/// Load an agent saved by [`save_agent`].
pub fn load_agent(path: &Path) -> Result<SacAgent> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Dependency(format!(
                "checkpoint {} not found; run `sope bootstrap` first",
                path.display()
            ))
        } else {
            Error::Io(e)
        }
    })?);
    let mut offset = 0u64;
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: "unexpected end of file".into(),
        offset: 0,
    })?;
    offset += 5;
    if &magic != AGENT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "bad magic bytes".into(),
            offset: 0,
        });
    }
    let obs_dim = numerics::read_u32(&mut r, &mut offset, path)? as usize;
    let act_dim = numerics::read_u32(&mut r, &mut offset, path)? as usize;
    let ensemble_size = numerics::read_u32(&mut r, &mut offset, path)? as usize;
    let target_subset = numerics::read_u32(&mut r, &mut offset, path)? as usize;
    let mut f = [0.0f64; 10];
    for v in f.iter_mut() {
        *v = numerics::read_f64(&mut r, &mut offset, path)?;
    }
    let alpha_step = numerics::read_u64(&mut r, &mut offset, path)?;
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags)?;
    offset += 2;
    let n_hidden = numerics::read_u32(&mut r, &mut offset, path)? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(numerics::read_u32(&mut r, &mut offset, path)? as usize);
    }
    let config = AgentConfig {
        obs_dim,
        act_dim,
        hidden,
        ensemble_size,
        target_subset,
        gamma: f[0],
        tau: f[1],
        actor_lr: f[2],
        critic_lr: f[3],
        alpha_lr: f[4],
        dropout_keep: f[5],
        layer_norm: flags[1] != 0,
        entropy_in_target: flags[0] != 0,
        init_log_alpha: f[7],
        target_entropy: f[6],
    };
    config.validate()?;
    let actor = numerics::read_mlp(&mut r, path)?;
    let actor_opt = read_adam(&mut r, &actor, config.actor_lr, path)?;
    let mut critics = Vec::with_capacity(ensemble_size);
    let mut critic_opts = Vec::with_capacity(ensemble_size);
    for _ in 0..ensemble_size {
        let critic = numerics::read_mlp(&mut r, path)?;
        let opt = read_adam(&mut r, &critic, config.critic_lr, path)?;
        critics.push(critic);
        critic_opts.push(opt);
    }
    let mut targets = Vec::with_capacity(ensemble_size);
    for _ in 0..ensemble_size {
        targets.push(numerics::read_mlp(&mut r, path)?);
    }
    Ok(SacAgent {
        log_alpha: f[7],
        config,
        actor,
        critics,
        targets,
        actor_opt,
        critic_opts,
        alpha_opt: (f[8], f[9], alpha_step),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlab::{chain_oracle, generate_dataset, EnvSpec, CHAIN_CELLS};
    use crate::numerics::flops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(obs_dim: usize, act_dim: usize) -> AgentConfig {
        AgentConfig::sope_profile(obs_dim, act_dim).with_hidden(vec![8])
    }

    fn transition(obs: Vec<f64>, action: Vec<f64>, reward: f64, next_obs: Vec<f64>) -> Transition {
        Transition {
            obs,
            action,
            reward,
            next_obs,
            terminal: false,
            truncated: false,
        }
    }

    fn random_batch(obs_dim: usize, act_dim: usize, n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let draw = |k: usize, rng: &mut ChaCha8Rng| {
                    (0..k).map(|_| 2.0 * unit_f64(rng) - 1.0).collect::<Vec<f64>>()
                };
                let obs = draw(obs_dim, &mut rng);
                let action = draw(act_dim, &mut rng);
                let next_obs = draw(obs_dim, &mut rng);
                let reward = 2.0 * unit_f64(&mut rng) - 1.0;
                transition(obs, action, reward, next_obs)
            })
            .collect()
    }

    fn refs(batch: &[Transition]) -> Vec<&Transition> {
        batch.iter().collect()
    }

    /// Zero every parameter, then pin the final bias so the network is the
    /// constant function `c`.
    fn set_constant_output(net: &mut MlpParams, c: f64) {
        let mut slices = net.param_slices_mut();
        for s in slices.iter_mut() {
            s.fill(0.0);
        }
        let last = slices.last_mut().unwrap();
        last[0] = c;
    }

    #[test]
    fn td_target_matches_hand_computation() {
        // E=2, |Z|=2, constant targets Q1=3 / Q2=5, no entropy bonus,
        // r=1, gamma=0.9 => y = 1 + 0.9 * min(3,5) = 3.7
        let mut cfg = small_config(2, 1);
        cfg.hidden = vec![];
        cfg.gamma = 0.9;
        cfg.entropy_in_target = false;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut agent = SacAgent::new(cfg, &mut rng).unwrap();
        set_constant_output(&mut agent.targets[0], 3.0);
        set_constant_output(&mut agent.targets[1], 5.0);

        let t = transition(vec![0.1, 0.2], vec![0.3], 1.0, vec![0.4, 0.5]);
        let y = agent.td_target(&[&t], &mut rng).unwrap();
        assert_eq!(y, vec![3.7]);

        // terminal cuts the bootstrap entirely
        let term = Transition {
            terminal: true,
            ..t.clone()
        };
        let y = agent.td_target(&[&term], &mut rng).unwrap();
        assert_eq!(y, vec![1.0]);

        // truncation bootstraps through
        let trunc = Transition {
            truncated: true,
            ..t.clone()
        };
        let y = agent.td_target(&[&trunc], &mut rng).unwrap();
        assert_eq!(y, vec![3.7]);
    }

    #[test]
    fn entropy_switch_changes_target() {
        let mut cfg = small_config(2, 1);
        cfg.gamma = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = SacAgent::new(cfg, &mut rng).unwrap();
        let t = transition(vec![0.1, -0.2], vec![0.0], 0.5, vec![0.3, 0.3]);
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let y_with = agent.td_target(&[&t], &mut r1).unwrap()[0];
        agent.config.entropy_in_target = false;
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let y_without = agent.td_target(&[&t], &mut r2).unwrap()[0];
        assert_ne!(y_with, y_without);
    }

    #[test]
    fn subset_draws_are_distinct_and_cover_ensemble() {
        let mut cfg = AgentConfig::rlpd_lite_profile(2, 1);
        cfg.hidden = vec![4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = SacAgent::new(cfg, &mut rng).unwrap();
        let mut seen = [false; 10];
        for _ in 0..500 {
            let z = agent.draw_subset(&mut rng);
            assert_eq!(z.len(), 2);
            assert_ne!(z[0], z[1]);
            assert!(z.iter().all(|&i| i < 10));
            seen[z[0]] = true;
            seen[z[1]] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn critic_update_freezes_actor_temperature_and_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = SacAgent::new(small_config(3, 2), &mut rng).unwrap();
        let batch = random_batch(3, 2, 8, 42);
        let actor_before = agent.actor_checksum();
        let targets_before: Vec<u64> = agent.targets.iter().map(|t| t.checksum()).collect();
        let critics_before: Vec<u64> = agent.critics.iter().map(|c| c.checksum()).collect();
        agent.critic_update(&refs(&batch), &mut rng).unwrap();
        assert_eq!(agent.actor_checksum(), actor_before);
        let targets_after: Vec<u64> = agent.targets.iter().map(|t| t.checksum()).collect();
        assert_eq!(targets_after, targets_before);
        let critics_after: Vec<u64> = agent.critics.iter().map(|c| c.checksum()).collect();
        assert_ne!(critics_after, critics_before);
    }

    #[test]
    fn actor_update_freezes_critics_and_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut agent = SacAgent::new(small_config(3, 2), &mut rng).unwrap();
        let batch = random_batch(3, 2, 8, 43);
        let critics_before: Vec<u64> = agent.critics.iter().map(|c| c.checksum()).collect();
        let targets_before: Vec<u64> = agent.targets.iter().map(|t| t.checksum()).collect();
        let actor_before = agent.actor.checksum();
        agent
            .actor_and_temperature_update(&refs(&batch), &mut rng)
            .unwrap();
        let critics_after: Vec<u64> = agent.critics.iter().map(|c| c.checksum()).collect();
        let targets_after: Vec<u64> = agent.targets.iter().map(|t| t.checksum()).collect();
        assert_eq!(critics_after, critics_before);
        assert_eq!(targets_after, targets_before);
        assert_ne!(agent.actor.checksum(), actor_before);
    }

    #[test]
    fn soft_update_with_tau_one_copies_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cfg = small_config(2, 1);
        cfg.tau = 1.0;
        let mut agent = SacAgent::new(cfg, &mut rng).unwrap();
        let batch = random_batch(2, 1, 8, 44);
        agent.critic_update(&refs(&batch), &mut rng).unwrap();
        assert_ne!(agent.targets[0].checksum(), agent.critics[0].checksum());
        agent.target_soft_update().unwrap();
        for (t, c) in agent.targets.iter().zip(&agent.critics) {
            assert_eq!(t.checksum(), c.checksum());
        }
    }

    #[test]
    fn zero_learning_rates_change_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = small_config(2, 1);
        cfg.actor_lr = 0.0;
        cfg.critic_lr = 0.0;
        cfg.alpha_lr = 0.0;
        let mut agent = SacAgent::new(cfg, &mut rng).unwrap();
        let batch = random_batch(2, 1, 8, 45);
        let before: Vec<u64> = agent
            .critics
            .iter()
            .chain(std::iter::once(&agent.actor))
            .map(|n| n.checksum())
            .collect();
        let log_alpha_before = agent.log_alpha;
        agent.critic_update(&refs(&batch), &mut rng).unwrap();
        agent
            .actor_and_temperature_update(&refs(&batch), &mut rng)
            .unwrap();
        let after: Vec<u64> = agent
            .critics
            .iter()
            .chain(std::iter::once(&agent.actor))
            .map(|n| n.checksum())
            .collect();
        assert_eq!(after, before);
        assert_eq!(agent.log_alpha.to_bits(), log_alpha_before.to_bits());
    }

    #[test]
    fn critic_overfits_fixed_terminal_target() {
        // terminal transition => y = r exactly, independent of the actor,
        // so repeated updates must drive both critics to r
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut cfg = small_config(2, 1).with_hidden(vec![16]);
        cfg.dropout_keep = 1.0;
        cfg.critic_lr = 3e-3;
        let mut agent = SacAgent::new(cfg, &mut rng).unwrap();
        let t = Transition {
            terminal: true,
            ..transition(vec![0.2, -0.4], vec![0.6], 0.7, vec![0.0, 0.0])
        };
        let batch: Vec<&Transition> = std::iter::repeat(&t).take(8).collect();
        for _ in 0..2000 {
            agent.critic_update(&batch, &mut rng).unwrap();
        }
        let x = agent.critic_inputs(&t.obs, &t.action, 1);
        for critic in &agent.critics {
            let (q, _) = forward_batch(critic, &x, 1, Mode::Eval).unwrap();
            assert!(
                (q[0] - 0.7).abs() < 1e-3,
                "critic output {} did not converge to 0.7",
                q[0]
            );
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cfg = small_config(2, 2);
        cfg.dropout_keep = 1.0;
        let agent = SacAgent::new(cfg, &mut rng).unwrap();
        let batch = random_batch(2, 2, 4, 46);
        let batch_refs = refs(&batch);
        let seed = 99u64;

        // same seed => same Gaussian draws, so the loss is a deterministic
        // function of the actor parameters
        let loss_of = |a: &SacAgent| -> f64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let obs = SacAgent::stack_obs(&batch_refs, false);
            let s = a.sample_batch(&obs, batch_refs.len(), false, &mut r).unwrap();
            let x = a.critic_inputs(&obs, &s.action, batch_refs.len());
            let mut min_q = vec![f64::INFINITY; batch_refs.len()];
            for critic in &a.critics {
                let (q, _) = forward_batch(critic, &x, batch_refs.len(), Mode::Eval).unwrap();
                for (mq, qi) in min_q.iter_mut().zip(&q) {
                    *mq = mq.min(*qi);
                }
            }
            let alpha = a.alpha();
            (0..batch_refs.len())
                .map(|i| alpha * s.log_prob[i] - min_q[i])
                .sum::<f64>()
                / batch_refs.len() as f64
        };

        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (loss, grads, _) = agent.actor_loss_grad(&batch_refs, &mut r).unwrap();
        assert!((loss - loss_of(&agent)).abs() < 1e-12);

        let h = 1e-5;
        let gslices = grads.grad_slices();
        let n_slices = gslices.len();
        for si in 0..n_slices {
            let len = gslices[si].len();
            // probe a spread of coordinates in each slice
            for k in (0..len).step_by((len / 5).max(1)) {
                let mut plus = agent.clone();
                plus.actor.param_slices_mut()[si][k] += h;
                let mut minus = agent.clone();
                minus.actor.param_slices_mut()[si][k] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let g = grads.grad_slices()[si][k];
                assert!(
                    (g - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                    "slice {si} index {k}: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let agent = SacAgent::new(small_config(2, 1), &mut rng).unwrap();
        let obs = [0.3, -0.7];
        let h = 1e-4;
        let mut mass = 0.0;
        let mut a = -1.0 + h / 2.0;
        while a < 1.0 {
            mass += agent.action_log_prob(&obs, &[a]).unwrap().exp() * h;
            a += h;
        }
        assert!(
            (mass - 1.0).abs() < 2e-3,
            "squashed density mass {mass} not ~1"
        );
    }

    #[test]
    fn sampled_actions_match_analytic_density_at_the_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let agent = SacAgent::new(small_config(3, 2), &mut rng).unwrap();
        let obs = [0.1, 0.2, -0.3];
        for _ in 0..50 {
            let s = agent.sample_action(&obs, false, &mut rng).unwrap();
            let lp = agent.action_log_prob(&obs, &s.action).unwrap();
            assert!(
                (lp - s.log_prob.unwrap()).abs() < 1e-6,
                "sampled log-prob disagrees with analytic density"
            );
            assert!(s.action.iter().all(|a| a.abs() < 1.0));
        }
    }

    #[test]
    fn deterministic_mode_returns_squashed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let agent = SacAgent::new(small_config(2, 1), &mut rng).unwrap();
        let obs = [0.5, -0.5];
        let a1 = agent.sample_action(&obs, true, &mut rng).unwrap();
        let a2 = agent.sample_action(&obs, true, &mut rng).unwrap();
        assert_eq!(a1.action, a2.action);
        assert!(a1.log_prob.is_none());
        let (heads, _) = agent.actor_heads(&obs, 1).unwrap();
        assert_eq!(a1.action[0], heads[0].tanh());
    }

    #[test]
    fn temperature_gradient_vanishes_at_target_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let base = SacAgent::new(small_config(2, 1), &mut rng).unwrap();
        let batch = random_batch(2, 1, 8, 47);

        let mut probe = base.clone();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let report = probe
            .actor_and_temperature_update(&refs(&batch), &mut r1)
            .unwrap();
        let measured = report.mean_log_prob.unwrap();

        let mut tuned = base.clone();
        tuned.config.target_entropy = -measured;
        let before = tuned.log_alpha.to_bits();
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        tuned
            .actor_and_temperature_update(&refs(&batch), &mut r2)
            .unwrap();
        assert_eq!(tuned.log_alpha.to_bits(), before);
    }

    #[test]
    fn constant_critics_drive_entropy_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut cfg = small_config(2, 1);
        cfg.alpha_lr = 0.0; // freeze the temperature at alpha = 1
        let mut agent = SacAgent::new(cfg, &mut rng).unwrap();
        for c in agent.critics.iter_mut() {
            set_constant_output(c, 0.0);
        }
        // start from a sharply peaked policy (std ~ e^-3) so entropy ascent
        // has room to move; near std ~ 1 the squashed entropy is already
        // close to its optimum
        {
            let mut slices = agent.actor.param_slices_mut();
            for s in slices.iter_mut() {
                s.fill(0.0);
            }
            let bias = slices.last_mut().unwrap();
            bias[1] = -3.0;
        }
        let batch = random_batch(2, 1, 16, 48);
        let batch_refs = refs(&batch);
        let mut early = 0.0;
        let mut late = 0.0;
        for i in 0..300 {
            let rep = agent
                .actor_and_temperature_update(&batch_refs, &mut rng)
                .unwrap();
            let lp = rep.mean_log_prob.unwrap();
            if i < 10 {
                early += lp;
            }
            if i >= 290 {
                late += lp;
            }
        }
        assert!(
            late / 10.0 < early / 10.0 - 0.1,
            "entropy did not increase under a flat critic landscape"
        );
    }

    #[test]
    fn update_reports_match_flop_meter_exactly() {
        flops::reset();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut agent = SacAgent::new(small_config(3, 2), &mut rng).unwrap();
        let batch = random_batch(3, 2, 8, 49);
        let r1 = agent.critic_update(&refs(&batch), &mut rng).unwrap();
        let r2 = agent
            .actor_and_temperature_update(&refs(&batch), &mut rng)
            .unwrap();
        assert_eq!(flops::total(), r1.flops + r2.flops);
        // and the closed forms agree with the reports
        assert_eq!(r1.flops, agent.flops_critic_update(8));
        assert_eq!(r2.flops, agent.flops_actor_update(8));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_training_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut agent = SacAgent::new(small_config(2, 1), &mut rng).unwrap();
        let batch = random_batch(2, 1, 8, 50);
        // accumulate some optimizer state before saving
        agent.critic_update(&refs(&batch), &mut rng).unwrap();
        agent
            .actor_and_temperature_update(&refs(&batch), &mut rng)
            .unwrap();
        save_agent(&path, &agent).unwrap();
        let mut restored = load_agent(&path).unwrap();

        assert_eq!(restored.actor.checksum(), agent.actor.checksum());
        assert_eq!(restored.log_alpha.to_bits(), agent.log_alpha.to_bits());
        for (a, b) in restored.critics.iter().zip(&agent.critics) {
            assert_eq!(a.checksum(), b.checksum());
        }
        for (a, b) in restored.targets.iter().zip(&agent.targets) {
            assert_eq!(a.checksum(), b.checksum());
        }

        // identical further updates must produce identical parameters,
        // which exercises the optimizer-state roundtrip
        let mut r1 = ChaCha8Rng::seed_from_u64(123);
        let mut r2 = ChaCha8Rng::seed_from_u64(123);
        agent.critic_update(&refs(&batch), &mut r1).unwrap();
        restored.critic_update(&refs(&batch), &mut r2).unwrap();
        agent
            .actor_and_temperature_update(&refs(&batch), &mut r1)
            .unwrap();
        restored
            .actor_and_temperature_update(&refs(&batch), &mut r2)
            .unwrap();
        assert_eq!(restored.actor.checksum(), agent.actor.checksum());
        assert_eq!(restored.critics[0].checksum(), agent.critics[0].checksum());
        assert_eq!(restored.log_alpha.to_bits(), agent.log_alpha.to_bits());
    }

    #[test]
    fn missing_checkpoint_is_a_dependency_error() {
        match load_agent(Path::new("/nonexistent/agent.bin")) {
            Err(Error::Dependency(_)) => {}
            other => panic!("expected dependency error, got {:?}", other.err()),
        }
    }

    #[test]
    fn td_learning_recovers_exact_chain_values() {
        // Linear critics on one-hot chain observations span the exact Q^pi,
        // so TD learning against a synced target must converge to the
        // enumeration oracle's values on the visited state-action pairs.
        let spec = EnvSpec::chain();
        let mut cfg = AgentConfig::sope_profile(spec.obs_dim, spec.act_dim);
        cfg.hidden = vec![];
        cfg.layer_norm = false;
        cfg.dropout_keep = 1.0;
        cfg.entropy_in_target = false;
        cfg.gamma = 0.5;
        cfg.tau = 1.0;
        cfg.critic_lr = 3e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut agent = SacAgent::new(cfg, &mut rng).unwrap();
        // identical twin critics keep the subset-min unbiased under batch
        // jitter, so the TD fixed point is hit exactly
        agent.critics[1] = agent.critics[0].clone();
        agent.targets = agent.critics.clone();

        // near-deterministic always-right policy: mean head pinned at +3,
        // log-std head pinned far below the clamp floor
        {
            let mut slices = agent.actor.param_slices_mut();
            for s in slices.iter_mut() {
                s.fill(0.0);
            }
            let bias = slices.last_mut().unwrap();
            bias[0] = 3.0;
            bias[1] = -30.0;
        }

        let mut policy = DeterministicActor(&agent);
        let data = generate_dataset(spec, &mut policy, 512, 21);
        drop(policy);

        // full-batch updates: a deterministic gradient lets the iteration
        // settle onto the TD fixed point instead of hovering at a
        // minibatch-noise floor
        let batch: Vec<&Transition> = data.iter().collect();
        for _ in 0..30_000 {
            agent.critic_update(&batch, &mut rng).unwrap();
            agent.target_soft_update().unwrap();
        }

        let oracle = chain_oracle::q_pi(&[1.0; CHAIN_CELLS], 0.5);
        let action = 3.0f64.tanh();
        for cell in 0..CHAIN_CELLS - 1 {
            let mut obs = vec![0.0; CHAIN_CELLS];
            obs[cell] = 1.0;
            let x = agent.critic_inputs(&obs, &[action], 1);
            for critic in &agent.critics {
                let (q, _) = forward_batch(critic, &x, 1, Mode::Eval).unwrap();
                assert!(
                    (q[0] - oracle[cell][1]).abs() < 1e-3,
                    "cell {cell}: learned {} vs oracle {}",
                    q[0],
                    oracle[cell][1]
                );
            }
        }
    }
}
