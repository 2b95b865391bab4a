//! Dual offline/online transition storage, symmetric mini-batch sampling,
//! and per-stabilization-phase train/validation partitioning.
//!
//! The offline store is loaded once and never mutated; the online store is
//! an append-only bounded ring. Batches draw half of their transitions from
//! each store, uniformly with replacement within a store; when one store
//! cannot supply its half the deficit is drawn from the other so batch size
//! (and compute per update) stays constant.

use std::io::Write;
use std::path::Path;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envlab::{self, Transition};
use crate::error::{Error, Result};
use crate::numerics::unit_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Offline,
    Online,
}

/// Offline dataset plus growing online ring buffer.
#[derive(Debug, Clone)]
pub struct DualReplayBuffer {
    offline: Vec<Transition>,
    online: Vec<Transition>,
    capacity: usize,
    head: usize,
    offline_loads: u32,
    online_inserted: u64,
}

impl DualReplayBuffer {
    pub fn new(online_capacity: usize) -> Self {
        DualReplayBuffer {
            offline: Vec::new(),
            online: Vec::new(),
            capacity: online_capacity.max(1),
            head: 0,
            offline_loads: 0,
            online_inserted: 0,
        }
    }

    /// Populate the offline store, preserving order. May be called once.
    pub fn load_offline(&mut self, transitions: Vec<Transition>) -> Result<()> {
        if self.offline_loads > 0 {
            return Err(Error::Usage("offline store already loaded".into()));
        }
        self.offline = transitions;
        self.offline_loads = 1;
        Ok(())
    }

    /// Load the offline store from a dataset file in the columnar format.
    pub fn load_offline_file(&mut self, path: &Path) -> Result<()> {
        let (_, _, transitions) = envlab::load_dataset(path)?;
        self.load_offline(transitions)
    }

    /// Append to the online ring; once full, the oldest entry is overwritten.
    pub fn push_online(&mut self, t: Transition) {
        if self.online.len() < self.capacity {
            self.online.push(t);
        } else {
            self.online[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.online_inserted += 1;
    }

    pub fn offline_len(&self) -> usize {
        self.offline.len()
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    pub fn total_len(&self) -> usize {
        self.offline.len() + self.online.len()
    }

    pub fn online_inserted(&self) -> u64 {
        self.online_inserted
    }

    pub fn get(&self, origin: Origin, index: u32) -> &Transition {
        match origin {
            Origin::Offline => &self.offline[index as usize],
            Origin::Online => &self.online[index as usize],
        }
    }
}

/// Mini-batch size contract: total must be even so the per-store halves
/// are equal.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    total: usize,
}

impl BatchSpec {
    pub fn new(total: usize) -> Result<BatchSpec> {
        if total == 0 || total % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and positive, got {total}"
            )));
        }
        Ok(BatchSpec { total })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn half(&self) -> usize {
        self.total / 2
    }
}

/// Frozen disjoint partition of the buffer union into train and validation
/// index sets, drawn at the start of a stabilization phase.
#[derive(Debug, Clone)]
pub struct ValidationSplit {
    pub train_offline: Vec<u32>,
    pub train_online: Vec<u32>,
    pub val_offline: Vec<u32>,
    pub val_online: Vec<u32>,
    pub fraction: f64,
    /// Environment-step count at creation, for audit only.
    pub created_at_step: u64,
}

impl ValidationSplit {
    pub fn validation_len(&self) -> usize {
        self.val_offline.len() + self.val_online.len()
    }

    pub fn train_len(&self) -> usize {
        self.train_offline.len() + self.train_online.len()
    }

    /// Validation members as (origin, index) pairs.
    pub fn validation_indices(&self) -> impl Iterator<Item = (Origin, u32)> + '_ {
        self.val_offline
            .iter()
            .map(|&i| (Origin::Offline, i))
            .chain(self.val_online.iter().map(|&i| (Origin::Online, i)))
    }

    /// Audit export: one row per index with its origin store and half.
    pub fn export_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "index,origin,half")?;
        let mut row = |idx: u32, origin: &str, half: &str| writeln!(w, "{idx},{origin},{half}");
        for &i in &self.train_offline {
            row(i, "offline", "train")?;
        }
        for &i in &self.train_online {
            row(i, "online", "train")?;
        }
        for &i in &self.val_offline {
            row(i, "offline", "validation")?;
        }
        for &i in &self.val_online {
            row(i, "online", "validation")?;
        }
        Ok(())
    }
}

/// Uniform random disjoint partition over the union of both stores.
/// Validation size is `round(fraction * total)`; deterministic given seed.
pub fn make_split(
    buffer: &DualReplayBuffer,
    fraction: f64,
    seed: u64,
    created_at_step: u64,
) -> Result<ValidationSplit> {
    if buffer.total_len() == 0 {
        return Err(Error::Usage("cannot split an empty buffer".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {fraction} outside (0, 1)"
        )));
    }
    let n_off = buffer.offline_len();
    let n_on = buffer.online_len();
    let total = n_off + n_on;
    let mut all: Vec<(Origin, u32)> = (0..n_off as u32)
        .map(|i| (Origin::Offline, i))
        .chain((0..n_on as u32).map(|i| (Origin::Online, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..total).rev() {
        let j = (unit_f64(&mut rng) * (i + 1) as f64) as usize;
        all.swap(i, j.min(i));
    }
    let n_val = ((fraction * total as f64).round() as usize).clamp(1, total - 1);
    let mut split = ValidationSplit {
        train_offline: Vec::new(),
        train_online: Vec::new(),
        val_offline: Vec::new(),
        val_online: Vec::new(),
        fraction,
        created_at_step,
    };
    for (k, (origin, idx)) in all.into_iter().enumerate() {
        let bucket = if k < n_val {
            match origin {
                Origin::Offline => &mut split.val_offline,
                Origin::Online => &mut split.val_online,
            }
        } else {
            match origin {
                Origin::Offline => &mut split.train_offline,
                Origin::Online => &mut split.train_online,
            }
        };
        bucket.push(idx);
    }
    Ok(split)
}

/// Draw a symmetric batch as (origin, index) pairs: `|B|/2` from each
/// store, uniformly with replacement within a store. If one store cannot
/// supply its half the deficit comes from the other. With `restrict`,
/// indices are drawn from that split's train sets only.
pub fn symmetric_sample_indices(
    buffer: &DualReplayBuffer,
    spec: BatchSpec,
    restrict: Option<&ValidationSplit>,
    rng: &mut dyn RngCore,
) -> Result<Vec<(Origin, u32)>> {
    let (off_pool, on_pool): (Option<&[u32]>, Option<&[u32]>) = match restrict {
        Some(s) => (Some(&s.train_offline), Some(&s.train_online)),
        None => (None, None),
    };
    let n_off = off_pool.map_or(buffer.offline_len(), |p| p.len());
    let n_on = on_pool.map_or(buffer.online_len(), |p| p.len());
    if n_off == 0 && n_on == 0 {
        return Err(Error::Usage("sampling from an empty buffer".into()));
    }
    // cold-start shortfall: while the online store holds fewer than |B|/2
    // transitions, the deficit is drawn from the offline store instead
    let half = spec.half();
    let take_on = if n_off == 0 {
        spec.total()
    } else {
        n_on.min(half)
    };
    let take_off = spec.total() - take_on;

    let mut out = Vec::with_capacity(spec.total());
    let draw = |origin: Origin, pool: Option<&[u32]>, n: usize, count: usize,
                    rng: &mut dyn RngCore,
                    out: &mut Vec<(Origin, u32)>| {
        for _ in 0..count {
            let k = ((unit_f64(rng) * n as f64) as usize).min(n - 1);
            let idx = pool.map_or(k as u32, |p| p[k]);
            out.push((origin, idx));
        }
    };
    draw(Origin::Offline, off_pool, n_off.max(1), take_off, rng, &mut out);
    draw(Origin::Online, on_pool, n_on.max(1), take_on, rng, &mut out);
    Ok(out)
}

/// Materialized symmetric batch.
pub fn symmetric_sample<'a>(
    buffer: &'a DualReplayBuffer,
    spec: BatchSpec,
    restrict: Option<&ValidationSplit>,
    rng: &mut dyn RngCore,
) -> Result<Vec<&'a Transition>> {
    Ok(symmetric_sample_indices(buffer, spec, restrict, rng)?
        .into_iter()
        .map(|(o, i)| buffer.get(o, i))
        .collect())
}
