//! Seeded synthetic interaction streams.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Every user alternates between two personal items forever.
    Repetitive,
    /// Users wander between item clusters over time.
    Drift,
    /// A fraction of users leave; their last interactions carry shifted
    /// features and the final one is labeled.
    Dropout,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repetitive" => Ok(Preset::Repetitive),
            "drift" => Ok(Preset::Drift),
            "dropout" => Ok(Preset::Dropout),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected repetitive, drift or dropout)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub preset: Preset,
    pub users: usize,
    pub items: usize,
    pub events: usize,
    pub seed: u64,
    pub feature_dim: usize,
    /// Share of users that drop out (dropout preset only).
    pub dropper_frac: f64,
}

impl SynthConfig {
    pub fn new(preset: Preset, users: usize, items: usize, events: usize, seed: u64) -> Self {
        SynthConfig {
            preset,
            users,
            items,
            events,
            seed,
            feature_dim: if preset == Preset::Dropout { DROPOUT_FEATURES } else { 0 },
            dropper_frac: 0.05,
        }
    }
}

pub const DROPOUT_FEATURES: usize = 4;
/// Interactions before the final one whose features are shifted.
pub const DROPOUT_LEAD: usize = 5;
const LEAD_SHIFT: f64 = 1.5;
const FINAL_SHIFT: f64 = 3.0;
const DRIFT_SWITCH_PROB: f64 = 0.05;

type Row = (usize, usize, f64, bool, Vec<f64>);

/// Generates a stream in which every user and every item occurs.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    let (u, i, n) = (cfg.users, cfg.items, cfg.events);
    if u == 0 || i == 0 {
        return Err(Error::Config("need at least one user and one item".into()));
    }
    if n < u.max(i) {
        return Err(Error::Config(format!("{n} events cannot cover {u} users and {i} items")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = match cfg.preset {
        Preset::Repetitive => repetitive(cfg, &mut rng)?,
        Preset::Drift => drift(cfg, &mut rng),
        Preset::Dropout => dropout(cfg, &mut rng)?,
    };
    Dataset::from_dense(u, i, cfg.feature_dim, rows)
}

fn noise(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn clock(rng: &mut ChaCha8Rng, t: &mut f64) -> f64 {
    *t += Exp::new(1.0).expect("positive rate").sample(rng);
    *t
}

/// The personal pair of user `u`.
pub fn repetitive_pair(perm: &[usize], u: usize) -> (usize, usize) {
    let i = perm.len();
    (perm[(2 * u) % i], perm[(2 * u + 1) % i])
}

fn repetitive(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Row>> {
    let (u, i, n) = (cfg.users, cfg.items, cfg.events);
    if i < 2 || 2 * u < i {
        return Err(Error::Config("repetitive preset needs at least 2 items and users * 2 >= items".into()));
    }
    if n < 2 * u {
        return Err(Error::Config("repetitive preset needs at least 2 events per user".into()));
    }
    let mut perm: Vec<usize> = (0..i).collect();
    perm.shuffle(rng);
    let mut next_first = vec![true; u];
    let mut t = 0.0;
    let mut rows = Vec::with_capacity(n);
    let mut emit = |user: usize, rng: &mut ChaCha8Rng, rows: &mut Vec<Row>| {
        let (a, b) = repetitive_pair(&perm, user);
        let item = if next_first[user] { a } else { b };
        next_first[user] = !next_first[user];
        rows.push((user, item, clock(rng, &mut t), false, noise(rng, cfg.feature_dim)));
    };
    for _ in 0..2 {
        let mut order: Vec<usize> = (0..u).collect();
        order.shuffle(rng);
        for user in order {
            emit(user, rng, &mut rows);
        }
    }
    while rows.len() < n {
        let user = rng.random_range(0..u);
        emit(user, rng, &mut rows);
    }
    Ok(rows)
}

fn drift(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Row> {
    let (u, i, n) = (cfg.users, cfg.items, cfg.events);
    let clusters = (i / 5).max(1);
    let cluster_of = |item: usize| item * clusters / i;
    let members: Vec<Vec<usize>> = (0..clusters).map(|c| (0..i).filter(|&it| cluster_of(it) == c).collect()).collect();
    let mut current: Vec<usize> = (0..u).map(|_| rng.random_range(0..clusters)).collect();
    let mut t = 0.0;
    let mut rows = Vec::with_capacity(n);
    for k in 0..u.max(i) {
        let user = k % u;
        let item = k % i;
        current[user] = cluster_of(item);
        rows.push((user, item, clock(rng, &mut t), false, noise(rng, cfg.feature_dim)));
    }
    while rows.len() < n {
        let user = rng.random_range(0..u);
        if rng.random_bool(DRIFT_SWITCH_PROB) {
            current[user] = (current[user] + 1) % clusters;
        }
        let pool = &members[current[user]];
        let item = pool[rng.random_range(0..pool.len())];
        rows.push((user, item, clock(rng, &mut t), false, noise(rng, cfg.feature_dim)));
    }
    rows
}

fn dropout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Row>> {
    let (u, i, n, f) = (cfg.users, cfg.items, cfg.events, cfg.feature_dim);
    if f == 0 {
        return Err(Error::Config("dropout preset needs at least one feature".into()));
    }
    if !(0.0..=1.0).contains(&cfg.dropper_frac) {
        return Err(Error::Config("dropper fraction must be in [0, 1]".into()));
    }
    let cover = u.max(i);
    let n_drop = ((u as f64) * cfg.dropper_frac).round() as usize;
    let mut ids: Vec<usize> = (0..u).collect();
    ids.shuffle(rng);
    let mut is_dropper = vec![false; u];
    ids[..n_drop].iter().for_each(|&d| is_dropper[d] = true);

    // step at which each dropper leaves, spread over the later 70% of the stream
    let lo = cover.max(3 * n / 10);
    if lo + 1 >= n && n_drop > 0 {
        return Err(Error::Config("too few events for the dropout preset".into()));
    }
    let mut leave_at = vec![usize::MAX; u];
    for &d in &ids[..n_drop] {
        leave_at[d] = rng.random_range(lo..n);
    }

    // assign users to steps; a dropper's slot stream ends at its leave step
    let mut users_at: Vec<usize> = Vec::with_capacity(n);
    for k in 0..cover {
        users_at.push(k % u);
    }
    let mut active: Vec<usize> = (0..u).collect();
    for k in cover..n {
        active.retain(|&x| leave_at[x] > k);
        if active.is_empty() {
            return Err(Error::Config("every user dropped before the stream ended".into()));
        }
        let user = active[rng.random_range(0..active.len())];
        users_at.push(user);
    }
    let mut last_step = vec![None; u];
    for (k, &user) in users_at.iter().enumerate() {
        last_step[user] = Some(k);
    }
    // the final DROPOUT_LEAD + 1 steps of every dropper
    let mut remaining: Vec<usize> = vec![0; u];
    for &user in &users_at {
        remaining[user] += 1;
    }

    let mut t = 0.0;
    let mut rows = Vec::with_capacity(n);
    for (k, &user) in users_at.iter().enumerate() {
        remaining[user] -= 1;
        let item = if k < cover { k % i } else { rng.random_range(0..i) };
        let mut feats = noise(rng, f);
        let mut label = false;
        if is_dropper[user] {
            if last_step[user] == Some(k) {
                label = true;
                feats.iter_mut().for_each(|x| *x += FINAL_SHIFT);
            } else if remaining[user] <= DROPOUT_LEAD {
                feats.iter_mut().for_each(|x| *x += LEAD_SHIFT);
            }
        }
        rows.push((user, item, clock(rng, &mut t), label, feats));
    }
    Ok(rows)
}
