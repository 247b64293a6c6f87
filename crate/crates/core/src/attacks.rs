//! Untargeted model-poisoning attacks.
//!
//! Attacks craft parameter uploads `θ − α·g` where `g` is the gradient they
//! want the server to apply. IPM and LMP collude (every attacker sends the
//! same upload); EB trains each attacker on its own poisoned shard.

use crate::error::{invalid, Result};
use crate::fl::{Attack, AttackContext};
use crate::params::ParamVector;
use crate::rl::{sigmoid, Td3Agent, Td3Config, Transition};
use crate::rng::{rng_from, stream, Rng};
use crate::robust::krum;

/// Inner-product manipulation gradient `−ε·m`.
pub fn ipm_gradient(mean_benign: &ParamVector, eps: f64) -> ParamVector {
    mean_benign.scale(-eps)
}

pub fn ipm(ctx: &AttackContext<'_>, eps: f64) -> Result<ParamVector> {
    if !(eps >= 0.0) {
        return Err(invalid(format!("ipm epsilon must be non-negative, got {eps}")));
    }
    let m = ctx.mean_benign_gradient()?;
    Ok(ctx.upload_for_gradient(&ipm_gradient(&m, eps)))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Whether Krum over `benign` plus `copies` copies of `candidate` selects a copy.
pub fn krum_accepts(benign: &[ParamVector], candidate: &ParamVector, copies: usize) -> Result<bool> {
    let mut pool: Vec<&ParamVector> = benign.iter().collect();
    pool.extend(std::iter::repeat_n(candidate, copies));
    if pool.len() < 3 {
        return Ok(true);
    }
    let f = copies.min(pool.len() - 3);
    let (idx, _) = krum(&pool, f)?;
    Ok(idx >= benign.len())
}

/// Deviation magnitude after `i` rejections.
pub fn lmp_lambda(lambda0: f64, rejections: usize) -> f64 {
    lambda0 / 2f64.powi(rejections as i32)
}

/// Directed-deviation upload encoding gradient `−λ·sign(m)`.
///
/// `λ` starts at `λ0` and halves while the Krum check rejects it; after
/// `halvings` halvings the last candidate is returned regardless.
pub fn lmp(ctx: &AttackContext<'_>, lambda0: f64, halvings: usize) -> Result<ParamVector> {
    if !(lambda0 > 0.0) {
        return Err(invalid(format!("lmp λ0 must be positive, got {lambda0}")));
    }
    let m = ctx.mean_benign_gradient()?;
    let s = ParamVector(m.iter().map(|&x| sign(x)).collect());
    let copies = ctx.attackers.len();
    let mut candidate = ctx.global.clone();
    for i in 0..=halvings {
        let lambda = lmp_lambda(lambda0, i);
        candidate = ctx.upload_for_gradient(&s.scale(-lambda));
        if krum_accepts(ctx.benign, &candidate, copies)? {
            break;
        }
    }
    Ok(candidate)
}

/// Explicit boosting factor `|C^t| / #attackers`.
pub fn eb_boost(sampled: usize, attackers: usize) -> f64 {
    sampled as f64 / attackers.max(1) as f64
}

/// `θ + B_f·(θ_mal − θ)`.
pub fn boost(global: &ParamVector, poisoned: &ParamVector, factor: f64) -> ParamVector {
    let mut out = global.clone();
    out.axpy(factor, &poisoned.sub(global));
    out
}

/// Each attacker trains on its shard with labels `y → (y + 1) mod M` and
/// boosts the resulting delta.
pub fn eb(ctx: &AttackContext<'_>, client: usize) -> Result<ParamVector> {
    let classes = ctx.fed.train.classes;
    let flip = move |y: usize| (y + 1) % classes;
    let poisoned = ctx.fed.train_on(ctx.global, &ctx.fed.assignment.shards[client], client, ctx.round, Some(&flip))?;
    Ok(boost(ctx.global, &poisoned, eb_boost(ctx.sampled, ctx.attackers.len())))
}

#[derive(Debug, Clone, Copy)]
pub struct Ipm {
    pub eps: f64,
}

impl Attack for Ipm {
    fn name(&self) -> &str {
        "ipm"
    }

    fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>> {
        let up = ipm(ctx, self.eps)?;
        Ok(vec![up; ctx.attackers.len()])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Lmp {
    pub lambda0: f64,
    pub halvings: usize,
}

impl Default for Lmp {
    fn default() -> Self {
        Lmp { lambda0: 10.0, halvings: 10 }
    }
}

impl Attack for Lmp {
    fn name(&self) -> &str {
        "lmp"
    }

    fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>> {
        let up = lmp(ctx, self.lambda0, self.halvings)?;
        Ok(vec![up; ctx.attackers.len()])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Eb;

impl Attack for Eb {
    fn name(&self) -> &str {
        "eb"
    }

    fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>> {
        ctx.attackers.iter().map(|&c| eb(ctx, c)).collect()
    }
}

/// Adaptive scaling adversary driven by its own TD3 policy.
///
/// It observes `(previous accuracy, accuracy change, t / R_g)`, picks a mixing
/// weight `α_mix ∈ [0, 1]` and a gain `γ_a ∈ [0, 2]`, and sends the gradient
/// `γ_a·(α_mix·(−m) + (1 − α_mix)·m̂)` where `m̂` is the last global step
/// expressed as a gradient. Its reward is the drop in test accuracy.
#[derive(Debug, Clone)]
pub struct RlAdversary {
    pub agent: Td3Agent,
    pub rounds: usize,
    /// Keep the policy fixed (no replay updates, no exploration).
    pub frozen: bool,
    rng: Rng,
    step: usize,
    acc: f64,
    delta: f64,
    pending: Option<(Vec<f64>, Vec<f64>)>,
}

pub const ADVERSARY_OBS: usize = 3;

impl RlAdversary {
    pub fn new(cfg: Td3Config, rounds: usize, seed: u64) -> Result<Self> {
        Ok(RlAdversary {
            agent: Td3Agent::new(ADVERSARY_OBS, 2, cfg, rng_seed(seed))?,
            rounds: rounds.max(1),
            frozen: false,
            rng: rng_from(seed, &[stream::ADVERSARY, 1]),
            step: 0,
            acc: 0.0,
            delta: 0.0,
            pending: None,
        })
    }

    /// Resets the per-run observation state, keeping the learned policy.
    pub fn new_episode(&mut self) {
        self.acc = 0.0;
        self.delta = 0.0;
        self.pending = None;
    }

    pub fn observation(&self, round: usize) -> Vec<f64> {
        vec![self.acc, self.delta, round as f64 / self.rounds as f64]
    }

    /// Squashed `(α_mix, γ_a)` for a raw policy output.
    pub fn squash(raw: &[f64]) -> (f64, f64) {
        (sigmoid(raw[0]), 2.0 * sigmoid(raw[1]))
    }

    /// Picks `(α_mix, γ_a)` for `obs` and returns the raw action too.
    pub fn rl_attack_step(&mut self, obs: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        let raw = self.agent.select_raw(obs, self.step, !self.frozen, &mut self.rng)?;
        let (mix, gain) = Self::squash(&raw);
        Ok((mix, gain, raw))
    }
}

fn rng_seed(seed: u64) -> u64 {
    crate::rng::derive_seed(seed, &[stream::ADVERSARY])
}

/// Gradient `γ_a·(α_mix·(−m) + (1 − α_mix)·m̂)`.
pub fn adversary_gradient(m: &ParamVector, m_hat: &ParamVector, mix: f64, gain: f64) -> ParamVector {
    let mut g = m.scale(-gain * mix);
    g.axpy(gain * (1.0 - mix), m_hat);
    g
}

impl Attack for RlAdversary {
    fn name(&self) -> &str {
        "rl"
    }

    fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>> {
        let m = ctx.mean_benign_gradient()?;
        let m_hat = match ctx.prev_global {
            Some(prev) => prev.sub(ctx.global).scale(1.0 / ctx.fed.lr),
            None => ParamVector::zeros(m.len()),
        };
        let obs = self.observation(ctx.round);
        let (mix, gain, raw) = self.rl_attack_step(&obs)?;
        self.pending = Some((obs, raw));
        let up = ctx.upload_for_gradient(&adversary_gradient(&m, &m_hat, mix, gain));
        Ok(vec![up; ctx.attackers.len()])
    }

    fn observe(&mut self, round: usize, test_acc: f64) {
        let reward = self.acc - test_acc;
        self.delta = test_acc - self.acc;
        self.acc = test_acc;
        if let Some((obs, raw)) = self.pending.take() {
            let next = self.observation(round + 1);
            let done = round + 1 >= self.rounds;
            if !self.frozen {
                let t = Transition { state: obs, action: raw, reward, next_state: next, done };
                if self.agent.push(t).is_ok() && self.step >= self.agent.cfg.warmup {
                    self.agent.train_step();
                }
            }
            self.step += 1;
        }
    }
}
