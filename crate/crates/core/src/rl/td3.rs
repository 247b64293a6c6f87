//! Twin Delayed DDPG: actor, twin critics and their targets.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{squash_action, Action, ReplayBuffer, Td3Config, Transition};
use crate::error::{invalid, Error, Result};
use crate::model::{init_network, Network};
use crate::optim::Adam;
use crate::rng::{derive_seed, rng_from, Rng};

/// `y = r + γ·(1 − done)·min(q1, q2)`.
pub fn td3_target(reward: f64, done: bool, gamma: f64, q1: f64, q2: f64) -> f64 {
    let cont = if done { 0.0 } else { 1.0 };
    reward + gamma * cont * q1.min(q2)
}

/// `target ← τ·params + (1 − τ)·target`.
pub fn soft_update(target: &mut [f64], params: &[f64], tau: f64) {
    for (t, p) in target.iter_mut().zip(params) {
        *t = tau * p + (1.0 - tau) * *t;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub critic_loss: [f64; 2],
    pub actor_loss: Option<f64>,
    /// Regression targets of the batch.
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub cfg: Td3Config,
    pub state_dim: usize,
    pub action_dim: usize,
    pub actor_net: Network,
    pub critic_net: Network,
    pub actor: Vec<f64>,
    pub actor_target: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub q1_target: Vec<f64>,
    pub q2_target: Vec<f64>,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    pub replay: ReplayBuffer,
    rng: Rng,
    /// Critic updates performed so far.
    pub updates: usize,
}

fn concat_rows(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (da + db));
    for r in 0..n {
        out.extend_from_slice(&a[r * da..(r + 1) * da]);
        out.extend_from_slice(&b[r * db..(r + 1) * db]);
    }
    out
}

impl Td3Agent {
    pub fn new(state_dim: usize, action_dim: usize, cfg: Td3Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 || action_dim == 0 {
            return Err(invalid("td3 state and action dimensions must be positive"));
        }
        let actor_net = Network::mlp(state_dim, &cfg.hidden, action_dim);
        let critic_net = Network::mlp(state_dim + action_dim, &cfg.hidden, 1);
        let actor = init_network(&actor_net, derive_seed(seed, &[1])).0;
        let q1 = init_network(&critic_net, derive_seed(seed, &[2])).0;
        let q2 = init_network(&critic_net, derive_seed(seed, &[3])).0;
        Ok(Td3Agent {
            actor_opt: Adam::new(actor.len(), cfg.lr),
            q1_opt: Adam::new(q1.len(), cfg.lr),
            q2_opt: Adam::new(q2.len(), cfg.lr),
            actor_target: actor.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            replay: ReplayBuffer::new(cfg.capacity),
            rng: rng_from(seed, &[4]),
            updates: 0,
            actor_net,
            critic_net,
            state_dim,
            action_dim,
            cfg,
        })
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::DimensionMismatch { expected: self.state_dim, actual: state.len() });
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy state".into()));
        }
        Ok(())
    }

    /// Deterministic actor output.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(self.actor_net.forward(&self.actor, state, 1).output().to_vec())
    }

    /// Raw action for environment step `step`. With exploration on, steps
    /// before warm-up draw uniformly from `[−1, 1]^d` and later steps add
    /// Gaussian noise to the actor output.
    pub fn select_raw(&self, state: &[f64], step: usize, explore: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if explore && step < self.cfg.warmup {
            return Ok((0..self.action_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect());
        }
        let mut raw = self.act(state)?;
        if explore {
            for x in &mut raw {
                let z: f64 = StandardNormal.sample(rng);
                *x += self.cfg.explore_noise * z;
            }
        }
        Ok(raw)
    }

    /// Raw action and its squashed defense action.
    pub fn select_action(
        &self,
        state: &[f64],
        step: usize,
        explore: bool,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Action)> {
        let raw = self.select_raw(state, step, explore, rng)?;
        let act = squash_action(&raw)?;
        Ok((raw, act))
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim {
            return Err(Error::DimensionMismatch { expected: self.state_dim, actual: t.state.len() });
        }
        if t.action.len() != self.action_dim {
            return Err(Error::DimensionMismatch { expected: self.action_dim, actual: t.action.len() });
        }
        self.replay.push(t);
        Ok(())
    }

    pub fn q_values(&self, q: &[f64], states: &[f64], actions: &[f64], n: usize) -> Vec<f64> {
        let x = concat_rows(states, self.state_dim, actions, self.action_dim, n);
        self.critic_net.forward(q, &x, n).output().to_vec()
    }

    /// One TD3 update on a uniformly drawn batch. Returns `None` while the
    /// replay buffer holds fewer than `batch_size` transitions.
    pub fn train_step(&mut self) -> Option<TrainStats> {
        let bs = self.cfg.batch_size;
        if self.replay.len() < bs {
            return None;
        }
        let (sd, ad) = (self.state_dim, self.action_dim);
        let batch = self.replay.sample(bs, &mut self.rng);
        let mut s = Vec::with_capacity(bs * sd);
        let mut a = Vec::with_capacity(bs * ad);
        let mut s2 = Vec::with_capacity(bs * sd);
        let mut r = Vec::with_capacity(bs);
        let mut done = Vec::with_capacity(bs);
        for t in &batch {
            s.extend_from_slice(&t.state);
            a.extend_from_slice(&t.action);
            s2.extend_from_slice(&t.next_state);
            r.push(t.reward);
            done.push(t.done);
        }

        let mut a2 = self.actor_net.forward(&self.actor_target, &s2, bs).output().to_vec();
        for x in &mut a2 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *x += (self.cfg.target_noise * z).clamp(-self.cfg.noise_clip, self.cfg.noise_clip);
        }
        let q1n = self.q_values(&self.q1_target, &s2, &a2, bs);
        let q2n = self.q_values(&self.q2_target, &s2, &a2, bs);
        let targets: Vec<f64> = (0..bs).map(|i| td3_target(r[i], done[i], self.cfg.gamma, q1n[i], q2n[i])).collect();

        let x = concat_rows(&s, sd, &a, ad, bs);
        let mut critic_loss = [0.0; 2];
        for (k, loss_out) in critic_loss.iter_mut().enumerate() {
            let params = if k == 0 { &self.q1 } else { &self.q2 };
            let trace = self.critic_net.forward(params, &x, bs);
            let q = trace.output();
            let mut loss = 0.0;
            let d: Vec<f64> = q
                .iter()
                .zip(&targets)
                .map(|(qi, yi)| {
                    loss += (qi - yi) * (qi - yi) / bs as f64;
                    2.0 * (qi - yi) / bs as f64
                })
                .collect();
            let grad = self.critic_net.backward(params, &trace, d, false).grad;
            if k == 0 {
                self.q1_opt.step(&mut self.q1, &grad);
            } else {
                self.q2_opt.step(&mut self.q2, &grad);
            }
            *loss_out = loss;
        }
        self.updates += 1;

        let mut actor_loss = None;
        if self.updates.is_multiple_of(self.cfg.policy_delay) {
            let trace_a = self.actor_net.forward(&self.actor, &s, bs);
            let pi = trace_a.output().to_vec();
            let xp = concat_rows(&s, sd, &pi, ad, bs);
            let trace_q = self.critic_net.forward(&self.q1, &xp, bs);
            actor_loss = Some(-trace_q.output().iter().sum::<f64>() / bs as f64);
            let back_q = self.critic_net.backward(&self.q1, &trace_q, vec![-1.0 / bs as f64; bs], true);
            let dx = &back_q.deltas[0];
            let mut da = Vec::with_capacity(bs * ad);
            for row in 0..bs {
                da.extend_from_slice(&dx[row * (sd + ad) + sd..(row + 1) * (sd + ad)]);
            }
            let grad = self.actor_net.backward(&self.actor, &trace_a, da, false).grad;
            self.actor_opt.step(&mut self.actor, &grad);
            let tau = self.cfg.tau;
            soft_update(&mut self.actor_target, &self.actor, tau);
            soft_update(&mut self.q1_target, &self.q1, tau);
            soft_update(&mut self.q2_target, &self.q2, tau);
        }
        Some(TrainStats { critic_loss, actor_loss, targets })
    }
}
