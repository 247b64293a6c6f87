//! The adaptive aggregation defense: cue scoring, thresholding, the
//! h-counter penalty and the TD3 policy that drives them.

use std::time::Instant;

use rayon::prelude::*;

use crate::cues::{build_cues, ClientEvidence, EnvState, Extractor, HistoryStore, EPS_S};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::fl::{CueRow, Defense, DefenseInput, DefenseOutput, StageTimes};
use crate::inversion::{batch_gradient_from_update, invert_gradients, InversionConfig};
use crate::params::ParamVector;
use crate::rl::{Td3Agent, Td3Config, Transition, ACTION_DIM};
use crate::rng::{derive_seed, rng_from, stream, Rng};

/// `ŵ_k = s_k · a`.
pub fn raw_scores(env: &EnvState, a: &[f64; 4]) -> Vec<f64> {
    env.rows.iter().map(|r| r.cues.iter().zip(a).map(|(s, w)| s * w).sum()).collect()
}

/// Zeroes masked cue columns.
pub fn mask_state(env: &EnvState, mask: &[bool; 4]) -> EnvState {
    let mut out = env.clone();
    for r in &mut out.rows {
        for (c, &m) in r.cues.iter_mut().zip(mask) {
            if m {
                *c = 0.0;
            }
        }
    }
    out
}

/// Zeroes masked cue weights and renormalizes the rest onto the simplex.
pub fn mask_weights(a: &[f64; 4], mask: &[bool; 4]) -> [f64; 4] {
    let mut out = *a;
    for j in 0..4 {
        if mask[j] {
            out[j] = 0.0;
        }
    }
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        for x in &mut out {
            *x /= s;
        }
    } else {
        let open = mask.iter().filter(|m| !**m).count().max(1) as f64;
        for j in 0..4 {
            out[j] = if mask[j] { 0.0 } else { 1.0 / open };
        }
    }
    out
}

/// Min-max map with floor `κ`, then normalization to sum 1. Equal scores map
/// to the uniform vector.
pub fn normalize_scores(w_hat: &[f64], kappa: f64) -> Vec<f64> {
    let n = w_hat.len();
    if n == 0 {
        return Vec::new();
    }
    let max = w_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = w_hat.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return vec![1.0 / n as f64; n];
    }
    let u: Vec<f64> = w_hat.iter().map(|w| (w - min + kappa) / (max - min + kappa)).collect();
    let s: f64 = u.iter().sum();
    u.iter().map(|x| x / s).collect()
}

/// `δ = max(w̃)·b`; entries `≤ δ` are zeroed and marked excluded.
pub fn apply_threshold(w_tilde: &[f64], b: f64) -> (Vec<f64>, Vec<bool>) {
    let delta = w_tilde.iter().copied().fold(f64::NEG_INFINITY, f64::max) * b;
    let mask: Vec<bool> = w_tilde.iter().map(|&w| w <= delta).collect();
    let w = w_tilde.iter().zip(&mask).map(|(&w, &m)| if m { 0.0 } else { w }).collect();
    (w, mask)
}

/// Excluded clients gain one; included ones lose one down to zero.
pub fn update_h(excluded: &[bool], clients: &[usize], h: &mut [u32]) {
    for (&ex, &c) in excluded.iter().zip(clients) {
        h[c] = if ex { h[c] + 1 } else { h[c].saturating_sub(1) };
    }
}

/// `Σ (e_k/Σe)·θ_k` with `e_k = w_k/λ^{h_k}`; keeps `global` when `Σe = 0`.
/// Returns the new model and the normalized effective weights.
pub fn penalized_aggregate(
    updates: &[&ParamVector],
    w: &[f64],
    h: &[u32],
    lambda: f64,
    global: &ParamVector,
) -> Result<(ParamVector, Vec<f64>)> {
    if updates.len() != w.len() || w.len() != h.len() {
        return Err(Error::DimensionMismatch { expected: updates.len(), actual: w.len().min(h.len()) });
    }
    let e: Vec<f64> = w.iter().zip(h).map(|(&wk, &hk)| wk / lambda.powi(hk as i32)).collect();
    let total: f64 = e.iter().sum();
    if !(total > 0.0) {
        return Ok((global.clone(), vec![0.0; e.len()]));
    }
    let norm: Vec<f64> = e.iter().map(|x| x / total).collect();
    let mut out = ParamVector::zeros(global.len());
    for (u, &c) in updates.iter().zip(&norm) {
        u.check_len(global.len())?;
        if c > 0.0 {
            out.axpy(c, u);
        }
    }
    Ok((out, norm))
}

/// `r = f(θ^t) − f(θ^{t+1})`.
pub fn compute_reward(prev_loss: f64, new_loss: f64) -> f64 {
    prev_loss - new_loss
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Gradient inversion, feature extraction and cue assembly for a round.
#[derive(Debug, Clone)]
pub struct CueEngine {
    pub extractor: Extractor,
    pub history: HistoryStore,
    pub inversion: InversionConfig,
}

/// Cues of one round plus the time spent on each stage.
#[derive(Debug, Clone)]
pub struct RoundCues {
    pub env: EnvState,
    pub invert_ms: f64,
    pub cues_ms: f64,
}

impl CueEngine {
    pub fn new(extractor: Extractor, clients: usize, inversion: InversionConfig) -> Self {
        CueEngine { extractor, history: HistoryStore::new(clients), inversion }
    }

    /// Inverts every usable upload and builds the cue matrix. Quarantined
    /// uploads and failed inversions get floor cues.
    pub fn observe(&mut self, input: &DefenseInput<'_>) -> Result<RoundCues> {
        let start = Instant::now();
        let fed = input.fed;
        let recs: Vec<Option<(f64, Batch)>> = (0..input.clients.len())
            .into_par_iter()
            .map(|i| {
                if input.quarantined[i] {
                    return None;
                }
                let client = input.clients[i];
                let target = batch_gradient_from_update(&input.updates[i], input.global, fed.lr).ok()?;
                if !target.is_finite() {
                    return None;
                }
                let seed = derive_seed(fed.seed, &[stream::INVERT, client as u64]);
                let rec = invert_gradients(&fed.model, &target, input.global, &self.inversion, seed).ok()?;
                Some((rec.s_r, rec.images))
            })
            .collect();
        let invert_ms = ms(start);

        let start = Instant::now();
        let mut evidence = Vec::with_capacity(recs.len());
        for (rec, &client) in recs.into_iter().zip(input.clients) {
            let ev = match rec {
                Some((s_r, images)) => match self.extractor.features(&images) {
                    Ok(f) => ClientEvidence { client, s_r, features: Some(f) },
                    Err(_) => ClientEvidence { client, s_r: EPS_S, features: None },
                },
                None => ClientEvidence { client, s_r: EPS_S, features: None },
            };
            evidence.push(ev);
        }
        let env = build_cues(&evidence, &mut self.history, None)?;
        Ok(RoundCues { env, invert_ms, cues_ms: ms(start) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaAggConfig {
    pub inversion: InversionConfig,
    /// Penalty base `λ ≥ 1`.
    pub lambda: f64,
    /// Floor of the min-max normalization.
    pub kappa: f64,
    /// Cue columns hidden from the policy and the scores.
    pub cue_mask: [bool; 4],
    pub td3: Td3Config,
    /// Update the policy online; when false the policy acts greedily and is
    /// never trained.
    pub train_policy: bool,
}

impl Default for AdaAggConfig {
    fn default() -> Self {
        AdaAggConfig {
            inversion: InversionConfig::default(),
            lambda: 2.0,
            kappa: 0.05,
            cue_mask: [false; 4],
            td3: Td3Config::default(),
            train_policy: true,
        }
    }
}

/// The full defense round: cues, policy action, thresholding, penalty and
/// reward bookkeeping.
pub struct AdaAgg {
    pub cfg: AdaAggConfig,
    pub cues: CueEngine,
    pub validation: Batch,
    pub agent: Option<Td3Agent>,
    rng: Rng,
    seed: u64,
    rounds: usize,
    step: usize,
    prev_loss: Option<f64>,
    pending: Option<(Vec<f64>, Vec<f64>, f64)>,
}

impl AdaAgg {
    pub fn new(cfg: AdaAggConfig, cues: CueEngine, validation: Batch, rounds: usize, seed: u64) -> Result<Self> {
        cfg.td3.validate()?;
        if !(cfg.lambda >= 1.0) {
            return Err(crate::error::invalid(format!("penalty base λ must be ≥ 1, got {}", cfg.lambda)));
        }
        if !(cfg.kappa > 0.0) {
            return Err(crate::error::invalid(format!("normalization floor κ must be positive, got {}", cfg.kappa)));
        }
        if validation.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        Ok(AdaAgg {
            cfg,
            cues,
            validation,
            agent: None,
            rng: rng_from(seed, &[stream::POLICY]),
            seed,
            rounds,
            step: 0,
            prev_loss: None,
            pending: None,
        })
    }

    /// Installs a pre-trained policy instead of a freshly initialized one.
    pub fn with_agent(mut self, agent: Td3Agent) -> Self {
        self.agent = Some(agent);
        self
    }

    fn agent_for(&mut self, state_dim: usize) -> Result<&mut Td3Agent> {
        if self.agent.as_ref().is_some_and(|a| a.state_dim != state_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.agent.as_ref().unwrap().state_dim,
                actual: state_dim,
            });
        }
        if self.agent.is_none() {
            let seed = derive_seed(self.seed, &[stream::POLICY, 1]);
            self.agent = Some(Td3Agent::new(state_dim, ACTION_DIM, self.cfg.td3.clone(), seed)?);
        }
        Ok(self.agent.as_mut().expect("just created"))
    }
}

impl Defense for AdaAgg {
    fn name(&self) -> &str {
        "adaagg"
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        let fed = input.fed;
        let round_cues = self.cues.observe(input)?;
        let env = mask_state(&round_cues.env, &self.cfg.cue_mask);

        let policy_start = Instant::now();
        if self.prev_loss.is_none() {
            self.prev_loss = Some(fed.model.evaluate(input.global, self.validation.all())?.0);
        }
        let state = env.flatten();
        let train = self.cfg.train_policy;
        let step = self.step;
        let pending = self.pending.take();
        let mut rng = std::mem::replace(&mut self.rng, rng_from(0, &[]));
        let agent = self.agent_for(state.len())?;
        if let (true, Some((s, a, r))) = (train, pending) {
            agent.push(Transition { state: s, action: a, reward: r, next_state: state.clone(), done: false })?;
            if step >= agent.cfg.warmup {
                agent.train_step();
            }
        }
        let selected = agent.select_action(&state, step, train, &mut rng);
        self.rng = rng;
        let (raw, action) = selected?;
        let policy_ms = ms(policy_start);

        let agg_start = Instant::now();
        let a = mask_weights(&action.a, &self.cfg.cue_mask);
        let scores = raw_scores(&env, &a);
        let w_tilde = normalize_scores(&scores, self.cfg.kappa);
        let (mut w, mut excluded) = apply_threshold(&w_tilde, action.b);
        // env rows are in score order; map back to sampled positions
        let pos_of =
            |client: usize| input.clients.iter().position(|&c| c == client).expect("cue row for a sampled client");
        let mut w_by_pos = vec![0.0; input.clients.len()];
        let mut ex_by_pos = vec![false; input.clients.len()];
        let mut wt_by_pos = vec![0.0; input.clients.len()];
        for (k, row) in env.rows.iter().enumerate() {
            let p = pos_of(row.client);
            if input.quarantined[p] {
                w[k] = 0.0;
                excluded[k] = true;
            }
            w_by_pos[p] = w[k];
            ex_by_pos[p] = excluded[k];
            wt_by_pos[p] = w_tilde[k];
        }
        let h = &mut self.cues.history.h;
        update_h(&ex_by_pos, input.clients, h);
        let h_sampled: Vec<u32> = input.clients.iter().map(|&c| h[c]).collect();
        let refs: Vec<&ParamVector> = input.updates.iter().collect();
        let (global, _) = penalized_aggregate(&refs, &w_by_pos, &h_sampled, self.cfg.lambda, input.global)?;
        let agg_ms = ms(agg_start);

        let reward_start = Instant::now();
        let new_loss = fed.model.evaluate(&global, self.validation.all())?.0;
        let reward = compute_reward(self.prev_loss.expect("set above"), new_loss);
        self.prev_loss = Some(new_loss);
        let last = input.round + 1 >= self.rounds;
        if train {
            if last {
                let agent = self.agent.as_mut().expect("created above");
                agent.push(Transition { state: state.clone(), action: raw, reward, next_state: state, done: true })?;
            } else {
                self.pending = Some((state, raw, reward));
            }
        }
        self.step += 1;
        let policy_ms = policy_ms + ms(reward_start);

        let cue_by_client =
            |c: usize| round_cues.env.rows.iter().find(|r| r.client == c).map(|r| r.cues).unwrap_or([EPS_S; 4]);
        let rows = input
            .clients
            .iter()
            .enumerate()
            .map(|(p, &c)| CueRow {
                client: c,
                is_malicious: fed.is_malicious(c),
                cues: cue_by_client(c),
                w_tilde: Some(wt_by_pos[p]),
                excluded: ex_by_pos[p],
                h: self.cues.history.h[c],
            })
            .collect();
        let excluded_ids = input.clients.iter().zip(&ex_by_pos).filter(|(_, &e)| e).map(|(&c, _)| c).collect();
        Ok(DefenseOutput {
            global,
            excluded: excluded_ids,
            reward: Some(reward),
            cues: rows,
            times: StageTimes {
                local_ms: 0.0,
                invert_ms: round_cues.invert_ms,
                cues_ms: round_cues.cues_ms,
                policy_ms,
                agg_ms,
            },
        })
    }
}

/// Wraps a baseline defense and logs cues passively.
pub struct Observed<D> {
    pub inner: D,
    pub cues: CueEngine,
}

impl<D: Defense> Defense for Observed<D> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        let rc = self.cues.observe(input)?;
        let mut out = self.inner.aggregate(input)?;
        out.times.invert_ms += rc.invert_ms;
        out.times.cues_ms += rc.cues_ms;
        out.cues = input
            .clients
            .iter()
            .map(|&c| CueRow {
                client: c,
                is_malicious: input.fed.is_malicious(c),
                cues: rc.env.rows.iter().find(|r| r.client == c).map(|r| r.cues).unwrap_or([EPS_S; 4]),
                w_tilde: None,
                excluded: out.excluded.contains(&c),
                h: self.cues.history.h[c],
            })
            .collect();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cues::CueEntry;
    use crate::fl::tests_support::small_federation;
    use crate::fl::{sample_round, weighted_aggregate, Attack, AttackContext, FedAvg, Federation, NoAttack, RoundPlan};
    use crate::model::{init_network, Model, ModelSpec, Network};
    use proptest::prelude::*;

    fn env(rows: &[[f64; 4]]) -> EnvState {
        EnvState { rows: rows.iter().enumerate().map(|(i, r)| CueEntry { client: i, cues: *r }).collect() }
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn raw_score_reference_values() {
        let e = env(&[[0.9, 0.8, 0.7, 0.6], [0.2, 0.5, 0.5, 0.5]]);
        assert_eq!(raw_scores(&e, &[1.0, 0.0, 0.0, 0.0]), vec![0.9, 0.2]);
        assert!((raw_scores(&e, &[0.25; 4])[0] - 0.75).abs() < 1e-15);
        let same = env(&[[0.3, 0.4, 0.5, 0.6]; 3]);
        let s = raw_scores(&same, &[0.1, 0.2, 0.3, 0.4]);
        assert!(s.iter().all(|&x| x == s[0]));
    }

    #[test]
    fn normalization_reference_values() {
        assert_eq!(normalize_scores(&[0.5, 0.5, 0.5], 0.05), vec![1.0 / 3.0; 3]);
        let w = normalize_scores(&[0.2, 0.8], 0.05);
        // u = (0.05/0.65, 1)
        let u0: f64 = 0.05 / 0.65;
        assert!((u0 - 0.0769).abs() < 1e-4);
        assert!((w[0] - u0 / (1.0 + u0)).abs() < 1e-12);
        assert!((w[0] - 0.0714).abs() < 1e-4 && (w[1] - 0.9286).abs() < 1e-4);
    }

    #[test]
    fn threshold_reference_values() {
        let (w, m) = apply_threshold(&[0.7, 0.3], 0.5);
        assert_eq!((w, m), (vec![0.7, 0.0], vec![false, true]));
        let (w, m) = apply_threshold(&[0.6, 0.4], 0.0);
        assert_eq!((w, m), (vec![0.6, 0.4], vec![false, false]));
        let (w, m) = apply_threshold(&[0.6, 0.4], 1.0);
        assert_eq!((w, m), (vec![0.0, 0.0], vec![true, true]));
    }

    #[test]
    fn h_reference_values() {
        let mut h = vec![0, 3, 0, 5];
        update_h(&[true, false, false], &[0, 1, 2], &mut h);
        assert_eq!(h, vec![1, 2, 0, 5]);
    }

    #[test]
    fn penalty_reference_values() {
        let g = pv(&[9.0, 9.0]);
        let (a, b) = (pv(&[0.0, 3.0]), pv(&[3.0, 0.0]));
        let (out, e) = penalized_aggregate(&[&a, &b], &[0.5, 0.5], &[1, 0], 2.0, &g).unwrap();
        assert!((e[0] - 1.0 / 3.0).abs() < 1e-15 && (e[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(out.sub(&pv(&[2.0, 1.0])).norm() < 1e-12);
        let (out, _) = penalized_aggregate(&[&a, &b], &[0.0, 0.0], &[0, 0], 2.0, &g).unwrap();
        assert_eq!(out, g);
        let (out, _) = penalized_aggregate(&[&a, &b], &[0.3, 0.7], &[4, 1], 1.0, &g).unwrap();
        assert_eq!(out, weighted_aggregate(&[&a, &b], &[0.3, 0.7]).unwrap());
    }

    #[test]
    fn reward_reference_values() {
        assert!((compute_reward(0.9, 0.7) - 0.2).abs() < 1e-15);
        assert_eq!(compute_reward(0.5, 0.5), 0.0);
        assert!((compute_reward(0.5, 0.9) + 0.4).abs() < 1e-15);
    }

    #[test]
    fn masking_zeroes_a_column_and_renormalizes_weights() {
        let e = env(&[[0.9, 0.8, 0.7, 0.6]]);
        let mask = [false, true, false, false];
        assert_eq!(mask_state(&e, &mask).rows[0].cues, [0.9, 0.0, 0.7, 0.6]);
        let a = mask_weights(&[0.1, 0.5, 0.2, 0.2], &mask);
        assert!((a[0] - 0.2).abs() < 1e-15 && a[1] == 0.0 && (a[2] - 0.4).abs() < 1e-15);
        assert_eq!(mask_weights(&[0.0, 1.0, 0.0, 0.0], &mask), [1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    fn extractor_for(fed: &Federation) -> crate::cues::Extractor {
        let d = fed.model.spec.input.size();
        let net = Network::mlp(d, &[8], fed.model.spec.classes);
        let params = init_network(&net, 3);
        let model = Model::from_network(ModelSpec { feature_width: 8, ..fed.model.spec }, net);
        crate::cues::Extractor { model, params }
    }

    fn adaagg(fed: &Federation, cfg: AdaAggConfig) -> AdaAgg {
        let inversion = InversionConfig { images: 4, max_iters: 5, ..Default::default() };
        let cues = CueEngine::new(extractor_for(fed), fed.assignment.clients(), inversion);
        AdaAgg::new(AdaAggConfig { inversion, ..cfg }, cues, fed.test.clone(), fed.rounds, fed.seed).unwrap()
    }

    fn small_td3() -> Td3Config {
        Td3Config { hidden: vec![16, 16], batch_size: 2, warmup: 2, ..Td3Config::default() }
    }

    struct NanAttack;

    impl Attack for NanAttack {
        fn name(&self) -> &str {
            "nan"
        }
        fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>> {
            Ok(vec![ParamVector(vec![f64::NAN; ctx.global.len()]); ctx.attackers.len()])
        }
    }

    #[test]
    fn nan_uploads_get_zero_weight_and_a_penalty() {
        let fed = small_federation(4, 1, 2);
        let mut def = adaagg(&fed, AdaAggConfig { td3: small_td3(), ..Default::default() });
        let g = fed.model.init(0);
        let plan = RoundPlan { round: 0, clients: vec![0, 1, 2, 3], seed: 2 };
        let (next, rec) = fed.run_round(&g, None, &plan, &mut NanAttack, &mut def).unwrap();
        assert!(next.is_finite());
        assert!(rec.excluded.contains(&0));
        let row = rec.cues.iter().find(|r| r.client == 0).unwrap();
        assert!(row.excluded && row.h == 1);
        assert_eq!(row.cues, [EPS_S; 4]);
        assert_eq!(rec.quarantined, vec![0]);
    }

    #[test]
    fn defense_rounds_are_reproducible() {
        let fed = small_federation(6, 2, 4);
        let run = || {
            let mut def = adaagg(&fed, AdaAggConfig { td3: small_td3(), ..Default::default() });
            let mut g = fed.model.init(1);
            let mut recs = vec![];
            for t in 0..5 {
                let plan = sample_round(6, 0.5, t, fed.seed).unwrap();
                let (next, rec) =
                    fed.run_round(&g, None, &plan, &mut crate::attacks::Ipm { eps: 1.0 }, &mut def).unwrap();
                g = next;
                recs.push(rec);
            }
            let replay = &def.agent.as_ref().unwrap().replay;
            let dones: Vec<bool> = (0..replay.len()).map(|i| replay.get(i).unwrap().done).collect();
            (g, recs, dones)
        };
        let a = run();
        assert_eq!(a, run());
        // one transition per round; only the final round is terminal
        assert_eq!(a.2, vec![false, false, false, false, true]);
    }

    #[test]
    fn zero_threshold_policy_tracks_fedavg_without_attackers() {
        let fed = small_federation(6, 0, 6);
        let mut def = adaagg(&fed, AdaAggConfig { td3: small_td3(), train_policy: false, ..Default::default() });
        // greedy policy with uniform cue weights and b = sigmoid(−30)
        let state_dim = 4 * 3;
        let mut agent = Td3Agent::new(state_dim, ACTION_DIM, small_td3(), 0).unwrap();
        let last = agent.actor_net.blocks().last().unwrap().clone();
        let weight = agent.actor_net.blocks()[agent.actor_net.blocks().len() - 2].clone();
        agent.actor[weight.start..weight.start + weight.len].fill(0.0);
        agent.actor[last.start..last.start + last.len].copy_from_slice(&[0.0, 0.0, 0.0, 0.0, -30.0]);
        def = def.with_agent(agent);
        let (mut g, mut f) = (fed.model.init(2), fed.model.init(2));
        let mut acc = (0.0, 0.0);
        for t in 0..5 {
            let plan = sample_round(6, 0.5, t, fed.seed).unwrap();
            let (ng, ra) = fed.run_round(&g, None, &plan, &mut NoAttack, &mut def).unwrap();
            let (nf, rf) = fed.run_round(&f, None, &plan, &mut NoAttack, &mut FedAvg).unwrap();
            assert!(ra.excluded.is_empty());
            (g, f) = (ng, nf);
            acc = (ra.test_acc, rf.test_acc);
        }
        assert!((acc.0 - acc.1).abs() <= 0.05, "{acc:?}");
    }

    fn simplex() -> impl Strategy<Value = [f64; 4]> {
        prop::collection::vec(0.01f64..1.0, 4).prop_map(|v| {
            let s: f64 = v.iter().sum();
            [v[0] / s, v[1] / s, v[2] / s, v[3] / s]
        })
    }

    fn cue_rows() -> impl Strategy<Value = Vec<[f64; 4]>> {
        prop::collection::vec(prop::collection::vec(EPS_S..=1.0, 4).prop_map(|v| [v[0], v[1], v[2], v[3]]), 1..10)
    }

    proptest! {
        #[test]
        fn scores_lie_in_unit_interval(rows in cue_rows(), a in simplex()) {
            for s in raw_scores(&env(&rows), &a) {
                prop_assert!(s > 0.0 && s <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn normalization_is_positive_and_order_preserving(w in prop::collection::vec(0.0f64..1.0, 1..10)) {
            let t = normalize_scores(&w, 0.05);
            prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(t.iter().all(|&x| x > 0.0));
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if w[i] < w[j] {
                        prop_assert!(t[i] < t[j]);
                    }
                }
            }
        }

        #[test]
        fn exclusion_grows_with_b(w in prop::collection::vec(0.0f64..1.0, 1..10), b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0) {
            let t = normalize_scores(&w, 0.05);
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let (_, m_lo) = apply_threshold(&t, lo);
            let (_, m_hi) = apply_threshold(&t, hi);
            for (a, b) in m_lo.iter().zip(&m_hi) {
                prop_assert!(!*a || *b);
            }
        }

        #[test]
        fn h_moves_by_at_most_one_and_stays_non_negative(
            h0 in prop::collection::vec(0u32..5, 8),
            mask in prop::collection::vec(any::<bool>(), 4),
        ) {
            let clients = [1usize, 3, 4, 6];
            let mut h = h0.clone();
            update_h(&mask, &clients, &mut h);
            for c in 0..8 {
                let d = h[c] as i64 - h0[c] as i64;
                match clients.iter().position(|&x| x == c) {
                    None => prop_assert_eq!(d, 0),
                    Some(k) if mask[k] => prop_assert_eq!(d, 1),
                    Some(_) => prop_assert!(d == -1 || (d == 0 && h0[c] == 0)),
                }
            }
        }

        #[test]
        fn effective_weights_are_a_distribution(
            w in prop::collection::vec(0.0f64..1.0, 1..8),
            h in prop::collection::vec(0u32..6, 8),
            lambda in 1.0f64..4.0,
        ) {
            let ups: Vec<ParamVector> = (0..w.len()).map(|i| pv(&[i as f64, 1.0])).collect();
            let refs: Vec<&ParamVector> = ups.iter().collect();
            let g = pv(&[0.0, 0.0]);
            let (_, e) = penalized_aggregate(&refs, &w, &h[..w.len()], lambda, &g).unwrap();
            prop_assert!(e.iter().all(|&x| x >= 0.0));
            if w.iter().any(|&x| x > 0.0) {
                prop_assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn unit_lambda_is_thresholded_fedavg(
            scores in prop::collection::vec(0.0f64..1.0, 2..8),
            b in 0.0f64..0.9,
            h in prop::collection::vec(0u32..6, 8),
        ) {
            let ups: Vec<ParamVector> = (0..scores.len()).map(|i| pv(&[i as f64, (i * i) as f64])).collect();
            let refs: Vec<&ParamVector> = ups.iter().collect();
            let (w, _) = apply_threshold(&normalize_scores(&scores, 0.05), b);
            let g = pv(&[0.0, 0.0]);
            let (out, _) = penalized_aggregate(&refs, &w, &h[..w.len()], 1.0, &g).unwrap();
            prop_assert_eq!(out, weighted_aggregate(&refs, &w).unwrap());
        }
    }
}
