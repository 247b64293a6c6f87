//! The generic round loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::partition::{RoundPlan, ShardAssignment};
use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::params::ParamVector;
use crate::rng::{derive_seed, stream};

/// How many SGD steps a client runs per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalSchedule {
    /// Whole passes over the shard, `⌈n_k / batch⌉` steps each.
    Epochs(usize),
    Steps(usize),
}

impl LocalSchedule {
    pub fn steps(&self, shard_len: usize, batch_size: usize) -> usize {
        match *self {
            LocalSchedule::Epochs(e) => e * shard_len.div_ceil(batch_size.max(1)),
            LocalSchedule::Steps(s) => s,
        }
    }
}

/// Everything about a simulated federation that stays fixed across rounds.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: Model,
    pub train: Batch,
    pub assignment: ShardAssignment,
    pub test: Batch,
    /// Client learning rate α.
    pub lr: f64,
    pub schedule: LocalSchedule,
    pub batch_size: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Record per-stage wall times; when off every time is written as zero.
    pub timing: bool,
}

impl Federation {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid(format!("client learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.test.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let n = self.train.len();
        if self.assignment.shards.iter().flatten().any(|&i| i >= n) {
            return Err(invalid("shard index outside the training set"));
        }
        Ok(())
    }

    pub fn is_malicious(&self, client: usize) -> bool {
        self.assignment.is_malicious(client)
    }

    /// Honest local training of `client` starting from `global`.
    pub fn local_update(&self, global: &ParamVector, client: usize, round: usize) -> Result<ParamVector> {
        self.train_on(global, &self.assignment.shards[client], client, round, None)
    }

    /// Local training on `client`'s shard, optionally relabelling every sample.
    pub fn train_on(
        &self,
        global: &ParamVector,
        indices: &[usize],
        client: usize,
        round: usize,
        relabel: Option<&dyn Fn(usize) -> usize>,
    ) -> Result<ParamVector> {
        let seed = derive_seed(self.seed, &[stream::LOCAL, round as u64, client as u64]);
        let steps = self.schedule.steps(indices.len(), self.batch_size);
        match relabel {
            None => self.model.local_train(global, self.train.shard(indices), self.lr, steps, self.batch_size, seed),
            Some(f) => {
                let mut local = self.train.gather(indices);
                for l in &mut local.labels {
                    *l = f(*l);
                }
                self.model.local_train(global, local.all(), self.lr, steps, self.batch_size, seed)
            }
        }
    }
}

/// What an attacker knows when crafting its upload.
pub struct AttackContext<'a> {
    pub fed: &'a Federation,
    pub round: usize,
    pub global: &'a ParamVector,
    /// Global model of the previous round, if any.
    pub prev_global: Option<&'a ParamVector>,
    /// Sampled malicious client ids.
    pub attackers: &'a [usize],
    pub sampled: usize,
    /// Honest uploads of the sampled benign clients. When none were sampled the
    /// attackers' own honest updates stand in.
    pub benign: &'a [ParamVector],
}

impl AttackContext<'_> {
    /// Mean of the benign batch gradients `(θ − θ_k)/α`.
    pub fn mean_benign_gradient(&self) -> Result<ParamVector> {
        if self.benign.is_empty() {
            return Err(Error::Empty("benign updates"));
        }
        let mut m = ParamVector::zeros(self.global.len());
        let c = 1.0 / (self.benign.len() as f64 * self.fed.lr);
        for b in self.benign {
            b.check_len(m.len())?;
            m.axpy(c, self.global);
            m.axpy(-c, b);
        }
        Ok(m)
    }

    /// Parameters whose encoded gradient is `g`: `θ − α·g`.
    pub fn upload_for_gradient(&self, g: &ParamVector) -> ParamVector {
        let mut up = self.global.clone();
        up.axpy(-self.fed.lr, g);
        up
    }
}

/// A poisoning strategy run by the sampled malicious clients.
pub trait Attack: Send {
    fn name(&self) -> &str;
    /// One upload per entry of `ctx.attackers`.
    fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>>;
    /// Feedback after the round's global model is evaluated.
    fn observe(&mut self, _round: usize, _test_acc: f64) {}
}

/// Malicious clients behave honestly.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoAttack;

impl Attack for NoAttack {
    fn name(&self) -> &str {
        "none"
    }

    fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>> {
        ctx.attackers.iter().map(|&c| ctx.fed.local_update(ctx.global, c, ctx.round)).collect()
    }
}

/// Per-client cue values and defense decisions for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueRow {
    pub client: usize,
    pub is_malicious: bool,
    /// `(S_R, S_cl, S_cg, S_lg)`.
    pub cues: [f64; 4],
    /// Normalized score, when the defense computes one.
    pub w_tilde: Option<f64>,
    pub excluded: bool,
    pub h: u32,
}

/// Inputs handed to an aggregation rule.
pub struct DefenseInput<'a> {
    pub fed: &'a Federation,
    pub round: usize,
    pub global: &'a ParamVector,
    pub clients: &'a [usize],
    /// Uploads aligned with `clients`; quarantined entries hold the global.
    pub updates: &'a [ParamVector],
    pub quarantined: &'a [bool],
}

impl DefenseInput<'_> {
    pub fn malicious_sampled(&self) -> usize {
        self.clients.iter().filter(|&&c| self.fed.is_malicious(c)).count()
    }

    /// Positions of uploads that passed the finiteness check.
    pub fn usable(&self) -> Vec<usize> {
        (0..self.clients.len()).filter(|&i| !self.quarantined[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub local_ms: f64,
    pub invert_ms: f64,
    pub cues_ms: f64,
    pub policy_ms: f64,
    pub agg_ms: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.local_ms + self.invert_ms + self.cues_ms + self.policy_ms + self.agg_ms
    }
}

#[derive(Debug, Clone)]
pub struct DefenseOutput {
    pub global: ParamVector,
    pub excluded: Vec<usize>,
    pub reward: Option<f64>,
    pub cues: Vec<CueRow>,
    /// Inversion, cue, policy and aggregation times; `local_ms` is ignored.
    pub times: StageTimes,
}

impl DefenseOutput {
    pub fn plain(global: ParamVector, excluded: Vec<usize>) -> Self {
        DefenseOutput { global, excluded, reward: None, cues: Vec::new(), times: StageTimes::default() }
    }
}

/// An aggregation rule. Implementations fill `times` for the stages they run
/// beyond plain aggregation.
pub trait Defense: Send {
    fn name(&self) -> &str;
    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput>;
}

impl<D: Defense + ?Sized> Defense for Box<D> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        (**self).aggregate(input)
    }
}

/// Uniform mean of the usable uploads.
#[derive(Debug, Default, Clone, Copy)]
pub struct FedAvg;

impl Defense for FedAvg {
    fn name(&self) -> &str {
        "fedavg"
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        let usable = input.usable();
        if usable.is_empty() {
            return Ok(DefenseOutput::plain(input.global.clone(), Vec::new()));
        }
        let refs: Vec<&ParamVector> = usable.iter().map(|&i| &input.updates[i]).collect();
        let global = super::weighted_aggregate(&refs, &vec![1.0; refs.len()])?;
        Ok(DefenseOutput::plain(global, Vec::new()))
    }
}

/// Metrics of one completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_acc: f64,
    pub test_loss: f64,
    pub reward: Option<f64>,
    pub excluded: Vec<usize>,
    pub quarantined: Vec<usize>,
    pub times: StageTimes,
    /// Wall time of the round from local training to aggregation, without the
    /// test-set evaluation.
    pub wall_ms: f64,
    pub cues: Vec<CueRow>,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

impl Federation {
    /// One round: honest clients train, sampled attackers craft uploads,
    /// non-finite uploads are quarantined and the defense aggregates.
    pub fn run_round(
        &self,
        global: &ParamVector,
        prev_global: Option<&ParamVector>,
        plan: &RoundPlan,
        attack: &mut dyn Attack,
        defense: &mut dyn Defense,
    ) -> Result<(ParamVector, RoundRecord)> {
        global.check_len(self.model.num_params())?;
        if let Some(&bad) = plan.clients.iter().find(|&&c| c >= self.assignment.clients()) {
            return Err(invalid(format!("sampled client {bad} outside the federation")));
        }
        let round_start = Instant::now();
        let t = plan.round;

        let local_start = Instant::now();
        let (attackers, honest): (Vec<usize>, Vec<usize>) = plan.clients.iter().partition(|&&c| self.is_malicious(c));
        let honest_updates: Vec<Result<ParamVector>> =
            honest.par_iter().map(|&c| self.local_update(global, c, t)).collect();
        let mut uploads: Vec<Option<ParamVector>> = Vec::with_capacity(honest.len());
        for u in honest_updates {
            match u {
                Ok(p) => uploads.push(Some(p)),
                Err(Error::NonFinite(_)) => uploads.push(None),
                Err(e) => return Err(e),
            }
        }
        let mut benign: Vec<ParamVector> = uploads.iter().flatten().cloned().collect();
        if benign.is_empty() && !attackers.is_empty() {
            let proxies: Vec<Result<ParamVector>> =
                attackers.par_iter().map(|&c| self.local_update(global, c, t)).collect();
            for p in proxies {
                match p {
                    Ok(p) => benign.push(p),
                    Err(Error::NonFinite(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let crafted = if attackers.is_empty() {
            Vec::new()
        } else {
            let ctx = AttackContext {
                fed: self,
                round: t,
                global,
                prev_global,
                attackers: &attackers,
                sampled: plan.clients.len(),
                benign: &benign,
            };
            let crafted = attack.craft(&ctx)?;
            if crafted.len() != attackers.len() {
                return Err(invalid(format!(
                    "attack {} returned {} uploads for {} attackers",
                    attack.name(),
                    crafted.len(),
                    attackers.len()
                )));
            }
            crafted
        };
        let local_ms = elapsed_ms(local_start);

        // restore sampled order
        let mut by_client: Vec<(usize, Option<ParamVector>)> = honest.into_iter().zip(uploads).collect();
        by_client.extend(attackers.into_iter().zip(crafted.into_iter().map(Some)));
        by_client.sort_by_key(|(c, _)| *c);
        let clients: Vec<usize> = by_client.iter().map(|(c, _)| *c).collect();
        let mut quarantined = Vec::with_capacity(clients.len());
        let mut updates = Vec::with_capacity(clients.len());
        for (_, up) in by_client {
            match up {
                Some(p) if p.len() == global.len() && p.is_finite() => {
                    quarantined.push(false);
                    updates.push(p);
                }
                _ => {
                    quarantined.push(true);
                    updates.push(global.clone());
                }
            }
        }

        let agg_start = Instant::now();
        let input = DefenseInput {
            fed: self,
            round: t,
            global,
            clients: &clients,
            updates: &updates,
            quarantined: &quarantined,
        };
        let out = defense.aggregate(&input)?;
        let defense_ms = elapsed_ms(agg_start);
        out.global.check_len(global.len())?;
        out.global.ensure_finite("aggregated global model")?;
        let wall_ms = elapsed_ms(round_start);

        let (test_loss, test_acc) = self.model.evaluate(&out.global, self.test.all())?;
        attack.observe(t, test_acc);

        let mut times = out.times;
        times.local_ms = local_ms;
        // whatever the defense did not attribute counts as aggregation
        let attributed = times.invert_ms + times.cues_ms + times.policy_ms + times.agg_ms;
        times.agg_ms += (defense_ms - attributed).max(0.0);
        let (times, wall_ms) = if self.timing { (times, wall_ms) } else { (StageTimes::default(), 0.0) };
        let quarantined_ids = clients.iter().zip(&quarantined).filter(|(_, &q)| q).map(|(&c, _)| c).collect();
        let record = RoundRecord {
            round: t,
            test_acc,
            test_loss,
            reward: out.reward,
            excluded: out.excluded,
            quarantined: quarantined_ids,
            times,
            wall_ms,
            cues: out.cues,
        };
        Ok((out.global, record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::sample_round;
    use crate::fl::tests_support::small_federation;

    /// Scripted attack returning fixed uploads.
    struct Fixed(Vec<f64>);

    impl Attack for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn craft(&mut self, ctx: &AttackContext<'_>) -> Result<Vec<ParamVector>> {
            Ok(vec![ParamVector::from_vec(self.0.clone()); ctx.attackers.len()])
        }
    }

    #[test]
    fn schedule_counts_steps() {
        assert_eq!(LocalSchedule::Epochs(1).steps(200, 32), 7);
        assert_eq!(LocalSchedule::Epochs(2).steps(64, 32), 4);
        assert_eq!(LocalSchedule::Steps(3).steps(1000, 32), 3);
    }

    #[test]
    fn no_attackers_with_fedavg_matches_a_plain_loop() {
        let fed = small_federation(6, 0, 3);
        let mut g = fed.model.init(1);
        let mut reference = g.clone();
        for t in 0..3 {
            let plan = sample_round(6, 0.5, t, fed.seed).unwrap();
            let before = g.clone();
            let (next, rec) = fed.run_round(&g, None, &plan, &mut NoAttack, &mut FedAvg).unwrap();
            assert_eq!(g, before, "input global must not change");
            let ups: Vec<ParamVector> =
                plan.clients.iter().map(|&c| fed.local_update(&reference, c, t).unwrap()).collect();
            let mut mean = ParamVector::zeros(reference.len());
            for u in &ups {
                mean.axpy(1.0 / ups.len() as f64, u);
            }
            reference = mean;
            assert_eq!(next, reference);
            assert!((0.0..=1.0).contains(&rec.test_acc));
            g = next;
        }
    }

    #[test]
    fn non_finite_uploads_are_quarantined() {
        let fed = small_federation(4, 2, 5);
        let g = fed.model.init(0);
        let plan = RoundPlan { round: 0, clients: vec![0, 1, 2, 3], seed: 5 };
        let mut attack = Fixed(vec![f64::NAN; g.len()]);
        let (next, rec) = fed.run_round(&g, None, &plan, &mut attack, &mut FedAvg).unwrap();
        assert_eq!(rec.quarantined, vec![0, 1]);
        let mut mean = ParamVector::zeros(g.len());
        for c in [2, 3] {
            mean.axpy(0.5, &fed.local_update(&g, c, 0).unwrap());
        }
        assert_eq!(next, mean);
    }

    #[test]
    fn records_are_reproducible() {
        let fed = small_federation(6, 2, 8);
        let run = || {
            let mut g = fed.model.init(2);
            let mut recs = vec![];
            for t in 0..3 {
                let plan = sample_round(6, 0.5, t, fed.seed).unwrap();
                let (next, rec) = fed.run_round(&g, None, &plan, &mut NoAttack, &mut FedAvg).unwrap();
                g = next;
                recs.push(rec);
            }
            (g, recs)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn out_of_range_client_is_rejected() {
        let fed = small_federation(4, 0, 1);
        let g = fed.model.init(0);
        let plan = RoundPlan { round: 0, clients: vec![7], seed: 0 };
        assert!(fed.run_round(&g, None, &plan, &mut NoAttack, &mut FedAvg).is_err());
    }
}
