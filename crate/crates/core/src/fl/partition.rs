//! Label-skewed partitioning and per-round client sampling.

use rand::seq::{index::sample, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, stream, Rng};

const MAX_ATTEMPTS: usize = 10;

/// Which training samples each client holds. Clients `0..n_malicious` are the
/// attackers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub shards: Vec<Vec<usize>>,
    pub n_malicious: usize,
}

impl ShardAssignment {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    pub fn is_malicious(&self, client: usize) -> bool {
        client < self.n_malicious
    }

    pub fn with_malicious(mut self, n_malicious: usize) -> Result<Self> {
        if n_malicious > self.shards.len() {
            return Err(invalid(format!("{n_malicious} malicious clients but only {} clients", self.shards.len())));
        }
        self.n_malicious = n_malicious;
        Ok(self)
    }
}

/// Splits samples over `clients` clients arranged in `classes` groups.
///
/// A sample with label `l` goes to group `l` with probability `q` and to each
/// other group with probability `(1 − q)/(M − 1)`; inside a group it lands on a
/// uniformly chosen member. Groups are formed round-robin over a seeded shuffle
/// of client ids. An assignment that leaves a client empty is redrawn with a
/// derived seed.
pub fn partition_noniid(
    labels: &[usize],
    clients: usize,
    q: f64,
    classes: usize,
    seed: u64,
) -> Result<ShardAssignment> {
    if classes < 2 {
        return Err(invalid("partitioning needs at least two classes"));
    }
    let lo = 1.0 / classes as f64;
    if !(q >= lo - 1e-12 && q <= 1.0) {
        return Err(invalid(format!("q = {q} outside [1/M, 1] = [{lo}, 1]")));
    }
    if clients < classes {
        return Err(invalid(format!("need at least as many clients ({clients}) as classes ({classes})")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(invalid(format!("label {bad} outside [0, {classes})")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng: Rng = rng_from(seed, &[stream::PARTITION, attempt as u64]);
        let mut ids: Vec<usize> = (0..clients).collect();
        ids.shuffle(&mut rng);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (pos, &id) in ids.iter().enumerate() {
            groups[pos % classes].push(id);
        }
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for (i, &label) in labels.iter().enumerate() {
            let group = if rng.gen::<f64>() < q {
                label
            } else {
                // uniform over the other M − 1 groups
                let g = rng.gen_range(0..classes - 1);
                if g >= label {
                    g + 1
                } else {
                    g
                }
            };
            let members = &groups[group];
            shards[members[rng.gen_range(0..members.len())]].push(i);
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(ShardAssignment { shards, n_malicious: 0 });
        }
    }
    Err(Error::Partition { attempts: MAX_ATTEMPTS, reason: "some client received no samples".into() })
}

/// Clients taking part in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    /// Sorted, unique client ids.
    pub clients: Vec<usize>,
    pub seed: u64,
}

/// Number of clients sampled per round, `⌈fraction·K⌉`.
pub fn clients_per_round(clients: usize, fraction: f64) -> usize {
    // tolerate representation error such as (1/3)·30 = 10.000000000000002
    ((fraction * clients as f64) - 1e-9).ceil().clamp(1.0, clients as f64) as usize
}

pub fn sample_round(clients: usize, fraction: f64, round: usize, seed: u64) -> Result<RoundPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("sample fraction {fraction} outside (0, 1]")));
    }
    if clients == 0 {
        return Err(Error::Empty("client set"));
    }
    let m = clients_per_round(clients, fraction);
    let mut rng: Rng = rng_from(seed, &[stream::SAMPLE, round as u64]);
    let mut ids = sample(&mut rng, clients, m).into_vec();
    ids.sort_unstable();
    Ok(RoundPlan { round, clients: ids, seed })
}
