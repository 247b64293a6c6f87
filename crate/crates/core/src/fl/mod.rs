//! Federated-learning engine: partitioning, sampling, aggregation and the
//! round loop that attacks and defenses plug into.

mod engine;
mod partition;

pub use engine::{
    Attack, AttackContext, CueRow, Defense, DefenseInput, DefenseOutput, FedAvg, Federation, LocalSchedule, NoAttack,
    RoundRecord, StageTimes,
};
pub use partition::{clients_per_round, partition_noniid, sample_round, RoundPlan, ShardAssignment};

use crate::error::{invalid, Error, Result};
use crate::params::ParamVector;

/// `Σ (w_i / Σw)·θ_i`.
pub fn weighted_aggregate(updates: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    if updates.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: updates.len(), actual: weights.len() });
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(invalid(format!("aggregation weight {w} is not a finite non-negative number")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    let len = updates[0].len();
    let mut out = ParamVector::zeros(len);
    for (u, &w) in updates.iter().zip(weights) {
        u.check_len(len)?;
        if w > 0.0 {
            out.axpy(w / total, u);
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec, ImageDims};
    use crate::model::ModelSpec;

    pub fn small_federation(clients: usize, n_mal: usize, seed: u64) -> Federation {
        federation_with_classes(3, clients, n_mal, seed)
    }

    pub fn federation_with_classes(classes: usize, clients: usize, n_mal: usize, seed: u64) -> Federation {
        let spec = BlobSpec { dims: ImageDims::new(1, 4, 4), classes, radius: 0.35, sigma: 0.1 };
        let train = synthetic_blobs(60 * clients, &spec, seed).unwrap();
        let test = synthetic_blobs(150, &spec, seed + 1).unwrap();
        let assignment =
            partition_noniid(&train.labels, clients, 0.5, classes, seed).unwrap().with_malicious(n_mal).unwrap();
        Federation {
            model: ModelSpec::logreg(spec.dims, classes).build().unwrap(),
            train,
            assignment,
            test,
            lr: 0.5,
            schedule: LocalSchedule::Epochs(1),
            batch_size: 16,
            rounds: 5,
            seed,
            timing: false,
        }
    }
}
