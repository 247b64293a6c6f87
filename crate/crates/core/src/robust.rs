//! Byzantine-robust aggregation baselines.

use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::fl::{Defense, DefenseInput, DefenseOutput, FedAvg};
use crate::linalg::sq_dist;
use crate::params::{cosine, ParamVector};
use crate::rng::{derive_seed, stream};

/// Krum scores: summed squared distances to the `n − f − 2` nearest others.
pub fn krum_scores(updates: &[&ParamVector], f: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    if n < f + 3 {
        return Err(invalid(format!("krum needs n ≥ f + 3, got n = {n}, f = {f}")));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(updates[i], updates[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let keep = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row[..keep].iter().sum()
        })
        .collect())
}

/// Relative band within which two Krum scores count as tied.
pub const KRUM_TIE_RTOL: f64 = 1e-12;

/// Lowest index whose score is within rounding of the minimum.
pub fn argmin_with_ties(scores: &[f64]) -> usize {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let band = min + KRUM_TIE_RTOL * min.abs().max(f64::MIN_POSITIVE);
    scores.iter().position(|&s| s <= band).unwrap_or(0)
}

/// Index and value of the update with the lowest Krum score. Scores equal up
/// to rounding tie, and ties go to the lowest index.
pub fn krum(updates: &[&ParamVector], f: usize) -> Result<(usize, ParamVector)> {
    let scores = krum_scores(updates, f)?;
    let best = argmin_with_ties(&scores);
    Ok((best, updates[best].clone()))
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-coordinate median; an even count averages the two middle values.
pub fn coord_median(updates: &[&ParamVector]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::Empty("update list"))?;
    let p = first.len();
    for u in updates {
        u.check_len(p)?;
    }
    let mut col = vec![0.0; updates.len()];
    let out = (0..p)
        .map(|j| {
            for (c, u) in col.iter_mut().zip(updates) {
                *c = u[j];
            }
            median_of(&mut col)
        })
        .collect();
    Ok(ParamVector(out))
}

/// Rescales each delta `θ_i − global` to norm at most `tau`.
pub fn norm_clip(updates: &[&ParamVector], global: &ParamVector, tau: f64) -> Result<Vec<ParamVector>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("clipping threshold must be positive, got {tau}")));
    }
    updates
        .iter()
        .map(|u| {
            u.check_len(global.len())?;
            let delta = u.sub(global);
            let norm = delta.norm();
            if norm <= tau {
                Ok((*u).clone())
            } else {
                let mut out = global.clone();
                out.axpy(tau / norm, &delta);
                Ok(out)
            }
        })
        .collect()
}

/// Median of the delta norms, the self-tuning clipping threshold.
pub fn median_delta_norm(updates: &[&ParamVector], global: &ParamVector) -> f64 {
    let mut norms: Vec<f64> = updates.iter().map(|u| u.sub(global).norm()).collect();
    if norms.is_empty() {
        return 0.0;
    }
    median_of(&mut norms)
}

/// Coordinate-wise median of norm-clipped updates.
pub fn c_median(updates: &[&ParamVector], global: &ParamVector, tau: f64) -> Result<ParamVector> {
    if tau == f64::INFINITY {
        return coord_median(updates);
    }
    let clipped = norm_clip(updates, global, tau)?;
    coord_median(&clipped.iter().collect::<Vec<_>>())
}

/// FLtrust combination of client deltas given the server's root delta `g0`.
///
/// Trust is `max(0, cos(δ_i, g0))`; each delta is rescaled to `‖g0‖`.
pub fn fltrust_combine(
    updates: &[&ParamVector],
    global: &ParamVector,
    g0: &ParamVector,
) -> Result<(ParamVector, Vec<f64>)> {
    let g0_norm = g0.norm();
    if g0_norm == 0.0 {
        return Ok((global.clone(), vec![0.0; updates.len()]));
    }
    let mut acc = ParamVector::zeros(global.len());
    let mut trust = Vec::with_capacity(updates.len());
    for u in updates {
        u.check_len(global.len())?;
        let delta = u.sub(global);
        let norm = delta.norm();
        let ts = if norm == 0.0 { 0.0 } else { cosine(&delta, g0)?.max(0.0) };
        if ts > 0.0 {
            acc.axpy(ts * g0_norm / norm, &delta);
        }
        trust.push(ts);
    }
    let total: f64 = trust.iter().sum();
    let mut out = global.clone();
    if total > 0.0 {
        out.axpy(1.0 / total, &acc);
    } else {
        out.axpy(1.0, g0);
    }
    Ok((out, trust))
}

fn usable_refs<'a>(input: &'a DefenseInput<'_>) -> (Vec<usize>, Vec<&'a ParamVector>) {
    let pos = input.usable();
    let refs = pos.iter().map(|&i| &input.updates[i]).collect();
    (pos, refs)
}

/// Krum as a defense. `f` defaults to the true number of sampled attackers,
/// capped at `n − 3`; with fewer than three usable uploads it averages them.
#[derive(Debug, Clone, Default)]
pub struct Krum {
    pub f: Option<usize>,
}

impl Defense for Krum {
    fn name(&self) -> &str {
        "krum"
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        let (pos, refs) = usable_refs(input);
        if refs.len() < 3 {
            return FedAvg.aggregate(input);
        }
        let f = self.f.unwrap_or_else(|| input.malicious_sampled()).min(refs.len() - 3);
        let (best, global) = krum(&refs, f)?;
        let excluded = pos.iter().enumerate().filter(|(k, _)| *k != best).map(|(_, &i)| input.clients[i]).collect();
        Ok(DefenseOutput::plain(global, excluded))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Median;

impl Defense for Median {
    fn name(&self) -> &str {
        "median"
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        let (_, refs) = usable_refs(input);
        if refs.is_empty() {
            return FedAvg.aggregate(input);
        }
        Ok(DefenseOutput::plain(coord_median(&refs)?, Vec::new()))
    }
}

fn threshold(tau: Option<f64>, refs: &[&ParamVector], global: &ParamVector) -> Option<f64> {
    let t = tau.unwrap_or_else(|| median_delta_norm(refs, global));
    (t > 0.0).then_some(t)
}

/// Norm clipping followed by a uniform mean. `tau` defaults to the median
/// delta norm of the round.
#[derive(Debug, Clone, Default)]
pub struct Clipping {
    pub tau: Option<f64>,
}

impl Defense for Clipping {
    fn name(&self) -> &str {
        "clipping"
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        let (_, refs) = usable_refs(input);
        let Some(tau) = threshold(self.tau, &refs, input.global) else {
            return FedAvg.aggregate(input);
        };
        let clipped = norm_clip(&refs, input.global, tau)?;
        let clipped_refs: Vec<&ParamVector> = clipped.iter().collect();
        let global = crate::fl::weighted_aggregate(&clipped_refs, &vec![1.0; clipped.len()])?;
        Ok(DefenseOutput::plain(global, Vec::new()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct CMedian {
    pub tau: Option<f64>,
}

impl Defense for CMedian {
    fn name(&self) -> &str {
        "cmedian"
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        let (_, refs) = usable_refs(input);
        let Some(tau) = threshold(self.tau, &refs, input.global) else {
            return Median.aggregate(input);
        };
        Ok(DefenseOutput::plain(c_median(&refs, input.global, tau)?, Vec::new()))
    }
}

/// FLtrust with a server-held root set trained like a client.
#[derive(Debug, Clone)]
pub struct FlTrust {
    pub root: Batch,
}

impl FlTrust {
    pub fn root_delta(&self, input: &DefenseInput<'_>) -> Result<ParamVector> {
        let fed = input.fed;
        let steps = fed.schedule.steps(self.root.len(), fed.batch_size);
        let seed = derive_seed(fed.seed, &[stream::SERVER, input.round as u64]);
        let trained = fed.model.local_train(input.global, self.root.all(), fed.lr, steps, fed.batch_size, seed)?;
        Ok(trained.sub(input.global))
    }
}

impl Defense for FlTrust {
    fn name(&self) -> &str {
        "fltrust"
    }

    fn aggregate(&mut self, input: &DefenseInput<'_>) -> Result<DefenseOutput> {
        if self.root.is_empty() {
            return Err(Error::Empty("fltrust root set"));
        }
        let g0 = self.root_delta(input)?;
        let (pos, refs) = usable_refs(input);
        let (global, trust) = fltrust_combine(&refs, input.global, &g0)?;
        let excluded = pos.iter().zip(&trust).filter(|(_, &t)| t == 0.0).map(|(&i, _)| input.clients[i]).collect();
        Ok(DefenseOutput::plain(global, excluded))
    }
}
