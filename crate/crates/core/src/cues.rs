//! Environmental cues: feature extraction from reconstructions, MMD distances
//! and the per-client history that turns them into policy state.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::linalg::sq_dist;
use crate::model::{Model, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{derive_seed, stream};

/// Floor applied to every cue value.
pub const EPS_S: f64 = 1e-6;

/// Rows of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::Empty("feature set"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch { expected: dim, actual: data.len() % dim });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(FeatureSet { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Concatenation of several sets of the same width.
    pub fn pool<'a>(sets: impl IntoIterator<Item = &'a FeatureSet>) -> Result<FeatureSet> {
        let mut dim = 0;
        let mut data = Vec::new();
        for s in sets {
            if dim != 0 && s.dim != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: s.dim });
            }
            dim = s.dim;
            data.extend_from_slice(&s.data);
        }
        FeatureSet::new(dim, data)
    }
}

fn mean_kernel(x: &FeatureSet, y: &FeatureSet, inv_two_sigma_sq: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..x.len() {
        for j in 0..y.len() {
            let d = sq_dist(x.row(i), y.row(j));
            sum += inv_two_sigma_sq.iter().map(|c| (-d * c).exp()).sum::<f64>();
        }
    }
    sum / (x.len() * y.len()) as f64
}

/// Square root of the biased MMD² estimate with kernel
/// `k(x, y) = Σ_σ exp(−‖x − y‖²/(2σ²))`.
pub fn mmd(x: &FeatureSet, y: &FeatureSet, bandwidths: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("mmd sample set"));
    }
    if x.dim != y.dim {
        return Err(Error::DimensionMismatch { expected: x.dim, actual: y.dim });
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(invalid("mmd bandwidths must be positive and finite"));
    }
    let c: Vec<f64> = bandwidths.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    let m2 = mean_kernel(x, x, &c) + mean_kernel(y, y, &c) - 2.0 * mean_kernel(x, y, &c);
    Ok(m2.max(0.0).sqrt())
}

/// Median pairwise distance of `set` times `{0.5, 1, 2}`; falls back to a unit
/// median when all points coincide.
pub fn median_bandwidths(set: &FeatureSet) -> Vec<f64> {
    let n = set.len();
    let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(set.row(i), set.row(j)).sqrt());
        }
    }
    let med = if d.is_empty() {
        0.0
    } else {
        d.sort_by(f64::total_cmp);
        let k = d.len();
        if k % 2 == 1 {
            d[k / 2]
        } else {
            0.5 * (d[k / 2 - 1] + d[k / 2])
        }
    };
    let med = if med > 0.0 { med } else { 1.0 };
    vec![0.5 * med, med, 2.0 * med]
}

/// `2·cos(tanh(d/2)) − 1`, strictly decreasing from 1 towards `2·cos(1) − 1`.
pub fn sim_from_distance(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(invalid(format!("distance must be non-negative, got {d}")));
    }
    Ok(2.0 * (d / 2.0).tanh().cos() - 1.0)
}

fn clamp_cue(x: f64) -> f64 {
    if x.is_nan() {
        EPS_S
    } else {
        x.clamp(EPS_S, 1.0)
    }
}

/// Per-client feature history and malicious-behavior counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryStore {
    pub features: Vec<Option<FeatureSet>>,
    pub h: Vec<u32>,
}

impl HistoryStore {
    pub fn new(clients: usize) -> Self {
        HistoryStore { features: vec![None; clients], h: vec![0; clients] }
    }

    pub fn clients(&self) -> usize {
        self.h.len()
    }
}

/// Penultimate-layer feature map of a trained network.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub model: Model,
    pub params: ParamVector,
}

impl Extractor {
    pub fn features(&self, batch: &Batch) -> Result<FeatureSet> {
        let width = self.model.net.feature_width().ok_or_else(|| invalid("extractor has no feature layer"))?;
        FeatureSet::new(width, self.model.features(&self.params, &batch.inputs, batch.len())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { epochs: 5, lr: 0.05, batch_size: 32 }
    }
}

/// Minimum root-split size for extractor training.
pub const MIN_ROOT_SAMPLES: usize = 500;

/// Trains a small CNN on the server's root split.
pub fn train_feature_extractor(root: &Batch, spec: ModelSpec, cfg: &ExtractorConfig, seed: u64) -> Result<Extractor> {
    if root.len() < MIN_ROOT_SAMPLES {
        return Err(invalid(format!(
            "feature extractor needs at least {MIN_ROOT_SAMPLES} root samples, got {}",
            root.len()
        )));
    }
    let model = spec.build()?;
    let init = model.init(derive_seed(seed, &[stream::EXTRACTOR]));
    let steps = cfg.epochs * root.len().div_ceil(cfg.batch_size);
    let params = model.local_train(
        &init,
        root.all(),
        cfg.lr,
        steps,
        cfg.batch_size,
        derive_seed(seed, &[stream::EXTRACTOR, 1]),
    )?;
    Ok(Extractor { model, params })
}

/// One row of the policy state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueEntry {
    pub client: usize,
    /// `(S_R, S_cl, S_cg, S_lg)`, each in `[EPS_S, 1]`.
    pub cues: [f64; 4],
}

/// `|C^t| × 4` cue matrix, rows sorted by descending `S_R` then client id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvState {
    pub rows: Vec<CueEntry>,
}

impl EnvState {
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.cues).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// What the cue engine knows about one sampled client this round.
#[derive(Debug, Clone)]
pub struct ClientEvidence {
    pub client: usize,
    pub s_r: f64,
    /// Features of the reconstruction; `None` if inversion failed.
    pub features: Option<FeatureSet>,
}

/// Builds the cue matrix and advances the history by one round.
///
/// `V_g` pools the current features of all clients with evidence. A client
/// without stored history uses its current features as history. Clients whose
/// inversion failed get floor cues and keep their history.
pub fn build_cues(
    evidence: &[ClientEvidence],
    history: &mut HistoryStore,
    bandwidths: Option<&[f64]>,
) -> Result<EnvState> {
    if evidence.is_empty() {
        return Err(Error::Empty("cue evidence"));
    }
    if let Some(e) = evidence.iter().find(|e| e.client >= history.clients()) {
        return Err(invalid(format!("client {} outside the history store", e.client)));
    }
    let present: Vec<&FeatureSet> = evidence.iter().filter_map(|e| e.features.as_ref()).collect();
    let mut rows = Vec::with_capacity(evidence.len());
    if present.is_empty() {
        rows.extend(evidence.iter().map(|e| CueEntry { client: e.client, cues: [EPS_S; 4] }));
    } else {
        let v_g = FeatureSet::pool(present.iter().copied())?;
        let bw = match bandwidths {
            Some(b) => b.to_vec(),
            None => median_bandwidths(&v_g),
        };
        for e in evidence {
            let Some(cur) = &e.features else {
                rows.push(CueEntry { client: e.client, cues: [EPS_S; 4] });
                continue;
            };
            let hist = history.features[e.client].as_ref().unwrap_or(cur);
            let s_cl = sim_from_distance(mmd(cur, hist, &bw)?)?;
            let s_cg = sim_from_distance(mmd(cur, &v_g, &bw)?)?;
            let s_lg = sim_from_distance(mmd(hist, &v_g, &bw)?)?;
            rows.push(CueEntry {
                client: e.client,
                cues: [clamp_cue(e.s_r), clamp_cue(s_cl), clamp_cue(s_cg), clamp_cue(s_lg)],
            });
        }
        for e in evidence {
            if let Some(cur) = &e.features {
                history.features[e.client] = Some(cur.clone());
            }
        }
    }
    rows.sort_by(|a, b| b.cues[0].total_cmp(&a.cues[0]).then(a.client.cmp(&b.client)));
    Ok(EnvState { rows })
}
