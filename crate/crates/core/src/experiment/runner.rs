//! Config-driven runs: data splits, per-seed federations and the CSV
//! artifacts written as rounds complete.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::{AttackKind, DatasetKind, DefenseKind, ExperimentConfig};
use crate::adaagg::{AdaAgg, AdaAggConfig, CueEngine, Observed};
use crate::attacks::{Eb, Ipm, Lmp, RlAdversary};
use crate::cues::train_feature_extractor;
use crate::data::{load_idx_dir, synthetic_blobs, BlobSpec};
use crate::error::{Error, Result};
use crate::fl::{partition_noniid, sample_round, Attack, Defense, FedAvg, LocalSchedule, NoAttack};
use crate::model::Architecture;
use crate::rl::{load_checkpoint, save_checkpoint, Td3Agent};
use crate::rng::{derive_seed, rng_from, stream};
use crate::robust::{CMedian, Clipping, FlTrust, Krum, Median};
use crate::{Batch, Federation, ImageDims, ModelSpec, ParamVector, RoundRecord};

pub const METRICS_HEADER: [&str; 13] = [
    "round",
    "seed",
    "attack",
    "defense",
    "test_acc",
    "test_loss",
    "reward",
    "excluded_ids",
    "t_local_ms",
    "t_invert_ms",
    "t_cues_ms",
    "t_policy_ms",
    "t_agg_ms",
];

pub const CUES_HEADER: [&str; 11] =
    ["round", "seed", "client_id", "is_malicious", "S_R", "S_cl", "S_cg", "S_lg", "w_tilde", "excluded", "h"];

pub const WALL_HEADER: [&str; 3] = ["round", "seed", "wall_ms"];

/// Disjoint splits of one seed's data.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Batch,
    pub test: Batch,
    /// Server-held set for the policy reward.
    pub validation: Batch,
    /// Server-held set for the feature extractor.
    pub extractor: Batch,
    /// Server-held root set for FLtrust.
    pub fltrust: Batch,
}

fn take(pool: &Batch, order: &[usize], at: &mut usize, n: usize) -> Batch {
    let b = pool.gather(&order[*at..*at + n]);
    *at += n;
    b
}

/// Loads or generates the dataset and carves the splits with the SPLIT stream.
pub fn load_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let d = &cfg.data;
    let server = d.validation_size + d.extractor_size + d.fltrust_size;
    let mut rng = rng_from(seed, &[stream::SPLIT]);
    let (pool, test_pool) = match d.dataset {
        DatasetKind::Synthetic => {
            let spec = BlobSpec {
                dims: ImageDims::new(1, d.synthetic_side, d.synthetic_side),
                classes: d.synthetic_classes,
                radius: d.synthetic_radius,
                sigma: d.synthetic_sigma,
            };
            let n = d.train_size + d.test_size + server;
            (synthetic_blobs(n, &spec, derive_seed(seed, &[stream::SPLIT, 1]))?, None)
        }
        DatasetKind::Mnist | DatasetKind::Fmnist => {
            let name = if d.dataset == DatasetKind::Mnist { "mnist" } else { "fmnist" };
            load_idx_dir(&cfg.data_root().join(name), 10)?
        }
    };
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let need = d.train_size + server + if test_pool.is_some() { 0 } else { d.test_size };
    if pool.len() < need {
        return Err(Error::Dataset {
            path: cfg.data_root(),
            reason: format!("{} samples available, the configured splits need {need}", pool.len()),
        });
    }
    let mut at = 0;
    let train = take(&pool, &order, &mut at, d.train_size);
    let validation = take(&pool, &order, &mut at, d.validation_size);
    let extractor = take(&pool, &order, &mut at, d.extractor_size);
    let fltrust = take(&pool, &order, &mut at, d.fltrust_size);
    let test = match test_pool {
        Some(t) => {
            if t.len() < d.test_size {
                return Err(Error::Dataset {
                    path: cfg.data_root(),
                    reason: format!("{} test samples available, {} requested", t.len(), d.test_size),
                });
            }
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rng);
            t.gather(&idx[..d.test_size])
        }
        None => take(&pool, &order, &mut at, d.test_size),
    };
    Ok(Splits { train, test, validation, extractor, fltrust })
}

/// One seed's round records.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

impl SeedRun {
    pub fn final_acc(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_acc)
    }
}

/// One concrete (grid-expanded) configuration and its seeds.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub seeds: Vec<SeedRun>,
}

impl CellRun {
    pub fn final_accs(&self) -> Vec<f64> {
        self.seeds.iter().map(SeedRun::final_acc).collect()
    }
}

enum Server {
    Ada(Box<AdaAgg>),
    Other(Box<dyn Defense>),
}

impl Server {
    fn as_dyn(&mut self) -> &mut dyn Defense {
        match self {
            Server::Ada(a) => a.as_mut(),
            Server::Other(d) => d.as_mut(),
        }
    }
}

fn model_spec(cfg: &ExperimentConfig, dims: ImageDims) -> ModelSpec {
    match cfg.federation.model {
        Architecture::Logreg => ModelSpec::logreg(dims, cfg.classes()),
        Architecture::SmallCnn => ModelSpec::small_cnn(dims, cfg.classes()),
    }
}

fn build_server(cfg: &ExperimentConfig, splits: Splits, spec: ModelSpec, seed: u64) -> Result<Server> {
    let a = &cfg.adaagg;
    let kind = cfg.defense.kind;
    let cue_engine = || -> Result<CueEngine> {
        let extractor = train_feature_extractor(&splits.extractor, spec, &a.extractor(), seed)?;
        Ok(CueEngine::new(extractor, cfg.federation.clients, a.inversion()))
    };
    if kind == DefenseKind::Adaagg {
        let ada_cfg = AdaAggConfig {
            inversion: a.inversion(),
            lambda: a.lambda,
            kappa: a.kappa,
            cue_mask: a.mask()?,
            td3: a.td3.clone(),
            train_policy: a.train_policy,
        };
        let mut ada = AdaAgg::new(ada_cfg, cue_engine()?, splits.validation, cfg.federation.rounds, seed)?;
        if let Some(path) = &a.policy_checkpoint {
            let cp = load_checkpoint(path)?;
            ada =
                ada.with_agent(Td3Agent::from_checkpoint(&cp, a.td3.clone(), derive_seed(seed, &[stream::POLICY, 2]))?);
        }
        return Ok(Server::Ada(Box::new(ada)));
    }
    let inner: Box<dyn Defense> = match kind {
        DefenseKind::Fedavg => Box::new(FedAvg),
        DefenseKind::Krum => Box::new(Krum { f: cfg.defense.krum_f }),
        DefenseKind::Median => Box::new(Median),
        DefenseKind::Cmedian => Box::new(CMedian { tau: cfg.defense.clip_tau }),
        DefenseKind::Clipping => Box::new(Clipping { tau: cfg.defense.clip_tau }),
        DefenseKind::Fltrust => Box::new(FlTrust { root: splits.fltrust.clone() }),
        DefenseKind::Adaagg => unreachable!("handled above"),
    };
    if cfg.run.cue_logging {
        return Ok(Server::Other(Box::new(Observed { inner, cues: cue_engine()? })));
    }
    Ok(Server::Other(inner))
}

/// Runs every round of `fed`, handing each record to `on_round`.
pub fn drive(
    fed: &Federation,
    fraction: f64,
    attack: &mut dyn Attack,
    defense: &mut dyn Defense,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<Vec<RoundRecord>> {
    let mut global: ParamVector = fed.model.init(fed.seed);
    let mut prev: Option<ParamVector> = None;
    let mut records = Vec::with_capacity(fed.rounds);
    for t in 0..fed.rounds {
        let plan = sample_round(fed.assignment.clients(), fraction, t, fed.seed)?;
        let (next, rec) = fed.run_round(&global, prev.as_ref(), &plan, attack, defense)?;
        prev = Some(std::mem::replace(&mut global, next));
        on_round(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

fn build_attack(cfg: &ExperimentConfig, fed: &Federation, seed: u64) -> Result<Box<dyn Attack>> {
    let a = &cfg.attack;
    Ok(match a.kind {
        AttackKind::None => Box::new(NoAttack),
        AttackKind::Ipm => Box::new(Ipm { eps: a.ipm_eps }),
        AttackKind::Lmp => Box::new(Lmp { lambda0: a.lmp_lambda0, halvings: a.lmp_halvings }),
        AttackKind::Eb => Box::new(Eb),
        AttackKind::Rl => {
            let mut adv =
                RlAdversary::new(cfg.adaagg.td3.clone(), fed.rounds, derive_seed(seed, &[stream::ADVERSARY]))?;
            if a.rl_pretrain {
                drive(fed, cfg.federation.sample_fraction, &mut adv, &mut FedAvg, &mut |_| Ok(()))?;
                adv.new_episode();
            }
            adv.frozen = a.rl_freeze;
            Box::new(adv)
        }
    })
}

/// Appends `metrics.csv`, `wall.csv` and optionally `cues.csv`, flushing
/// after every round so an interrupted run leaves a valid prefix.
pub struct RunWriter {
    metrics: csv::Writer<File>,
    wall: csv::Writer<File>,
    cues: Option<csv::Writer<File>>,
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    w.flush()?;
    Ok(w)
}

fn ms(x: f64) -> String {
    format!("{x:.3}")
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

impl RunWriter {
    /// Creates the files in `dir` and writes their headers.
    pub fn create(dir: &Path, with_cues: bool) -> Result<Self> {
        Ok(RunWriter {
            metrics: writer(&dir.join("metrics.csv"), &METRICS_HEADER)?,
            wall: writer(&dir.join("wall.csv"), &WALL_HEADER)?,
            cues: if with_cues { Some(writer(&dir.join("cues.csv"), &CUES_HEADER)?) } else { None },
        })
    }

    pub fn write(&mut self, cfg: &ExperimentConfig, seed: u64, rec: &RoundRecord) -> Result<()> {
        let excluded: Vec<String> = rec.excluded.iter().map(|c| c.to_string()).collect();
        let t = &rec.times;
        self.metrics.write_record([
            rec.round.to_string(),
            seed.to_string(),
            cfg.attack.kind.name().to_string(),
            cfg.defense.kind.name().to_string(),
            rec.test_acc.to_string(),
            rec.test_loss.to_string(),
            rec.reward.map(|r| r.to_string()).unwrap_or_default(),
            excluded.join(";"),
            ms(t.local_ms),
            ms(t.invert_ms),
            ms(t.cues_ms),
            ms(t.policy_ms),
            ms(t.agg_ms),
        ])?;
        self.metrics.flush()?;
        self.wall.write_record([rec.round.to_string(), seed.to_string(), ms(rec.wall_ms)])?;
        self.wall.flush()?;
        if let Some(w) = &mut self.cues {
            for c in &rec.cues {
                w.write_record([
                    rec.round.to_string(),
                    seed.to_string(),
                    c.client.to_string(),
                    flag(c.is_malicious).to_string(),
                    c.cues[0].to_string(),
                    c.cues[1].to_string(),
                    c.cues[2].to_string(),
                    c.cues[3].to_string(),
                    c.w_tilde.map(|w| w.to_string()).unwrap_or_default(),
                    flag(c.excluded).to_string(),
                    c.h.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    sinks: &mut RunWriter,
    log: &mut dyn FnMut(&str),
) -> Result<SeedRun> {
    let splits = load_splits(cfg, seed)?;
    let f = &cfg.federation;
    let spec = model_spec(cfg, splits.train.dims);
    let assignment =
        partition_noniid(&splits.train.labels, f.clients, f.q, cfg.classes(), seed)?.with_malicious(f.malicious)?;
    let schedule = match f.local_steps {
        Some(n) => LocalSchedule::Steps(n),
        None => LocalSchedule::Epochs(f.local_epochs),
    };
    let fed = Federation {
        model: spec.build()?,
        train: splits.train.clone(),
        assignment,
        test: splits.test.clone(),
        lr: f.lr,
        schedule,
        batch_size: f.batch_size,
        rounds: f.rounds,
        seed,
        timing: cfg.run.timing,
    };
    fed.validate()?;
    let mut attack = build_attack(cfg, &fed, seed)?;
    let mut server = build_server(cfg, splits, spec, seed)?;
    let records = drive(&fed, f.sample_fraction, attack.as_mut(), server.as_dyn(), &mut |rec| {
        sinks.write(cfg, seed, rec)?;
        if (rec.round + 1) % 10 == 0 || rec.round + 1 == f.rounds {
            log(&format!("seed {seed} round {}/{} test_acc {:.4}", rec.round + 1, f.rounds, rec.test_acc));
        }
        Ok(())
    })?;
    if let Server::Ada(ada) = &server {
        if let Some(agent) = &ada.agent {
            save_checkpoint(&agent.checkpoint(), &dir.join(format!("policy-seed{seed}.bin")))?;
        }
    }
    Ok(SeedRun { seed, records })
}

/// Runs one concrete configuration for all its seeds into `run.output`.
pub fn run_cell(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<CellRun> {
    cfg.validate()?;
    let dir = cfg.run.output.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.to_toml())?;
    let wants_cues = cfg.defense.kind == DefenseKind::Adaagg || cfg.run.cue_logging;
    let mut sinks = RunWriter::create(&dir, wants_cues)?;
    let mut seeds = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        log(&format!(
            "{}: defense {} attack {} seed {seed}",
            dir.display(),
            cfg.defense.kind.name(),
            cfg.attack.kind.name()
        ));
        seeds.push(run_seed(cfg, seed, &dir, &mut sinks, log)?);
    }
    Ok(CellRun { config: cfg.clone(), dir, seeds })
}

/// Expands the grid and runs every cell.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<CellRun>> {
    cfg.validate()?;
    cfg.expand().iter().map(|c| run_cell(c, log)).collect()
}

/// Runs with passive cue logging forced on and returns the cues files.
pub fn cue_statistics(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<PathBuf>> {
    let mut cfg = cfg.clone();
    cfg.run.cue_logging = true;
    Ok(run_experiment(&cfg, log)?.into_iter().map(|c| c.dir.join("cues.csv")).collect())
}
