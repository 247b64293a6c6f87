//! Experiment configuration: TOML with sections, unknown keys rejected,
//! `--set a.b=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cues::{ExtractorConfig, MIN_ROOT_SAMPLES};
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use crate::model::Architecture;
use crate::rl::Td3Config;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "ADAAGG_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Ipm,
    Lmp,
    Eb,
    Rl,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Ipm => "ipm",
            AttackKind::Lmp => "lmp",
            AttackKind::Eb => "eb",
            AttackKind::Rl => "rl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    Fedavg,
    Krum,
    Median,
    Cmedian,
    Clipping,
    Fltrust,
    Adaagg,
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::Fedavg => "fedavg",
            DefenseKind::Krum => "krum",
            DefenseKind::Median => "median",
            DefenseKind::Cmedian => "cmedian",
            DefenseKind::Clipping => "clipping",
            DefenseKind::Fltrust => "fltrust",
            DefenseKind::Adaagg => "adaagg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Dataset root; falls back to `$ADAAGG_DATA_DIR`, then `./data`.
    pub root: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    /// Server validation split for the policy reward.
    pub validation_size: usize,
    /// Server split used to train the feature extractor.
    pub extractor_size: usize,
    /// Server root set for FLtrust.
    pub fltrust_size: usize,
    /// Synthetic blobs only.
    pub synthetic_side: usize,
    pub synthetic_classes: usize,
    pub synthetic_radius: f64,
    pub synthetic_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            root: None,
            train_size: 6000,
            test_size: 1000,
            validation_size: 1000,
            extractor_size: 500,
            fltrust_size: 100,
            synthetic_side: 12,
            synthetic_classes: 4,
            synthetic_radius: 0.35,
            synthetic_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub model: Architecture,
    /// Client count K.
    pub clients: usize,
    /// Attackers; client ids `0..malicious`.
    pub malicious: usize,
    pub q: f64,
    pub sample_fraction: f64,
    /// Global rounds R_g.
    pub rounds: usize,
    /// Client learning rate α.
    pub lr: f64,
    pub batch_size: usize,
    /// Local epochs per round, used unless `local_steps` is set.
    pub local_epochs: usize,
    /// Fixed local step count R_l.
    pub local_steps: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            model: Architecture::SmallCnn,
            clients: 30,
            malicious: 6,
            q: 0.1,
            sample_fraction: 1.0 / 3.0,
            rounds: 150,
            lr: 0.05,
            batch_size: 32,
            local_epochs: 1,
            local_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub ipm_eps: f64,
    pub lmp_lambda0: f64,
    pub lmp_halvings: usize,
    /// Train the RL adversary for one run against FedAvg before the real run.
    pub rl_pretrain: bool,
    pub rl_freeze: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            ipm_eps: 1.0,
            lmp_lambda0: 10.0,
            lmp_halvings: 10,
            rl_pretrain: true,
            rl_freeze: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Krum's assumed attacker count; defaults to the true sampled count.
    pub krum_f: Option<usize>,
    /// Clipping threshold; defaults to the round's median delta norm.
    pub clip_tau: Option<f64>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig { kind: DefenseKind::Fedavg, krum_f: None, clip_tau: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaAggSection {
    pub max_iters: usize,
    pub images: usize,
    pub inversion_lr: f64,
    pub beta: f64,
    pub lambda: f64,
    pub kappa: f64,
    /// Cue columns to hide, by name: `S_R`, `S_cl`, `S_cg`, `S_lg`.
    pub cue_mask: Vec<String>,
    pub train_policy: bool,
    /// Policy checkpoint to start from.
    pub policy_checkpoint: Option<PathBuf>,
    pub td3: Td3Config,
    pub extractor_epochs: usize,
    pub extractor_lr: f64,
    pub extractor_batch_size: usize,
}

impl Default for AdaAggSection {
    fn default() -> Self {
        let inv = InversionConfig::default();
        let ex = ExtractorConfig::default();
        AdaAggSection {
            max_iters: inv.max_iters,
            images: inv.images,
            inversion_lr: inv.lr,
            beta: inv.beta,
            lambda: 2.0,
            kappa: 0.05,
            cue_mask: Vec::new(),
            train_policy: true,
            policy_checkpoint: None,
            td3: Td3Config::default(),
            extractor_epochs: ex.epochs,
            extractor_lr: ex.lr,
            extractor_batch_size: ex.batch_size,
        }
    }
}

pub const CUE_NAMES: [&str; 4] = ["S_R", "S_cl", "S_cg", "S_lg"];

impl AdaAggSection {
    pub fn inversion(&self) -> InversionConfig {
        InversionConfig { images: self.images, max_iters: self.max_iters, lr: self.inversion_lr, beta: self.beta }
    }

    pub fn extractor(&self) -> ExtractorConfig {
        ExtractorConfig { epochs: self.extractor_epochs, lr: self.extractor_lr, batch_size: self.extractor_batch_size }
    }

    pub fn mask(&self) -> Result<[bool; 4]> {
        let mut mask = [false; 4];
        for name in &self.cue_mask {
            let i = CUE_NAMES.iter().position(|n| n.eq_ignore_ascii_case(name)).ok_or_else(|| {
                Error::Config(format!("adaagg.cue_mask: unknown cue {name:?}; expected one of {CUE_NAMES:?}"))
            })?;
            mask[i] = true;
        }
        if mask.iter().all(|m| *m) {
            return Err(Error::Config("adaagg.cue_mask: cannot mask every cue".into()));
        }
        Ok(mask)
    }
}

/// Axes expanded into one run directory per combination. Empty axes keep the
/// single value from the main sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub defenses: Vec<DefenseKind>,
    pub attacks: Vec<AttackKind>,
    pub malicious: Vec<usize>,
    pub max_iters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Log cues for non-adaptive defenses too.
    pub cue_logging: bool,
    /// Record stage wall times; off writes zeros for byte-stable CSVs.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seeds: vec![1], output: PathBuf::from("runs/default"), cue_logging: false, timing: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub adaagg: AdaAggSection,
    pub grid: GridConfig,
    pub run: RunConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("--set {spec:?}: expected key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set {spec:?}: empty key segment")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("--set {spec:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text; errors carry the line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if overrides.is_empty() {
            base.validate()?;
            return Ok(base);
        }
        let mut table: toml::Table = toml::from_str(&text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("after --set: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        let bad = |m: String| Err(Error::Config(m));
        if f.clients == 0 {
            return bad("federation.clients must be positive".into());
        }
        if f.malicious > f.clients {
            return bad(format!("federation.malicious ({}) exceeds federation.clients ({})", f.malicious, f.clients));
        }
        if !(f.sample_fraction > 0.0 && f.sample_fraction <= 1.0) {
            return bad(format!("federation.sample_fraction must lie in (0, 1], got {}", f.sample_fraction));
        }
        if f.rounds == 0 || f.batch_size == 0 {
            return bad("federation.rounds and federation.batch_size must be positive".into());
        }
        if !(f.lr > 0.0) {
            return bad(format!("federation.lr must be positive, got {}", f.lr));
        }
        if f.local_steps == Some(0) || (f.local_steps.is_none() && f.local_epochs == 0) {
            return bad("federation.local_steps / local_epochs must be positive".into());
        }
        let classes = self.classes();
        if !(f.q >= 1.0 / classes as f64 - 1e-12 && f.q <= 1.0) {
            return bad(format!("federation.q must lie in [1/M, 1] = [{}, 1], got {}", 1.0 / classes as f64, f.q));
        }
        if f.clients < classes {
            return bad(format!("federation.clients ({}) must be at least the class count ({classes})", f.clients));
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds must list at least one seed".into());
        }
        let d = &self.data;
        if d.train_size < f.clients || d.test_size == 0 || d.validation_size == 0 {
            return bad("data sizes must cover every client and leave non-empty test and validation splits".into());
        }
        let a = &self.adaagg;
        if a.images == 0 || !(a.inversion_lr > 0.0) || !(a.beta >= 0.0) {
            return bad("adaagg.images, adaagg.inversion_lr must be positive and adaagg.beta non-negative".into());
        }
        if !(a.lambda >= 1.0) || !(a.kappa > 0.0) {
            return bad(format!("adaagg.lambda must be ≥ 1 and adaagg.kappa > 0, got {} and {}", a.lambda, a.kappa));
        }
        a.mask()?;
        a.td3.validate().map_err(|e| Error::Config(format!("adaagg.td3: {e}")))?;
        if self.attack.ipm_eps < 0.0 || !(self.attack.lmp_lambda0 > 0.0) {
            return bad("attack.ipm_eps must be non-negative and attack.lmp_lambda0 positive".into());
        }
        if let Some(tau) = self.defense.clip_tau {
            if !(tau > 0.0) {
                return bad(format!("defense.clip_tau must be positive, got {tau}"));
            }
        }
        if self.grid.malicious.iter().any(|&m| m > f.clients) {
            return bad("grid.malicious entries must not exceed federation.clients".into());
        }
        let uses = |k: DefenseKind| self.defense.kind == k || self.grid.defenses.contains(&k);
        if uses(DefenseKind::Adaagg) && d.extractor_size < MIN_ROOT_SAMPLES {
            return bad(format!("data.extractor_size must be at least {MIN_ROOT_SAMPLES} for adaagg, got {}", d.extractor_size));
        }
        if uses(DefenseKind::Fltrust) && d.fltrust_size == 0 {
            return bad("data.fltrust_size must be positive for fltrust".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self.data.dataset {
            DatasetKind::Mnist | DatasetKind::Fmnist => 10,
            DatasetKind::Synthetic => self.data.synthetic_classes,
        }
    }

    /// Dataset root: config, then the environment, then `./data`.
    pub fn data_root(&self) -> PathBuf {
        if let Some(r) = &self.data.root {
            return r.clone();
        }
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Expands the grid into concrete configs, each with its own output
    /// directory under `run.output`.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let g = &self.grid;
        if g.defenses.is_empty() && g.attacks.is_empty() && g.malicious.is_empty() && g.max_iters.is_empty() {
            return vec![self.clone()];
        }
        let defenses = or(&g.defenses, self.defense.kind);
        let attacks = or(&g.attacks, self.attack.kind);
        let mals = or(&g.malicious, self.federation.malicious);
        let iters = or(&g.max_iters, self.adaagg.max_iters);
        let mut out = Vec::new();
        for &d in &defenses {
            for &a in &attacks {
                for &m in &mals {
                    for &it in &iters {
                        let mut c = self.clone();
                        c.grid = GridConfig::default();
                        c.defense.kind = d;
                        c.attack.kind = a;
                        c.federation.malicious = m;
                        c.adaagg.max_iters = it;
                        c.run.output = self.run.output.join(format!("{}-{}-mal{m}-it{it}", d.name(), a.name()));
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}
