//! Summaries over finished runs: final-accuracy matrix, per-stage timing and
//! accuracy-vs-round series.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// Relative tolerance between summed stage times and recorded wall time.
pub const TIMING_RTOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub seed: u64,
    pub attack: String,
    pub defense: String,
    pub test_acc: f64,
    pub test_loss: f64,
    pub reward: Option<f64>,
    pub excluded_ids: String,
    pub t_local_ms: f64,
    pub t_invert_ms: f64,
    pub t_cues_ms: f64,
    pub t_policy_ms: f64,
    pub t_agg_ms: f64,
}

impl MetricRow {
    pub fn stages(&self) -> [f64; 5] {
        [self.t_local_ms, self.t_invert_ms, self.t_cues_ms, self.t_policy_ms, self.t_agg_ms]
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct WallRow {
    pub round: usize,
    pub seed: u64,
    pub wall_ms: f64,
}

/// The CSVs of one run directory.
#[derive(Debug, Clone)]
pub struct RunTable {
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub wall: Vec<WallRow>,
}

impl RunTable {
    pub fn label(&self) -> String {
        self.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| self.dir.display().to_string())
    }

    /// Last-round accuracy per seed.
    pub fn final_accs(&self) -> BTreeMap<u64, f64> {
        let mut last: BTreeMap<u64, (usize, f64)> = BTreeMap::new();
        for r in &self.rows {
            let e = last.entry(r.seed).or_insert((r.round, r.test_acc));
            if r.round >= e.0 {
                *e = (r.round, r.test_acc);
            }
        }
        last.into_iter().map(|(s, (_, a))| (s, a)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub run: String,
    pub defense: String,
    pub attack: String,
    /// Mean per-round local, invert, cues, policy and agg milliseconds.
    pub stages: [f64; 5],
    pub wall_ms: f64,
    /// Whether the stage sum lies within [`TIMING_RTOL`] of the wall time;
    /// `None` when timing was disabled.
    pub consistent: Option<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub runs: Vec<RunTable>,
    pub warnings: Vec<String>,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<Vec<T>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl Report {
    /// Collects every `metrics.csv` under `dirs`. Unreadable files become
    /// warnings; an error is returned only when nothing was readable.
    pub fn collect(dirs: &[PathBuf]) -> Result<Report> {
        let mut report = Report::default();
        for root in dirs {
            if !root.is_dir() {
                report.warnings.push(format!("{}: not a directory", root.display()));
                continue;
            }
            let mut found = false;
            let mut paths: Vec<PathBuf> = WalkDir::new(root)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file() && e.file_name() == "metrics.csv")
                .map(|e| e.into_path())
                .collect();
            paths.sort();
            for path in paths {
                found = true;
                let dir = path.parent().unwrap_or(root).to_path_buf();
                let rows: Vec<MetricRow> = match read_csv(&path) {
                    Ok(r) if !r.is_empty() => r,
                    Ok(_) => {
                        report.warnings.push(format!("{}: no rows", path.display()));
                        continue;
                    }
                    Err(e) => {
                        report.warnings.push(format!("{}: {e}", path.display()));
                        continue;
                    }
                };
                let wall_path = dir.join("wall.csv");
                let wall = match read_csv(&wall_path) {
                    Ok(w) => w,
                    Err(e) => {
                        report.warnings.push(format!("{}: {e}", wall_path.display()));
                        Vec::new()
                    }
                };
                report.runs.push(RunTable { dir, rows, wall });
            }
            if !found {
                report.warnings.push(format!("{}: no metrics.csv found", root.display()));
            }
        }
        if report.runs.is_empty() {
            return Err(Error::Empty("readable metrics.csv in the given directories"));
        }
        Ok(report)
    }

    /// Mean final accuracy over seeds keyed by `(defense, attack)`, pooling
    /// every run with that pair.
    pub fn accuracy_matrix(&self) -> BTreeMap<(String, String), (f64, usize)> {
        let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for run in &self.runs {
            let Some(first) = run.rows.first() else { continue };
            acc.entry((first.defense.clone(), first.attack.clone()))
                .or_default()
                .extend(run.final_accs().into_values());
        }
        acc.into_iter().map(|(k, v)| (k, (mean(v.iter().copied()), v.len()))).collect()
    }

    pub fn timing(&self) -> Vec<TimingRow> {
        self.runs
            .iter()
            .filter_map(|run| {
                let first = run.rows.first()?;
                let mut stages = [0.0; 5];
                for (i, s) in stages.iter_mut().enumerate() {
                    *s = mean(run.rows.iter().map(|r| r.stages()[i]));
                }
                let wall_ms = mean(run.wall.iter().map(|w| w.wall_ms));
                let sum: f64 = stages.iter().sum();
                let consistent =
                    (wall_ms.is_finite() && wall_ms > 0.0).then(|| (sum - wall_ms).abs() <= TIMING_RTOL * wall_ms);
                Some(TimingRow {
                    run: run.label(),
                    defense: first.defense.clone(),
                    attack: first.attack.clone(),
                    stages,
                    wall_ms,
                    consistent,
                })
            })
            .collect()
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let matrix = self.accuracy_matrix();
        let defenses: BTreeSet<&String> = matrix.keys().map(|(d, _)| d).collect();
        let attacks: BTreeSet<&String> = matrix.keys().map(|(_, a)| a).collect();
        let _ = writeln!(s, "Final test accuracy (mean over seeds)");
        let _ = write!(s, "{:<12}", "defense");
        for a in &attacks {
            let _ = write!(s, "{a:>10}");
        }
        let _ = writeln!(s);
        for d in &defenses {
            let _ = write!(s, "{d:<12}");
            for a in &attacks {
                match matrix.get(&((*d).clone(), (*a).clone())) {
                    Some((m, _)) => {
                        let _ = write!(s, "{m:>10.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "\nPer-run final accuracy");
        for run in &self.runs {
            let accs: Vec<String> = run.final_accs().iter().map(|(seed, a)| format!("{seed}:{a:.4}")).collect();
            let _ = writeln!(s, "{:<36} {}", run.label(), accs.join(" "));
        }
        let _ = writeln!(s, "\nMean per-round time (ms)");
        let _ = writeln!(
            s,
            "{:<36} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}  check",
            "run", "local", "invert", "cues", "policy", "agg", "wall"
        );
        for t in self.timing() {
            let check = match t.consistent {
                Some(true) => "ok",
                Some(false) => "MISMATCH",
                None => "n/a",
            };
            let [l, i, c, p, a] = t.stages;
            let _ = writeln!(
                s,
                "{:<36} {l:>10.1} {i:>10.1} {c:>10.1} {p:>10.1} {a:>10.1} {:>10.1}  {check}",
                t.run, t.wall_ms
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// Writes `accuracy.csv`, `timing.csv` and `series.csv` into `out`.
    pub fn write_csv(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("accuracy.csv"))?;
        w.write_record(["defense", "attack", "final_acc_mean", "runs"])?;
        for ((d, a), (m, n)) in self.accuracy_matrix() {
            w.write_record([d, a, m.to_string(), n.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(out.join("timing.csv"))?;
        w.write_record([
            "run",
            "defense",
            "attack",
            "t_local_ms",
            "t_invert_ms",
            "t_cues_ms",
            "t_policy_ms",
            "t_agg_ms",
            "wall_ms",
        ])?;
        for t in self.timing() {
            let mut rec = vec![t.run, t.defense, t.attack];
            rec.extend(t.stages.iter().map(|x| format!("{x:.3}")));
            rec.push(format!("{:.3}", t.wall_ms));
            w.write_record(rec)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(out.join("series.csv"))?;
        w.write_record(["run", "defense", "attack", "seed", "round", "test_acc"])?;
        for run in &self.runs {
            let label = run.label();
            for r in &run.rows {
                w.write_record([
                    label.clone(),
                    r.defense.clone(),
                    r.attack.clone(),
                    r.seed.to_string(),
                    r.round.to_string(),
                    r.test_acc.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
