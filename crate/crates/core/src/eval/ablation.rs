use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate_pose;
use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::train::{train, RunLayout, TrainConfig};

/// One named configuration of the ladder. A `resume` equal to the name of
/// an earlier run continues from that run's final checkpoint (same seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Held-out mean joint error (px) per seed.
    pub errors: Vec<f64>,
    pub mean_error: f64,
    /// Improvement over the first row, per seed, in percent.
    pub improvement_pct: Vec<f64>,
    pub mean_improvement_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn from_errors(seeds: &[u64], named: Vec<(String, Vec<f64>)>) -> Self {
        let base = named[0].1.clone();
        let rows = named
            .into_iter()
            .map(|(name, errors)| {
                let improvement_pct: Vec<f64> = errors.iter().zip(&base).map(|(e, b)| 100.0 * (b - e) / b).collect();
                let n = errors.len() as f64;
                AblationRow {
                    name,
                    mean_error: errors.iter().sum::<f64>() / n,
                    mean_improvement_pct: improvement_pct.iter().sum::<f64>() / n,
                    errors,
                    improvement_pct,
                }
            })
            .collect();
        Self { seeds: seeds.to_vec(), rows }
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text table: error and improvement per seed, then averages.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "config");
        for seed in &self.seeds {
            let _ = write!(s, " {:>10} {:>8}", format!("err s{seed}"), "impr");
        }
        let _ = writeln!(s, " {:>10} {:>8}", "mean err", "impr");
        for r in &self.rows {
            let _ = write!(s, "{:<12}", r.name);
            for (e, i) in r.errors.iter().zip(&r.improvement_pct) {
                let _ = write!(s, " {e:>10.3} {:>7.2}%", i);
            }
            let _ = writeln!(s, " {:>10.3} {:>7.2}%", r.mean_error, r.mean_improvement_pct);
        }
        s
    }
}

fn run_dir(out: &Path, name: &str, seed: u64) -> PathBuf {
    out.join(name).join(format!("seed-{seed}"))
}

/// Trains every run for every seed (seed overriding the config's), scores
/// held-out pose error and tabulates improvement over the first run.
pub fn run_ablation(
    runs: &[AblationRun],
    train_set: &Dataset,
    test_set: &Dataset,
    seeds: &[u64],
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    if runs.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one config and one seed".into()));
    }
    let mut named = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let mut errors = Vec::new();
        for &seed in seeds {
            let wrap = |e: Error| Error::Run { name: run.name.clone(), seed, source: Box::new(e) };
            let mut cfg = run.config.clone();
            cfg.seed = seed;
            if let Some(r) = &cfg.resume {
                if let Some(prev) = runs[..i].iter().find(|p| Path::new(&p.name) == r.as_path()) {
                    cfg.resume = Some(RunLayout::new(&run_dir(out, &prev.name, seed)).final_checkpoint());
                }
            }
            let trainer = train(&cfg, train_set, &run_dir(out, &run.name, seed)).map_err(wrap)?;
            let err = evaluate_pose(&trainer.nets, test_set).map_err(wrap)?;
            progress(&format!("{} seed {seed}: {:.3} px", run.name, err.mean_px));
            errors.push(err.mean_px);
        }
        named.push((run.name.clone(), errors));
    }
    Ok(AblationTable::from_errors(seeds, named))
}
