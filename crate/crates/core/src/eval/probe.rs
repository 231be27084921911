use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SampleRecord;

pub const RIDGE_LAMBDA: f64 = 1e-3;

/// Minimum number of records a probe report needs.
pub const MIN_PROBE_RECORDS: usize = 200;

/// Held-out R² of a ridge probe, averaged over the usable targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub r2: f64,
    pub per_target: Vec<(String, f64)>,
    /// Targets that were constant on the fitting half and were skipped.
    pub skipped: Vec<String>,
}

/// Closed-form ridge fit on the first half of the rows of `x`, scored on
/// the second half. `x` is `n x d`; `targets` holds named length-`n` columns.
pub fn ridge_probe(x: &[Vec<f64>], targets: &[(String, Vec<f64>)], lambda: f64) -> Result<ProbeScore> {
    let n = x.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("probe needs at least 4 rows, got {n}")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) || targets.iter().any(|(_, t)| t.len() != n) {
        return Err(Error::InvalidArgument("probe rows and targets disagree in length".into()));
    }
    let half = n / 2;
    let mean = |rows: std::ops::Range<usize>, j: usize| rows.clone().map(|i| x[i][j]).sum::<f64>() / rows.len() as f64;
    let mu: Vec<f64> = (0..d).map(|j| mean(0..half, j)).collect();
    let fit = DMatrix::from_fn(half, d, |i, j| x[i][j] - mu[j]);
    let test = DMatrix::from_fn(n - half, d, |i, j| x[half + i][j] - mu[j]);
    let mut gram = fit.transpose() * &fit;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("probe: regularized Gram matrix is not positive definite".into()))?;

    let mut per_target = Vec::new();
    let mut skipped = Vec::new();
    for (name, t) in targets {
        let t_mu = t[..half].iter().sum::<f64>() / half as f64;
        let t_var = t[..half].iter().map(|v| (v - t_mu).powi(2)).sum::<f64>();
        let test_mu = t[half..].iter().sum::<f64>() / (n - half) as f64;
        let sst = t[half..].iter().map(|v| (v - test_mu).powi(2)).sum::<f64>();
        if t_var <= 1e-12 * half as f64 || sst <= 1e-12 * (n - half) as f64 {
            skipped.push(name.clone());
            continue;
        }
        let y = DMatrix::from_fn(half, 1, |i, _| t[i] - t_mu);
        let w = chol.solve(&(fit.transpose() * y));
        let pred = &test * w;
        let sse: f64 = (0..n - half).map(|i| (t[half + i] - (pred[(i, 0)] + t_mu)).powi(2)).sum();
        per_target.push((name.clone(), 1.0 - sse / sst));
    }
    if per_target.is_empty() {
        return Err(Error::InvalidArgument("probe: every target is constant".into()));
    }
    let r2 = per_target.iter().map(|(_, r)| r).sum::<f64>() / per_target.len() as f64;
    Ok(ProbeScore { r2, per_target, skipped })
}

/// Appearance targets: light direction as (cos, sin), light contrast,
/// albedo and background mean.
pub fn appearance_targets(records: &[&SampleRecord]) -> Vec<(String, Vec<f64>)> {
    let col = |f: &dyn Fn(&SampleRecord) -> f64| records.iter().map(|r| f(r)).collect::<Vec<f64>>();
    vec![
        ("light_cos".into(), col(&|r| r.appearance.light_angle.cos())),
        ("light_sin".into(), col(&|r| r.appearance.light_angle.sin())),
        ("light_contrast".into(), col(&|r| r.appearance.light_contrast)),
        ("albedo".into(), col(&|r| r.appearance.albedo)),
        ("background_mean".into(), col(&|r| r.appearance.background_mean)),
    ]
}

/// Every joint coordinate as its own target.
pub fn joint_targets(records: &[&SampleRecord]) -> Vec<(String, Vec<f64>)> {
    let k = records.first().map_or(0, |r| r.joints.len());
    (0..k)
        .flat_map(|j| {
            [
                (format!("joint{j}_x"), records.iter().map(|r| r.joints[j][0]).collect()),
                (format!("joint{j}_y"), records.iter().map(|r| r.joints[j][1]).collect()),
            ]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub swap_fidelity: Option<f64>,
    pub appearance_from_a: ProbeScore,
    pub appearance_from_p: ProbeScore,
    pub joints_from_p: ProbeScore,
    pub joints_from_a: ProbeScore,
}

impl DisentanglementReport {
    pub fn appearance_gap(&self) -> f64 {
        self.appearance_from_a.r2 - self.appearance_from_p.r2
    }

    pub fn joint_gap(&self) -> f64 {
        self.joints_from_p.r2 - self.joints_from_a.r2
    }
}

/// Probes appearance parameters and joint coordinates from both features.
pub fn probe_report(p: &[Vec<f64>], a: &[Vec<f64>], records: &[&SampleRecord]) -> Result<DisentanglementReport> {
    if records.len() < MIN_PROBE_RECORDS {
        return Err(Error::InvalidArgument(format!(
            "probe report needs at least {MIN_PROBE_RECORDS} records, got {}",
            records.len()
        )));
    }
    let app = appearance_targets(records);
    let joints = joint_targets(records);
    Ok(DisentanglementReport {
        swap_fidelity: None,
        appearance_from_a: ridge_probe(a, &app, RIDGE_LAMBDA)?,
        appearance_from_p: ridge_probe(p, &app, RIDGE_LAMBDA)?,
        joints_from_p: ridge_probe(p, &joints, RIDGE_LAMBDA)?,
        joints_from_a: ridge_probe(a, &joints, RIDGE_LAMBDA)?,
    })
}
