//! Training-trajectory and cross-run statistics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fmt;
use crate::manifest::Trajectory;
use crate::ssi::SsiTable;
use crate::stats::{self, Alternative, TTest};

/// Denominator floor for normalized divergence.
pub const DIVERGENCE_EPS: f64 = 1e-9;
/// Default early/late phase boundary, in millions of tokens.
pub const DEFAULT_BOUNDARY: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgressionPoint {
    pub checkpoint: u64,
    pub phenomenon: String,
    pub layer: usize,
    pub ssi: f64,
    /// `|SSI_final − SSI_checkpoint|`.
    pub delta_ssi: f64,
    pub accuracy: Option<f64>,
    /// `|Acc_final − Acc_checkpoint|`, shared by every layer of a phenomenon.
    pub delta_acc: Option<f64>,
    pub z_delta_ssi: Option<f64>,
    pub z_delta_acc: Option<f64>,
}

fn phenomenon_accuracy(traj: &Trajectory, ckpt: u64, phenomenon: &str) -> Option<f64> {
    traj.accuracies.get(&ckpt).and_then(|a| a.per_phenomenon.get(phenomenon).copied())
}

/// Absolute SSI and accuracy differences of every checkpoint from the final
/// one. Cells missing at a checkpoint are skipped and logged.
pub fn progression(traj: &Trajectory) -> Result<Vec<ProgressionPoint>> {
    if traj.checkpoints.len() < 2 {
        return Err(Error::Domain(format!("run {:?} needs >= 2 checkpoints for a progression", traj.run_id)));
    }
    let last = traj.final_checkpoint();
    let fin = traj
        .tables
        .get(&last)
        .ok_or_else(|| Error::Config(format!("run {:?} has no table for final checkpoint {last}", traj.run_id)))?;
    let mut out = Vec::new();
    let mut gaps = 0usize;
    for &ckpt in &traj.checkpoints {
        let Some(table) = traj.tables.get(&ckpt) else {
            gaps += fin.entries.len();
            continue;
        };
        for e in &fin.entries {
            let (Some(final_ssi), Some(ssi)) = (e.ssi, table.ssi(&e.phenomenon, e.layer)) else {
                gaps += 1;
                continue;
            };
            let accuracy = phenomenon_accuracy(traj, ckpt, &e.phenomenon);
            let delta_acc = accuracy.zip(phenomenon_accuracy(traj, last, &e.phenomenon)).map(|(a, f)| (f - a).abs());
            out.push(ProgressionPoint {
                checkpoint: ckpt,
                phenomenon: e.phenomenon.clone(),
                layer: e.layer,
                ssi,
                delta_ssi: (final_ssi - ssi).abs(),
                accuracy,
                delta_acc,
                z_delta_ssi: None,
                z_delta_acc: None,
            });
        }
    }
    if gaps > 0 {
        log::warn!("run {:?}: {gaps} (checkpoint, phenomenon, layer) cells lack SSI and were omitted", traj.run_id);
    }
    Ok(out)
}

/// Groups whose z-scores were forced to 0 (fewer than two values or zero
/// variance).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StandardizeFlags {
    pub delta_ssi: Vec<String>,
    pub delta_acc: Vec<String>,
}

fn standardize_field(
    points: &mut [ProgressionPoint],
    groups: &[&str],
    get: impl Fn(&ProgressionPoint) -> Option<f64>,
    set: impl Fn(&mut ProgressionPoint, f64),
) -> Vec<String> {
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        if get(&points[i]).is_some() {
            members.entry(g).or_default().push(i);
        }
    }
    let mut flagged = Vec::new();
    for (g, idx) in members {
        let xs: Vec<f64> = idx.iter().map(|&i| get(&points[i]).expect("filtered")).collect();
        let (z, degenerate) = stats::zscores(&xs);
        if degenerate {
            flagged.push(g.to_string());
        }
        for (&i, z) in idx.iter().zip(z) {
            set(&mut points[i], z);
        }
    }
    flagged
}

/// z-scores `delta_ssi` and `delta_acc` within each group (sample SD).
/// `groups[i]` is the group key of `points[i]`.
pub fn standardize(points: &mut [ProgressionPoint], groups: &[&str]) -> Result<StandardizeFlags> {
    if points.len() != groups.len() {
        return Err(Error::Config(format!("{} points but {} group keys", points.len(), groups.len())));
    }
    let delta_ssi = standardize_field(points, groups, |p| Some(p.delta_ssi), |p, z| p.z_delta_ssi = Some(z));
    let delta_acc = standardize_field(points, groups, |p| p.delta_acc, |p, z| p.z_delta_acc = Some(z));
    for g in delta_ssi.iter().chain(&delta_acc) {
        log::warn!("group {g:?} is degenerate; its z-scores are set to 0");
    }
    Ok(StandardizeFlags { delta_ssi, delta_acc })
}

/// Pearson correlation; `Ok(None)` when either series is constant.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    stats::pearson(x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub ids: Vec<String>,
    /// Symmetric; `None` where a profile is constant.
    pub r: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    /// Off-diagonal entries `r[i][j]` with `i < j`.
    pub fn unique_pairs(&self) -> Vec<(usize, usize, Option<f64>)> {
        let n = self.ids.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| (i, j, self.r[i][j])).collect()
    }
}

pub fn profile_correlation_matrix(profiles: &[(String, Vec<f64>)]) -> Result<CorrelationMatrix> {
    if let Some(first) = profiles.first() {
        if let Some((id, p)) = profiles.iter().find(|(_, p)| p.len() != first.1.len()) {
            return Err(Error::Config(format!(
                "profile {id:?} has {} layers, expected {} (from {:?})",
                p.len(),
                first.1.len(),
                first.0
            )));
        }
    }
    let n = profiles.len();
    let mut r = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = correlate(&profiles[i].1, &profiles[j].1)?;
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    Ok(CorrelationMatrix { ids: profiles.iter().map(|p| p.0.clone()).collect(), r })
}

/// Correlations between profiles of family `a` and family `b`. Within one
/// family, each unordered pair counts once and self-pairs are excluded.
/// Undefined correlations are dropped.
pub fn group_correlations(m: &CorrelationMatrix, families: &[String], a: &str, b: &str) -> Result<Vec<f64>> {
    if families.len() != m.ids.len() {
        return Err(Error::Config(format!("{} family labels for {} profiles", families.len(), m.ids.len())));
    }
    let mut out = Vec::new();
    for (i, j, r) in m.unique_pairs() {
        let (fi, fj) = (families[i].as_str(), families[j].as_str());
        if let Some(r) = r.filter(|_| (fi, fj) == (a, b) || (fi, fj) == (b, a)) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Welch's t-test of `mean(a) − mean(b)` with Satterthwaite df.
pub fn welch_t(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TTest> {
    stats::welch_t(a, b, alternative)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Early,
    Late,
}

impl Phase {
    pub fn of(checkpoint: u64, boundary: u64) -> Phase {
        if checkpoint <= boundary {
            Phase::Early
        } else {
            Phase::Late
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Early => "early",
            Phase::Late => "late",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergencePoint {
    pub checkpoint: u64,
    pub phenomenon: String,
    pub layer: usize,
    pub ssi_a: Option<f64>,
    pub ssi_b: Option<f64>,
    /// `|SSI_A − SSI_B|`; `None` when either side is missing.
    pub raw_delta: Option<f64>,
    /// `raw_delta / mean(SSI_A, SSI_B)`; `None` when that mean is below
    /// [`DIVERGENCE_EPS`] in magnitude.
    pub normalized_delta: Option<f64>,
    pub phase: Phase,
}

fn cell_key(t: &SsiTable) -> (Vec<&String>, &Vec<usize>) {
    (t.phenomena.iter().collect(), &t.layers)
}

/// Seed divergence over the checkpoints both runs share.
pub fn divergence(a: &Trajectory, b: &Trajectory, boundary_tokens: u64) -> Result<Vec<DivergencePoint>> {
    let shared: Vec<u64> = a.checkpoints.iter().copied().filter(|c| b.tables.contains_key(c)).collect();
    if shared.is_empty() {
        return Err(Error::Config(format!("runs {:?} and {:?} share no checkpoints", a.run_id, b.run_id)));
    }
    let mut out = Vec::new();
    for ckpt in shared {
        let (ta, tb) = (&a.tables[&ckpt], &b.tables[&ckpt]);
        if cell_key(ta) != cell_key(tb) {
            return Err(Error::Config(format!(
                "checkpoint {ckpt}: runs {:?} and {:?} cover different phenomena or layers",
                a.run_id, b.run_id
            )));
        }
        for (ea, eb) in ta.entries.iter().zip(&tb.entries) {
            let raw_delta = ea.ssi.zip(eb.ssi).map(|(x, y)| (x - y).abs());
            let normalized_delta = ea.ssi.zip(eb.ssi).zip(raw_delta).and_then(|((x, y), raw)| {
                let mean = (x + y) / 2.0;
                (mean.abs() >= DIVERGENCE_EPS).then(|| raw / mean)
            });
            out.push(DivergencePoint {
                checkpoint: ckpt,
                phenomenon: ea.phenomenon.clone(),
                layer: ea.layer,
                ssi_a: ea.ssi,
                ssi_b: eb.ssi,
                raw_delta,
                normalized_delta,
                phase: Phase::of(ckpt, boundary_tokens),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseStats {
    pub early_mean: f64,
    pub late_mean: f64,
    pub n_early: usize,
    pub n_late: usize,
    /// Cells with values in both phases.
    pub n_cells: usize,
    /// Mean over cells of `mean(late) − mean(early)`.
    pub mean_cell_difference: f64,
    /// Two-sided one-sample t-test of the cell differences against 0.
    pub cell_test: TTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub normalized: PhaseStats,
    pub raw: PhaseStats,
}

fn phase_stats(points: &[DivergencePoint], get: impl Fn(&DivergencePoint) -> Option<f64>) -> Result<PhaseStats> {
    let mut early = Vec::new();
    let mut late = Vec::new();
    let mut cells: BTreeMap<(&str, usize), [Vec<f64>; 2]> = BTreeMap::new();
    for p in points {
        let Some(v) = get(p) else { continue };
        let k = match p.phase {
            Phase::Early => {
                early.push(v);
                0
            }
            Phase::Late => {
                late.push(v);
                1
            }
        };
        cells.entry((&p.phenomenon, p.layer)).or_default()[k].push(v);
    }
    if early.is_empty() || late.is_empty() {
        return Err(Error::Domain(format!(
            "phase summary needs both phases populated ({} early, {} late values)",
            early.len(),
            late.len()
        )));
    }
    let diffs: Vec<f64> = cells
        .values()
        .filter(|[e, l]| !e.is_empty() && !l.is_empty())
        .map(|[e, l]| stats::mean(l) - stats::mean(e))
        .collect();
    let cell_test = stats::one_sample_t(&diffs, 0.0, Alternative::TwoSided)?;
    Ok(PhaseStats {
        early_mean: stats::mean(&early),
        late_mean: stats::mean(&late),
        n_early: early.len(),
        n_late: late.len(),
        n_cells: diffs.len(),
        mean_cell_difference: stats::mean(&diffs),
        cell_test,
    })
}

pub fn phase_summary(points: &[DivergencePoint]) -> Result<PhaseSummary> {
    Ok(PhaseSummary { normalized: phase_stats(points, |p| p.normalized_delta)?, raw: phase_stats(points, |p| p.raw_delta)? })
}

/// Change in SSI from the first to the final checkpoint, per cell, with a
/// one-sided one-sample t-test for growth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthTest {
    pub first_checkpoint: u64,
    pub final_checkpoint: u64,
    pub n_cells: usize,
    pub mean_delta: f64,
    pub test: TTest,
}

pub fn growth_test(traj: &Trajectory) -> Result<GrowthTest> {
    let (first, last) = match traj.checkpoints.as_slice() {
        [f, .., l] => (*f, *l),
        _ => return Err(Error::Domain(format!("run {:?} needs >= 2 checkpoints", traj.run_id))),
    };
    let (t0, t1) = (&traj.tables[&first], &traj.tables[&last]);
    let deltas: Vec<f64> = t1
        .entries
        .iter()
        .filter_map(|e| Some(e.ssi? - t0.ssi(&e.phenomenon, e.layer)?))
        .collect();
    let test = stats::one_sample_t(&deltas, 0.0, Alternative::Greater)?;
    Ok(GrowthTest {
        first_checkpoint: first,
        final_checkpoint: last,
        n_cells: deltas.len(),
        mean_delta: stats::mean(&deltas),
        test,
    })
}

/// Pearson correlation of ΔSSI with ΔAccuracy over points carrying both.
pub fn delta_correlation(points: &[ProgressionPoint]) -> Result<Option<f64>> {
    let (x, y): (Vec<f64>, Vec<f64>) = points.iter().filter_map(|p| Some((p.delta_ssi, p.delta_acc?))).unzip();
    if x.len() < 2 {
        return Ok(None);
    }
    correlate(&x, &y)
}

/// One row of the long-format export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongRow {
    pub run_id: String,
    pub seed: u64,
    pub model_family: String,
    pub checkpoint_tokens: u64,
    pub phenomenon: String,
    pub layer: usize,
    pub ssi: Option<f64>,
    pub delta_ssi: Option<f64>,
    pub z_delta_ssi: Option<f64>,
    pub accuracy: Option<f64>,
    pub delta_acc: Option<f64>,
    pub z_delta_acc: Option<f64>,
    pub raw_divergence: Option<f64>,
    pub normalized_divergence: Option<f64>,
    pub phase: Phase,
}

pub const LONG_CSV_COLUMNS: [&str; 15] = [
    "run_id",
    "seed",
    "model_family",
    "checkpoint_tokens",
    "phenomenon",
    "layer",
    "ssi",
    "delta_ssi",
    "z_delta_ssi",
    "accuracy",
    "delta_acc",
    "z_delta_acc",
    "raw_divergence",
    "normalized_divergence",
    "phase",
];

/// Rows for every (checkpoint, phenomenon, layer) cell of a run. Progression
/// fields are filled from `points` and divergence fields from `divergence`
/// where those cover the cell.
pub fn long_rows(
    traj: &Trajectory,
    points: &[ProgressionPoint],
    divergence: Option<&[DivergencePoint]>,
    boundary: u64,
) -> Vec<LongRow> {
    let prog: BTreeMap<(u64, &str, usize), &ProgressionPoint> =
        points.iter().map(|p| ((p.checkpoint, p.phenomenon.as_str(), p.layer), p)).collect();
    let div: BTreeMap<(u64, &str, usize), &DivergencePoint> = divergence
        .unwrap_or_default()
        .iter()
        .map(|d| ((d.checkpoint, d.phenomenon.as_str(), d.layer), d))
        .collect();
    let mut rows = Vec::new();
    for &ckpt in &traj.checkpoints {
        let Some(table) = traj.tables.get(&ckpt) else { continue };
        for e in &table.entries {
            let key = (ckpt, e.phenomenon.as_str(), e.layer);
            let p = prog.get(&key);
            let d = div.get(&key);
            rows.push(LongRow {
                run_id: traj.run_id.clone(),
                seed: traj.seed,
                model_family: traj.model_family.clone(),
                checkpoint_tokens: ckpt,
                phenomenon: e.phenomenon.clone(),
                layer: e.layer,
                ssi: e.ssi,
                delta_ssi: p.map(|p| p.delta_ssi),
                z_delta_ssi: p.and_then(|p| p.z_delta_ssi),
                accuracy: phenomenon_accuracy(traj, ckpt, &e.phenomenon),
                delta_acc: p.and_then(|p| p.delta_acc),
                z_delta_acc: p.and_then(|p| p.z_delta_acc),
                raw_divergence: d.and_then(|d| d.raw_delta),
                normalized_divergence: d.and_then(|d| d.normalized_delta),
                phase: Phase::of(ckpt, boundary),
            });
        }
    }
    rows
}

pub fn write_long_csv(rows: &[LongRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LONG_CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.model_family.clone(),
            r.checkpoint_tokens.to_string(),
            r.phenomenon.clone(),
            r.layer.to_string(),
            fmt::opt(r.ssi),
            fmt::opt(r.delta_ssi),
            fmt::opt(r.z_delta_ssi),
            fmt::opt(r.accuracy),
            fmt::opt(r.delta_acc),
            fmt::opt(r.z_delta_acc),
            fmt::opt(r.raw_divergence),
            fmt::opt(r.normalized_divergence),
            r.phase.as_str().to_string(),
        ])?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}
