//! Cross-model comparison, knockout deltas, dependence scores and the small
//! statistics suite (bootstrap CIs, paired t, Cohen's d, one-way ANOVA).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};
use crate::pid::{Component, InfoState};
use crate::store::Condition;
use crate::trajectory::{detect_turning_points, ThresholdConfig, Trajectory};

/// Bases below this many bits make a relative change meaningless.
pub const DEGENERATE_BASE: f64 = 1e-6;
pub const NMAE_FORMULA: &str = "mean_l |a_l - b_l| / (mean_l |a_l| + 1e-12)";
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_SEED: u64 = 42;

// ---------------------------------------------------------------------------
// Elementary statistics
// ---------------------------------------------------------------------------

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn nmae(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let den = a.iter().map(|x| x.abs()).sum::<f64>() / a.len() as f64;
    num / (den + 1e-12)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkOffsets {
    pub uv_peak: Option<i64>,
    pub ul_trough: Option<i64>,
    pub ul_surge_onset: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `None` marks a constant series (r undefined).
    pub pearson_per_component: BTreeMap<Component, Option<f64>>,
    /// Mean r over the defined PID components (R, U_V, U_L, S).
    pub mean_r: Option<f64>,
    pub flagged: Vec<Component>,
    pub nmae_per_component: BTreeMap<Component, f64>,
    pub nmae_formula: String,
    /// b minus a, per landmark; absent when either side lacks it.
    pub turning_point_offsets: Option<LandmarkOffsets>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,pearson_r,nmae\n");
        for c in Component::ALL {
            let r = self.pearson_per_component[&c].map_or("NA".to_string(), |r| format!("{r:.6}"));
            let _ = writeln!(out, "{},{},{:.6}", c.name(), r, self.nmae_per_component[&c]);
        }
        out
    }
}

pub fn compare_trajectories(a: &Trajectory, b: &Trajectory, cfg: &ThresholdConfig) -> Result<ComparisonReport> {
    if a.states.len() != b.states.len() {
        return Err(Error::Dimension(format!(
            "trajectories have {} and {} layers",
            a.states.len(),
            b.states.len()
        )));
    }
    let mut pearson_per_component = BTreeMap::new();
    let mut nmae_per_component = BTreeMap::new();
    let mut flagged = Vec::new();
    for c in Component::ALL {
        let (sa, sb) = (a.series(c), b.series(c));
        let r = pearson(&sa, &sb);
        if r.is_none() {
            flagged.push(c);
        }
        pearson_per_component.insert(c, r);
        nmae_per_component.insert(c, nmae(&sa, &sb));
    }
    let defined: Vec<f64> = Component::PID
        .iter()
        .filter_map(|c| pearson_per_component[c])
        .collect();
    let mean_r = (!defined.is_empty()).then(|| mean(&defined));
    let turning_point_offsets = match (detect_turning_points(a, cfg), detect_turning_points(b, cfg)) {
        (Ok(ta), Ok(tb)) => {
            let off = |x: Option<usize>, y: Option<usize>| Some(y? as i64 - x? as i64);
            Some(LandmarkOffsets {
                uv_peak: off(ta.uv_peak, tb.uv_peak),
                ul_trough: off(ta.ul_trough, tb.ul_trough),
                ul_surge_onset: off(ta.ul_surge_onset, tb.ul_surge_onset),
            })
        }
        _ => None,
    };
    Ok(ComparisonReport {
        pearson_per_component,
        mean_r,
        flagged,
        nmae_per_component,
        nmae_formula: NMAE_FORMULA.to_string(),
        turning_point_offsets,
    })
}

/// Per-component average r across several comparisons (e.g. one per task),
/// plus the average of the per-comparison means.
pub fn average_comparisons(reports: &[ComparisonReport]) -> (BTreeMap<Component, f64>, f64) {
    let mut avg = BTreeMap::new();
    for c in Component::PID {
        let rs: Vec<f64> = reports.iter().filter_map(|r| r.pearson_per_component[&c]).collect();
        if !rs.is_empty() {
            avg.insert(c, mean(&rs));
        }
    }
    let means: Vec<f64> = reports.iter().filter_map(|r| r.mean_r).collect();
    (avg, if means.is_empty() { f64::NAN } else { mean(&means) })
}

// ---------------------------------------------------------------------------
// Knockout deltas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaStatus {
    Defined,
    /// Base and knockout both below the degenerate floor; delta set to 0.
    DegenerateZero,
    /// Base below the floor but knockout is not.
    UndefinedBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub base: f64,
    pub ko: f64,
    /// Percent; `None` for an undefined base.
    pub percent: Option<f64>,
    pub status: DeltaStatus,
}

impl Delta {
    pub fn new(base: f64, ko: f64) -> Self {
        if base.abs() < DEGENERATE_BASE {
            if ko.abs() < DEGENERATE_BASE {
                Delta {
                    base,
                    ko,
                    percent: Some(0.0),
                    status: DeltaStatus::DegenerateZero,
                }
            } else {
                Delta {
                    base,
                    ko,
                    percent: None,
                    status: DeltaStatus::UndefinedBase,
                }
            }
        } else {
            Delta {
                base,
                ko,
                percent: Some((ko - base) / base * 100.0),
                status: DeltaStatus::Defined,
            }
        }
    }

    /// Percent change when it is meaningful for scoring and predictions.
    pub fn defined(&self) -> Option<f64> {
        match self.status {
            DeltaStatus::Defined => self.percent,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDeltas {
    pub layer: usize,
    pub deltas: BTreeMap<Component, Delta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Confirmed,
    Refuted,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictions {
    /// Knockout raises U_V.
    pub p1: Verdict,
    /// Knockout raises S.
    pub p2: Verdict,
    /// Knockout raises I_tot.
    pub p3: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepScore {
    pub percent: f64,
    pub partial: bool,
    /// Number of defined deltas the mean was taken over.
    pub terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub component: Component,
    pub paired: PairedEffect,
    /// Bootstrap CI of the mean per-layer difference (knockout - base), bits.
    pub mean_diff_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutReport {
    pub model_id: String,
    pub task_id: String,
    /// Pathway labels (source token set -> target token set).
    pub source_set: String,
    pub target_set: String,
    pub per_layer: Vec<LayerDeltas>,
    pub final_layer: BTreeMap<Component, Delta>,
    pub dep_score: Option<DepScore>,
    pub predictions: Predictions,
    /// Paired statistics with layers as the paired units.
    pub stats: Vec<ComponentStats>,
}

impl KnockoutReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,component,base,knockout,delta_pct,status\n");
        for l in &self.per_layer {
            for (c, d) in &l.deltas {
                let pct = d.percent.map_or("NA".to_string(), |p| format!("{p:.6}"));
                let status = serde_json::to_value(d.status)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{},{}",
                    l.layer,
                    c.name(),
                    d.base,
                    d.ko,
                    pct,
                    status
                );
            }
        }
        out
    }
}

fn state_deltas(base: &InfoState, ko: &InfoState) -> BTreeMap<Component, Delta> {
    Component::ALL
        .iter()
        .map(|&c| (c, Delta::new(base.component(c), ko.component(c))))
        .collect()
}

/// Relative change (percent) of every component at every layer, final-layer
/// predictions and the dependence score.
pub fn knockout_deltas(base: &Trajectory, ko: &Trajectory) -> Result<KnockoutReport> {
    if base.states.len() != ko.states.len() {
        return Err(Error::Dimension(format!(
            "baseline has {} layers, knockout has {}",
            base.states.len(),
            ko.states.len()
        )));
    }
    let (bm, km) = (&base.meta, &ko.meta);
    if bm.model_id != km.model_id || bm.task_id != km.task_id {
        return Err(Error::Invalid(format!(
            "meta mismatch: {}/{} vs {}/{}",
            bm.model_id, bm.task_id, km.model_id, km.task_id
        )));
    }
    if bm.condition == Some(Condition::Knockout) || km.condition == Some(Condition::Normal) {
        return Err(Error::Invalid(
            "expected a normal baseline and a knockout trajectory".into(),
        ));
    }
    let per_layer: Vec<LayerDeltas> = base
        .states
        .iter()
        .zip(&ko.states)
        .map(|(b, k)| LayerDeltas {
            layer: b.layer,
            deltas: state_deltas(b, k),
        })
        .collect();
    let final_layer = per_layer.last().expect("non-empty").deltas.clone();
    let mut stats = Vec::new();
    if base.states.len() >= 2 {
        for c in Component::ALL {
            let (a, b) = (base.series(c), ko.series(c));
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
            stats.push(ComponentStats {
                component: c,
                paired: paired_effect(&a, &b)?,
                mean_diff_ci: bootstrap_ci(
                    BootstrapSample::Mean(&diffs),
                    DEFAULT_RESAMPLES,
                    DEFAULT_LEVEL,
                    DEFAULT_SEED,
                )?,
            });
        }
    }
    let mut report = KnockoutReport {
        model_id: bm.model_id.clone(),
        task_id: bm.task_id.clone(),
        source_set: "image".into(),
        target_set: "question".into(),
        per_layer,
        final_layer,
        dep_score: None,
        predictions: Predictions {
            p1: Verdict::Degenerate,
            p2: Verdict::Degenerate,
            p3: Verdict::Degenerate,
        },
        stats,
    };
    report.predictions = evaluate_predictions(&report);
    report.dep_score = dependence_score(&report).ok();
    Ok(report)
}

/// Final-layer deltas assembled from a bare pair of states.
pub fn final_deltas(base: &InfoState, ko: &InfoState) -> BTreeMap<Component, Delta> {
    state_deltas(base, ko)
}

/// Mean of the defined ΔU_V, ΔS and ΔI_tot at the final layer.
pub fn dependence_score(report: &KnockoutReport) -> Result<DepScore> {
    dep_from_deltas(&report.final_layer)
}

pub fn dep_from_deltas(deltas: &BTreeMap<Component, Delta>) -> Result<DepScore> {
    let terms: Vec<f64> = [Component::UV, Component::S, Component::Total]
        .iter()
        .filter_map(|c| deltas.get(c).and_then(Delta::defined))
        .collect();
    if terms.is_empty() {
        return Err(Error::Invalid("all dependence-score deltas are undefined".into()));
    }
    Ok(DepScore {
        percent: mean(&terms),
        partial: terms.len() < 3,
        terms: terms.len(),
    })
}

pub fn evaluate_predictions(report: &KnockoutReport) -> Predictions {
    predictions_from_deltas(&report.final_layer)
}

pub fn predictions_from_deltas(deltas: &BTreeMap<Component, Delta>) -> Predictions {
    let verdict = |c: Component| match deltas.get(&c).and_then(Delta::defined) {
        None => Verdict::Degenerate,
        Some(d) if d > 0.0 => Verdict::Confirmed,
        Some(_) => Verdict::Refuted,
    };
    Predictions {
        p1: verdict(Component::UV),
        p2: verdict(Component::S),
        p3: verdict(Component::Total),
    }
}

// ---------------------------------------------------------------------------
// Statistics suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum BootstrapSample<'a> {
    Mean(&'a [f64]),
    PearsonPaired(&'a [f64], &'a [f64]),
}

impl BootstrapSample<'_> {
    fn len(&self) -> usize {
        match self {
            BootstrapSample::Mean(v) => v.len(),
            BootstrapSample::PearsonPaired(a, _) => a.len(),
        }
    }

    fn statistic(&self, idx: &[usize]) -> f64 {
        match self {
            BootstrapSample::Mean(v) => idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64,
            BootstrapSample::PearsonPaired(a, b) => {
                let xa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
                let xb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
                pearson(&xa, &xb).unwrap_or(f64::NAN)
            }
        }
    }
}

/// Percentile bootstrap interval; deterministic given `seed`. Resamples whose
/// statistic is undefined (a constant Pearson resample) are skipped.
pub fn bootstrap_ci(sample: BootstrapSample<'_>, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::Invalid(format!("bootstrap needs at least 2 values, got {n}")));
    }
    if let BootstrapSample::PearsonPaired(a, b) = sample {
        if a.len() != b.len() {
            return Err(Error::Dimension("paired bootstrap length mismatch".into()));
        }
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::Invalid("bootstrap level in (0,1) and resamples > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        let s = sample.statistic(&idx);
        if s.is_finite() {
            stats.push(s);
        }
    }
    if stats.is_empty() {
        return Err(Error::Numeric("every bootstrap resample was degenerate".into()));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&stats, alpha), quantile(&stats, 1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedEffect {
    /// `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub dof: usize,
    /// Mean difference over its sample sd; 0 when every difference is 0.
    pub cohens_d: Option<f64>,
    /// Two-sided p-value for `t`.
    pub p_value: Option<f64>,
    pub degenerate: bool,
}

/// Paired t statistic and Cohen's d on the differences `b - a`.
pub fn paired_effect(a: &[f64], b: &[f64]) -> Result<PairedEffect> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("paired effect needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = diffs.len();
    let m = mean(&diffs);
    let sd = sample_sd(&diffs);
    let dof = n - 1;
    if !(sd > 0.0) {
        return Ok(PairedEffect {
            t: None,
            dof,
            cohens_d: (m == 0.0).then_some(0.0),
            p_value: None,
            degenerate: true,
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedEffect {
        t: Some(t),
        dof,
        cohens_d: Some(m / sd),
        p_value: Some(p),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
}

/// One-way ANOVA over groups (e.g. Dep scores grouped by task).
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    if k < 2 || groups.iter().any(Vec::is_empty) || n <= k {
        return Err(Error::Invalid(
            "ANOVA needs >= 2 non-empty groups and more values than groups".into(),
        ));
    }
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for g in groups {
        let m = mean(g);
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        ssw += g.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    let (dfb, dfw) = (k - 1, n - k);
    if !(ssw > 0.0) {
        return Err(Error::Numeric("ANOVA within-group variance is zero".into()));
    }
    let f = (ssb / dfb as f64) / (ssw / dfw as f64);
    let dist = FisherSnedecor::new(dfb as f64, dfw as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(AnovaResult {
        f,
        df_between: dfb,
        df_within: dfw,
        p_value: 1.0 - dist.cdf(f),
    })
}

// ---------------------------------------------------------------------------
// Final-layer summary
// ---------------------------------------------------------------------------

/// Final-layer composition in the column order R, U_L, U_V, S, Total, U_L share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub r: f64,
    pub u_l: f64,
    pub u_v: f64,
    pub s: f64,
    pub total: f64,
    pub u_l_share: f64,
}

impl ShareRow {
    pub const HEADER: &'static str = "R,U_L,U_V,S,Total,U_L_share";

    pub fn from_state(s: &InfoState) -> Self {
        ShareRow {
            r: s.r,
            u_l: s.u_l,
            u_v: s.u_v,
            s: s.s,
            total: s.i_tot,
            u_l_share: if s.i_tot > 0.0 { s.u_l / s.i_tot } else { f64::NAN },
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{:.2},{:.2},{:.1}%",
            self.r,
            self.u_l,
            self.u_v,
            self.s,
            self.total,
            self.u_l_share * 100.0
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{assemble_trajectory, TrajectoryMeta};
    use rand_distr::{Distribution, StandardNormal};

    fn traj(rows: &[[f64; 4]], condition: Condition) -> Trajectory {
        let states = rows
            .iter()
            .enumerate()
            .map(|(l, c)| InfoState::new(l, c[0], c[1], c[2], c[3]))
            .collect();
        let meta = TrajectoryMeta {
            model_id: "m".into(),
            task_id: "t".into(),
            condition: Some(condition),
            ..Default::default()
        };
        assemble_trajectory(states, meta).unwrap()
    }

    fn ramp(n: usize) -> Vec<[f64; 4]> {
        (0..n)
            .map(|l| {
                let x = l as f64;
                [0.5 + 0.1 * x, 3.0 / (1.0 + x), 1.0 + 0.2 * x * x, 0.3 + 0.05 * (x * 0.7).sin()]
            })
            .collect()
    }

    #[test]
    fn identical_and_doubled_comparison() {
        let a = traj(&ramp(12), Condition::Normal);
        let rep = compare_trajectories(&a, &a, &ThresholdConfig::default()).unwrap();
        for c in Component::ALL {
            assert!((rep.pearson_per_component[&c].unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(rep.nmae_per_component[&c], 0.0);
        }
        let off = rep.turning_point_offsets.unwrap();
        assert_eq!(off.uv_peak, Some(0));

        let b = a.scaled(2.0);
        let rep = compare_trajectories(&a, &b, &ThresholdConfig::default()).unwrap();
        for c in Component::PID {
            assert!((rep.pearson_per_component[&c].unwrap() - 1.0).abs() < 1e-12);
            assert!((rep.nmae_per_component[&c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_series_flagged() {
        let rows: Vec<[f64; 4]> = (0..6).map(|l| [1.0, l as f64, 1.0, 0.5]).collect();
        let a = traj(&rows, Condition::Normal);
        let rep = compare_trajectories(&a, &a, &ThresholdConfig::default()).unwrap();
        assert!(rep.flagged.contains(&Component::R));
        assert_eq!(rep.pearson_per_component[&Component::R], None);
        assert!((rep.mean_r.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_rules() {
        assert!((Delta::new(2.0, 2.5).percent.unwrap() - 25.0).abs() < 1e-12);
        let d = Delta::new(23.20, 25.20).percent.unwrap();
        assert!((d - 8.62).abs() < 0.01);
        let z = Delta::new(0.0, 0.0);
        assert_eq!((z.percent, z.status), (Some(0.0), DeltaStatus::DegenerateZero));
        let u = Delta::new(0.0, 0.3);
        assert_eq!((u.percent, u.status), (None, DeltaStatus::UndefinedBase));
    }

    fn pct_deltas(uv: Option<f64>, s: f64, tot: f64) -> BTreeMap<Component, Delta> {
        let mk = |p: Option<f64>| match p {
            Some(p) => Delta::new(1.0, 1.0 + p / 100.0),
            None => Delta::new(0.0, 0.0),
        };
        [(Component::UV, mk(uv)), (Component::S, mk(Some(s))), (Component::Total, mk(Some(tot)))]
            .into_iter()
            .collect()
    }

    #[test]
    fn dep_scores() {
        let dep = dep_from_deltas(&pct_deltas(Some(18.1), 25.9, 8.6)).unwrap();
        assert!((dep.percent - 17.533_333_333_333_33).abs() < 1e-9);
        assert!(!dep.partial);
        let dep = dep_from_deltas(&pct_deltas(None, 25.2, 10.0)).unwrap();
        assert!((dep.percent - 17.6).abs() < 1e-9);
        assert!(dep.partial && dep.terms == 2);
        assert_eq!(dep_from_deltas(&pct_deltas(Some(0.0), 0.0, 0.0)).unwrap().percent, 0.0);
        let none: BTreeMap<Component, Delta> =
            [Component::UV, Component::S, Component::Total].iter().map(|&c| (c, Delta::new(0.0, 0.0))).collect();
        assert!(dep_from_deltas(&none).is_err());
    }

    #[test]
    fn prediction_verdicts() {
        let p = predictions_from_deltas(&pct_deltas(Some(18.1), 25.9, 8.6));
        assert_eq!((p.p1, p.p2, p.p3), (Verdict::Confirmed, Verdict::Confirmed, Verdict::Confirmed));
        let p = predictions_from_deltas(&pct_deltas(Some(4.5), -3.9, -0.9));
        assert_eq!((p.p1, p.p2, p.p3), (Verdict::Confirmed, Verdict::Refuted, Verdict::Refuted));
        let all: BTreeMap<Component, Delta> =
            [Component::UV, Component::S, Component::Total].iter().map(|&c| (c, Delta::new(0.0, 1.0))).collect();
        let p = predictions_from_deltas(&all);
        assert_eq!((p.p1, p.p2, p.p3), (Verdict::Degenerate, Verdict::Degenerate, Verdict::Degenerate));
    }

    #[test]
    fn knockout_report_and_meta_checks() {
        let base = traj(&ramp(8), Condition::Normal);
        let ko_rows: Vec<[f64; 4]> = ramp(8).iter().map(|r| [r[0], r[1] * 1.2, r[2], r[3] * 1.1]).collect();
        let ko = traj(&ko_rows, Condition::Knockout);
        let rep = knockout_deltas(&base, &ko).unwrap();
        assert!((rep.final_layer[&Component::UV].percent.unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(rep.predictions.p1, Verdict::Confirmed);
        assert!(rep.dep_score.is_some());
        assert_eq!(rep.stats.len(), 5);
        assert!(rep.to_csv().lines().count() == 1 + 8 * 5);

        assert!(knockout_deltas(&ko, &base).is_err());
        let mut other = ko.clone();
        other.meta.task_id = "x".into();
        assert!(knockout_deltas(&base, &other).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let c = [5.0; 4];
        assert_eq!(bootstrap_ci(BootstrapSample::Mean(&c), 1000, 0.95, 42).unwrap(), (5.0, 5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = bootstrap_ci(BootstrapSample::Mean(&xs), 1000, 0.95, 42).unwrap();
        let b = bootstrap_ci(BootstrapSample::Mean(&xs), 1000, 0.95, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.0 < 0.0 && a.1 > 0.0);
        let expected = 2.0 * 1.96 / (1000f64).sqrt();
        assert!(((a.1 - a.0) - expected).abs() < 0.2 * expected, "{a:?}");
        assert!(bootstrap_ci(BootstrapSample::Mean(&[]), 10, 0.95, 1).is_err());
    }

    #[test]
    fn paired_examples() {
        let a = [0.0, 0.0, 0.0];
        let b = [0.5, 1.0, 1.5];
        let e = paired_effect(&a, &b).unwrap();
        assert!((e.cohens_d.unwrap() - 2.0).abs() < 1e-12);
        assert!((e.t.unwrap() - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(e.dof, 2);
        let same = paired_effect(&b, &b).unwrap();
        assert!(same.degenerate && same.t.is_none());
        assert_eq!(same.cohens_d, Some(0.0));
        assert!(paired_effect(&a, &b[..2]).is_err());
    }

    #[test]
    fn anova_separates_groups() {
        let groups = vec![vec![1.0, 1.1, 0.9], vec![5.0, 5.2, 4.8], vec![1.0, 0.8, 1.2]];
        let r = anova_oneway(&groups).unwrap();
        assert!(r.f > 100.0 && r.p_value < 1e-4);
        assert_eq!((r.df_between, r.df_within), (2, 6));
        assert!(anova_oneway(&groups[..1]).is_err());
    }

    #[test]
    fn share_row_order() {
        let s = InfoState::new(31, 0.13, 0.50, 18.83, 0.65);
        let row = ShareRow::from_state(&s);
        assert_eq!(row.csv_row(), "0.13,18.83,0.50,0.65,20.11,93.6%");
    }
}
