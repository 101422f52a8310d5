//! Layer-indexed PID trajectories, turning-point detection and mechanism
//! classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pid::{Component, InfoState};
use crate::store::{self, Condition};

/// Tolerance (bits) for the stored-vs-recomputed total cross-check.
const TOTAL_CHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub model_id: String,
    pub task_id: String,
    pub condition: Option<Condition>,
    /// Per-layer (d'_V, d'_L) after reduction.
    #[serde(default)]
    pub d_prime: Vec<(usize, usize)>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<InfoState>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    /// Index of the final layer (`L`).
    pub fn last_layer(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &InfoState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn series(&self, c: Component) -> Vec<f64> {
        self.states.iter().map(|s| s.component(c)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(InfoState::CSV_HEADER);
        out.push('\n');
        for s in &self.states {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, meta: TrajectoryMeta) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == InfoState::CSV_HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "trajectory csv header {other:?}, expected {:?}",
                    InfoState::CSV_HEADER
                )))
            }
        }
        let states = lines.map(InfoState::from_csv_row).collect::<Result<Vec<_>>>()?;
        assemble_trajectory(states, meta)
    }

    /// Multiplies every component at every layer by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut t = self.clone();
        for s in &mut t.states {
            s.r *= c;
            s.u_v *= c;
            s.u_l *= c;
            s.s *= c;
            s.i_tot *= c;
        }
        t
    }
}

/// Sorts states by layer, checks contiguity from 0 and cross-checks I_tot.
pub fn assemble_trajectory(mut states: Vec<InfoState>, meta: TrajectoryMeta) -> Result<Trajectory> {
    if states.is_empty() {
        return Err(Error::Invalid("trajectory needs at least one state".into()));
    }
    states.sort_by_key(|s| s.layer);
    for (i, s) in states.iter().enumerate() {
        if s.layer != i {
            let what = if i > 0 && states[i - 1].layer == s.layer {
                format!("duplicate layer {}", s.layer)
            } else {
                format!("missing layer {i}")
            };
            return Err(Error::Invalid(what));
        }
        let comps = [s.r, s.u_v, s.u_l, s.s, s.i_tot];
        if comps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at layer {i}")));
        }
        // Clamped components legitimately break the sum; otherwise the stored
        // total must agree with the recomputed one.
        let gap = (s.component_sum() - s.i_tot).abs();
        if s.clamp_flags == 0 && gap > TOTAL_CHECK_TOLERANCE.max(0.01 * s.i_tot.abs()) {
            return Err(Error::Invalid(format!(
                "layer {i}: I_tot {} disagrees with component sum {}",
                s.i_tot,
                s.component_sum()
            )));
        }
    }
    Ok(Trajectory { states, meta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    /// Absolute synergy floor in bits.
    pub tau_s: f64,
    /// Synergy share floor.
    pub gamma: f64,
    /// Language-unique share floor.
    pub eta: f64,
    /// Redundancy dominance margin.
    pub rho: f64,
    /// Reference layer for redundancy growth.
    pub ell0: usize,
    /// The U_V peak must lie before this fraction of the depth.
    pub peak_window_fraction: f64,
    pub smoothing_window: usize,
    /// Local maxima below min + prominence * range are ignored.
    pub prominence: f64,
    /// Surge onset: first forward difference above this fraction of the max.
    pub surge_fraction: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            tau_s: 0.5,
            gamma: 0.15,
            eta: 0.45,
            rho: 1.5,
            ell0: 0,
            peak_window_fraction: 0.5,
            smoothing_window: 3,
            prominence: 0.1,
            surge_fraction: 0.25,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_s > 0.0
            && self.gamma > 0.0
            && self.gamma < 1.0
            && self.eta > 0.0
            && self.eta < 1.0
            && self.rho > 1.0
            && self.peak_window_fraction > 0.0
            && self.peak_window_fraction <= 1.0
            && self.smoothing_window % 2 == 1
            && (0.0..1.0).contains(&self.prominence)
            && self.surge_fraction > 0.0
            && self.surge_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad threshold config {self:?}")))
        }
    }
}

/// Centred moving average with edge replication. Window 1 is the identity.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let h = (window / 2) as isize;
    let n = series.len() as isize;
    (0..n)
        .map(|i| {
            let sum: f64 = (i - h..=i + h).map(|j| series[j.clamp(0, n - 1) as usize]).sum();
            sum / window as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub smoothing_window: usize,
    pub trough_window: (usize, usize),
    pub surge_fraction: f64,
    pub surge_search_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurningPoints {
    pub uv_peak: Option<usize>,
    pub ul_trough: Option<usize>,
    pub ul_surge_onset: Option<usize>,
    /// Set when all three exist but are not ordered peak <= trough <= onset.
    pub order_violated: bool,
    pub detector_params: DetectorParams,
}

fn argmax(xs: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo..=hi {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

fn argmin(xs: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo..=hi {
        if xs[i] < xs[best] {
            best = i;
        }
    }
    best
}

/// Landmarks are located on the smoothed series and then snapped to the
/// extreme raw value within half a window, so smoothing cannot shift a
/// landmark on an already-clean series.
pub fn detect_turning_points(traj: &Trajectory, cfg: &ThresholdConfig) -> Result<TurningPoints> {
    cfg.validate()?;
    let n = traj.states.len();
    if n < 5 {
        return Err(Error::Invalid(format!("turning points need at least 5 layers, got {n}")));
    }
    let last = n - 1;
    let half = cfg.smoothing_window / 2;
    let uv = traj.series(Component::UV);
    let ul = traj.series(Component::UL);
    let uv_s = smooth(&uv, cfg.smoothing_window);
    let ul_s = smooth(&ul, cfg.smoothing_window);

    let p = argmax(&uv_s, 0, last);
    let uv_peak = argmax(&uv, p.saturating_sub(half), (p + half).min(last));

    let (lo, hi) = (2, last.saturating_sub(3));
    let ul_trough = if hi <= lo || ul_s[lo..=hi].windows(2).all(|w| w[1] >= w[0]) {
        None
    } else {
        let t = argmin(&ul_s, lo, hi);
        Some(argmin(&ul, t.saturating_sub(half).max(lo), (t + half).min(hi)))
    };

    let start = ul_trough.unwrap_or(last.div_ceil(2));
    let diffs: Vec<f64> = ul.windows(2).map(|w| w[1] - w[0]).collect();
    let max_diff = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ul_surge_onset = if max_diff > 0.0 {
        (start..diffs.len()).find(|&l| diffs[l] > cfg.surge_fraction * max_diff)
    } else {
        None
    };

    let order_violated = match (Some(uv_peak), ul_trough, ul_surge_onset) {
        (Some(a), Some(b), Some(c)) => !(a <= b && b <= c),
        _ => false,
    };
    Ok(TurningPoints {
        uv_peak: Some(uv_peak),
        ul_trough,
        ul_surge_onset,
        order_violated,
        detector_params: DetectorParams {
            smoothing_window: cfg.smoothing_window,
            trough_window: (lo, hi),
            surge_fraction: cfg.surge_fraction,
            surge_search_start: start,
        },
    })
}

/// Indices of local maxima above `min + prominence * range`. Plateaus count
/// once (at their first index); endpoints count when they exceed their only
/// neighbour.
pub fn prominent_maxima(xs: &[f64], prominence: f64) -> Vec<usize> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Vec::new();
    }
    // Collapse runs of equal values.
    let mut runs: Vec<(usize, f64)> = Vec::new();
    for (i, &v) in xs.iter().enumerate() {
        if runs.last().map(|r| r.1) != Some(v) {
            runs.push((i, v));
        }
    }
    let floor = lo + prominence * range;
    (0..runs.len())
        .filter(|&k| {
            let v = runs[k].1;
            let left = k == 0 || runs[k - 1].1 < v;
            let right = k + 1 == runs.len() || runs[k + 1].1 < v;
            left && right && v > floor
        })
        .map(|k| runs[k].0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    PersistentSynergy,
    ModalTransduction,
    RedundancyDominant,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [
        Mechanism::PersistentSynergy,
        Mechanism::ModalTransduction,
        Mechanism::RedundancyDominant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::PersistentSynergy => "persistent_synergy",
            Mechanism::ModalTransduction => "modal_transduction",
            Mechanism::RedundancyDominant => "redundancy_dominant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyEvidence {
    pub s_final: f64,
    pub s_share: f64,
    pub tau_s: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransductionEvidence {
    pub uv_prominent_maxima: Vec<usize>,
    pub unimodal: bool,
    pub uv_peak: Option<usize>,
    pub peak_limit: f64,
    pub ul_share: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyEvidence {
    pub r_final: f64,
    pub r_ref: f64,
    pub max_other: f64,
    pub r_share: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub persistent_synergy: SynergyEvidence,
    pub modal_transduction: TransductionEvidence,
    pub redundancy_dominant: RedundancyEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub fired: Vec<Mechanism>,
    /// `None` when nothing fired.
    pub primary_label: Option<Mechanism>,
    pub ambiguous: bool,
    pub evidence: Evidence,
}

impl MechanismReport {
    pub fn label(&self) -> &'static str {
        self.primary_label.map_or("none", Mechanism::name)
    }
}

pub fn classify_mechanism(traj: &Trajectory, cfg: &ThresholdConfig) -> Result<MechanismReport> {
    cfg.validate()?;
    let fin = traj.final_state();
    if !(fin.i_tot > 0.0) {
        return Err(Error::Invalid(format!(
            "final-layer I_tot must be positive, got {}",
            fin.i_tot
        )));
    }
    let last = traj.last_layer();
    if cfg.ell0 > last {
        return Err(Error::Invalid(format!("ell0 {} beyond final layer {last}", cfg.ell0)));
    }
    let total = fin.i_tot;

    let s_share = fin.s / total;
    let synergy = fin.s > cfg.tau_s && s_share > cfg.gamma;

    let uv_s = smooth(&traj.series(Component::UV), cfg.smoothing_window);
    let maxima = prominent_maxima(&uv_s, cfg.prominence);
    let unimodal = maxima.len() == 1;
    let peak_limit = cfg.peak_window_fraction * last as f64;
    let ul_share = fin.u_l / total;
    let uv_peak = unimodal.then(|| maxima[0]);
    let transduction = uv_peak.is_some_and(|p| (p as f64) < peak_limit) && ul_share > cfg.eta;

    let r_ref = traj.states[cfg.ell0].r;
    let max_other = fin.u_v.max(fin.u_l).max(fin.s);
    let r_share = fin.r / total;
    let redundancy = fin.r > r_ref && fin.r > cfg.rho * max_other;

    let mut fired = Vec::new();
    let mut shares = Vec::new();
    for (m, on, share) in [
        (Mechanism::PersistentSynergy, synergy, s_share),
        (Mechanism::ModalTransduction, transduction, ul_share),
        (Mechanism::RedundancyDominant, redundancy, r_share),
    ] {
        if on {
            fired.push(m);
            shares.push(share);
        }
    }
    // Largest governing share wins; the first-listed definition wins ties.
    let mut primary = None;
    let mut best = f64::NEG_INFINITY;
    for (m, s) in fired.iter().zip(&shares) {
        if *s > best {
            best = *s;
            primary = Some(*m);
        }
    }
    Ok(MechanismReport {
        ambiguous: fired.len() > 1,
        primary_label: primary,
        fired,
        evidence: Evidence {
            persistent_synergy: SynergyEvidence {
                s_final: fin.s,
                s_share,
                tau_s: cfg.tau_s,
                gamma: cfg.gamma,
            },
            modal_transduction: TransductionEvidence {
                uv_prominent_maxima: maxima,
                unimodal,
                uv_peak,
                peak_limit,
                ul_share,
                eta: cfg.eta,
            },
            redundancy_dominant: RedundancyEvidence {
                r_final: fin.r,
                r_ref,
                max_other,
                r_share,
                rho: cfg.rho,
            },
        },
    })
}

/// Threshold values to sweep; empty lists keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub tau_s: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
}

impl SweepGrid {
    /// 3x3x3 grid over (gamma, eta, rho) centred on the defaults.
    pub fn around_defaults() -> Self {
        SweepGrid {
            tau_s: Vec::new(),
            gamma: vec![0.10, 0.15, 0.20],
            eta: vec![0.35, 0.45, 0.55],
            rho: vec![1.25, 1.5, 1.75],
        }
    }

    fn points(&self, base: &ThresholdConfig) -> Vec<ThresholdConfig> {
        let or_base = |v: &Vec<f64>, b: f64| if v.is_empty() { vec![b] } else { v.clone() };
        let mut out = Vec::new();
        for &tau_s in &or_base(&self.tau_s, base.tau_s) {
            for &gamma in &or_base(&self.gamma, base.gamma) {
                for &eta in &or_base(&self.eta, base.eta) {
                    for &rho in &or_base(&self.rho, base.rho) {
                        out.push(ThresholdConfig {
                            tau_s,
                            gamma,
                            eta,
                            rho,
                            ..*base
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub thresholds: ThresholdConfig,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub default_label: String,
    pub points: Vec<SweepPoint>,
    /// Share of grid points whose label equals the default label.
    pub stability: f64,
    pub label_counts: BTreeMap<String, usize>,
}

pub fn threshold_sweep(traj: &Trajectory, grid: &SweepGrid, base: &ThresholdConfig) -> Result<SweepReport> {
    let default_label = classify_mechanism(traj, base)?.label().to_string();
    let mut points = Vec::new();
    let mut counts = BTreeMap::new();
    for cfg in grid.points(base) {
        let label = classify_mechanism(traj, &cfg)?.label().to_string();
        *counts.entry(label.clone()).or_insert(0) += 1;
        points.push(SweepPoint { thresholds: cfg, label });
    }
    let agree = points.iter().filter(|p| p.label == default_label).count();
    Ok(SweepReport {
        stability: agree as f64 / points.len() as f64,
        default_label,
        points,
        label_counts: counts,
    })
}

/// Contents of `trajectory.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub meta: TrajectoryMeta,
    pub thresholds: ThresholdConfig,
    pub turning_points: Option<TurningPoints>,
    pub mechanism: Option<MechanismReport>,
}

/// Writes `trajectory.csv` and `trajectory.json` into `dir`.
pub fn write_trajectory(dir: &Path, traj: &Trajectory, cfg: &ThresholdConfig) -> Result<TrajectoryDoc> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let doc = TrajectoryDoc {
        meta: traj.meta.clone(),
        thresholds: *cfg,
        turning_points: detect_turning_points(traj, cfg).ok(),
        mechanism: classify_mechanism(traj, cfg).ok(),
    };
    store::write_atomic(&dir.join("trajectory.csv"), traj.to_csv().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&doc).map_err(|e| Error::json("trajectory.json", e))?;
    json.push('\n');
    store::write_atomic(&dir.join("trajectory.json"), json.as_bytes())?;
    Ok(doc)
}

/// Loads a trajectory from a directory holding `trajectory.csv` (and
/// optionally `trajectory.json`) or from a bare CSV file.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let (csv_path, json_path) = if path.is_dir() {
        (path.join("trajectory.csv"), Some(path.join("trajectory.json")))
    } else {
        (path.to_path_buf(), None)
    };
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let meta = match json_path.filter(|p| p.exists()) {
        Some(p) => {
            let raw = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let doc: TrajectoryDoc =
                serde_json::from_str(&raw).map_err(|e| Error::json(p.display().to_string(), e))?;
            doc.meta
        }
        None => TrajectoryMeta::default(),
    };
    Trajectory::from_csv(&text, meta)
}

/// One-line human summary of a mechanism report.
pub fn describe(report: &MechanismReport) -> String {
    let mut s = report.label().to_string();
    if report.ambiguous {
        let names: Vec<&str> = report.fired.iter().map(|m| m.name()).collect();
        let _ = write!(s, " (ambiguous: {})", names.join(", "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_from(series: &[[f64; 4]]) -> Trajectory {
        let states = series
            .iter()
            .enumerate()
            .map(|(l, c)| InfoState::new(l, c[0], c[1], c[2], c[3]))
            .collect();
        assemble_trajectory(states, TrajectoryMeta::default()).unwrap()
    }

    fn with_series(uv: &[f64], ul: &[f64]) -> Trajectory {
        let rows: Vec<[f64; 4]> = uv.iter().zip(ul).map(|(&v, &l)| [0.1, v, l, 0.1]).collect();
        traj_from(&rows)
    }

    #[test]
    fn assembly_sorts_and_checks() {
        let states = vec![
            InfoState::new(2, 1.0, 0.0, 0.0, 0.0),
            InfoState::new(0, 1.0, 0.0, 0.0, 0.0),
            InfoState::new(1, 1.0, 0.0, 0.0, 0.0),
        ];
        let t = assemble_trajectory(states.clone(), TrajectoryMeta::default()).unwrap();
        assert_eq!(t.states.iter().map(|s| s.layer).collect::<Vec<_>>(), vec![0, 1, 2]);

        let missing = vec![states[0], states[1]];
        let err = assemble_trajectory(missing, TrajectoryMeta::default()).unwrap_err();
        assert!(err.to_string().contains("missing layer 1"), "{err}");

        let dup = vec![states[1], states[1], states[2]];
        assert!(assemble_trajectory(dup, TrajectoryMeta::default()).is_err());

        let mut bad = states[0];
        bad.i_tot = 5.0;
        assert!(assemble_trajectory(vec![bad], TrajectoryMeta::default()).is_err());
    }

    #[test]
    fn uv_peak_is_argmax() {
        let uv = [5.0, 8.0, 6.0, 4.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0];
        let ul = [1.0; 10];
        let tp = detect_turning_points(&with_series(&uv, &ul), &ThresholdConfig::default()).unwrap();
        assert_eq!(tp.uv_peak, Some(1));
    }

    #[test]
    fn increasing_ul_has_no_trough() {
        let ul: Vec<f64> = (0..12).map(|l| l as f64).collect();
        let tp = detect_turning_points(&with_series(&[1.0; 12], &ul), &ThresholdConfig::default()).unwrap();
        assert_eq!(tp.ul_trough, None);
    }

    #[test]
    fn surge_onset_at_19() {
        let ul: Vec<f64> = (0..32).map(|l| 1.0 + 2.0 * (l as f64 - 19.0).max(0.0)).collect();
        let tp = detect_turning_points(&with_series(&[1.0; 32], &ul), &ThresholdConfig::default()).unwrap();
        assert_eq!(tp.ul_trough, None);
        assert_eq!(tp.ul_surge_onset, Some(19));
    }

    #[test]
    fn trough_and_order() {
        let mut ul = vec![3.0, 2.8, 2.5, 2.2, 2.0, 1.8, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0];
        ul.extend([4.0, 6.0, 8.0, 10.0]);
        let uv: Vec<f64> = (0..16).map(|l| if l == 1 { 5.0 } else { 1.0 }).collect();
        let tp = detect_turning_points(&with_series(&uv, &ul), &ThresholdConfig::default()).unwrap();
        assert_eq!(tp.ul_trough, Some(6));
        assert_eq!(tp.ul_surge_onset, Some(11));
        assert!(!tp.order_violated);
    }

    #[test]
    fn too_few_layers() {
        let t = with_series(&[1.0; 4], &[1.0; 4]);
        assert!(detect_turning_points(&t, &ThresholdConfig::default()).is_err());
    }

    #[test]
    fn smoothing_window_does_not_move_clean_landmarks() {
        let uv = [5.0, 8.0, 6.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.4, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1];
        let ul = [3.0, 2.8, 2.5, 2.2, 2.0, 1.8, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0, 4.0, 6.0, 8.0, 10.0];
        let t = with_series(&uv, &ul);
        let at = |w| {
            let cfg = ThresholdConfig {
                smoothing_window: w,
                ..Default::default()
            };
            let tp = detect_turning_points(&t, &cfg).unwrap();
            (tp.uv_peak, tp.ul_trough, tp.ul_surge_onset)
        };
        assert_eq!(at(1), at(3));
        assert_eq!(at(1), at(5));
    }

    #[test]
    fn prominence_ignores_wiggles() {
        let xs = [0.0, 10.0, 5.0, 0.5, 0.6, 0.5, 0.55, 0.5];
        assert_eq!(prominent_maxima(&xs, 0.1), vec![1]);
        assert_eq!(prominent_maxima(&[2.0; 5], 0.1), Vec::<usize>::new());
        assert_eq!(prominent_maxima(&[1.0, 3.0, 3.0, 1.0], 0.1), vec![1]);
    }

    #[test]
    fn choose_rel_final_state_is_transduction() {
        // U_V unimodal with its peak at layer 0, final row from the
        // published ChooseRel line.
        let mut rows: Vec<[f64; 4]> = (0..32)
            .map(|l| [0.1, 4.0 * 0.8f64.powi(l), 1.0 + 0.5 * l as f64, 0.3])
            .collect();
        rows[31] = [0.13, 0.50, 18.83, 0.65];
        let rep = classify_mechanism(&traj_from(&rows), &ThresholdConfig::default()).unwrap();
        assert_eq!(rep.primary_label, Some(Mechanism::ModalTransduction));
        assert!((rep.evidence.modal_transduction.ul_share - 0.936).abs() < 5e-4);
        assert!(!rep.ambiguous);
    }

    #[test]
    fn forced_synergy_and_redundancy() {
        let rows: Vec<[f64; 4]> = (0..6).map(|_| [0.5, 1.0, 1.5, 2.0]).collect();
        let rep = classify_mechanism(&traj_from(&rows), &ThresholdConfig::default()).unwrap();
        assert_eq!(rep.fired, vec![Mechanism::PersistentSynergy]);

        let mut rows: Vec<[f64; 4]> = (0..6).map(|_| [1.0, 3.0, 0.0, 0.5]).collect();
        rows[5] = [10.0, 3.0, 0.0, 0.5];
        let rep = classify_mechanism(&traj_from(&rows), &ThresholdConfig::default()).unwrap();
        assert_eq!(rep.primary_label, Some(Mechanism::RedundancyDominant));
    }

    #[test]
    fn zero_total_is_rejected() {
        let rows = vec![[0.0; 4]; 5];
        assert!(classify_mechanism(&traj_from(&rows), &ThresholdConfig::default()).is_err());
    }

    #[test]
    fn ambiguity_reports_all() {
        // Synergy share 0.4 and U_L share 0.5, unimodal early U_V peak.
        let mut rows: Vec<[f64; 4]> = (0..10)
            .map(|l| [0.05, if l == 0 { 2.0 } else { 0.05 }, 0.5, 0.4])
            .collect();
        rows[9] = [0.0, 0.1, 5.0, 4.0];
        let cfg = ThresholdConfig::default();
        let rep = classify_mechanism(&traj_from(&rows), &cfg).unwrap();
        assert!(rep.ambiguous);
        assert_eq!(rep.primary_label, Some(Mechanism::ModalTransduction));
    }

    #[test]
    fn sweep_boundary_flips() {
        let mut rows: Vec<[f64; 4]> = (0..10)
            .map(|l| [0.2, if l == 0 { 3.0 } else { 0.2 }, 1.0, 0.0])
            .collect();
        rows[9] = [2.0, 0.0, 5.0, 3.0];
        let t = traj_from(&rows);
        let one = threshold_sweep(&t, &SweepGrid::default(), &ThresholdConfig::default()).unwrap();
        assert_eq!(one.stability, 1.0);
        let grid = SweepGrid {
            eta: vec![0.45, 0.55],
            ..Default::default()
        };
        let base = ThresholdConfig {
            eta: 0.45,
            tau_s: 10.0,
            ..Default::default()
        };
        let rep = threshold_sweep(&t, &grid, &base).unwrap();
        assert!(rep.stability < 1.0);
    }

    #[test]
    fn csv_and_json_roundtrip() {
        let rows: Vec<[f64; 4]> = (0..6).map(|l| [0.5, l as f64 * 0.1, 1.5, 0.25]).collect();
        let mut t = traj_from(&rows);
        t.meta.model_id = "m".into();
        t.meta.condition = Some(Condition::Normal);
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(dir.path(), &t, &ThresholdConfig::default()).unwrap();
        let back = load_trajectory(dir.path()).unwrap();
        assert_eq!(back.meta, t.meta);
        for (a, b) in back.states.iter().zip(&t.states) {
            assert!((a.u_v - b.u_v).abs() < 1e-6);
        }
    }
}
