//! End-to-end runs: store -> pooling -> PCA -> per-layer flows -> PID ->
//! trajectory -> classification, plus knockout comparison and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, compare_trajectories, knockout_deltas, ComparisonReport, KnockoutReport, ShareRow};
use crate::error::{Error, Result, ResultExt};
use crate::gaussianize::{
    derive_seed, gaussianity_diagnostics, train_flow_with, Direction, FlowModel, GaussFitReport, TrainConfig,
};
use crate::pid::{self, IdentityReport, InfoState};
use crate::preprocess::{apply_pca, fit_pca_with, pool_store, PcaBasis, PcaRule};
use crate::store::{self, ActivationStore, Condition, LayerPayload, TargetKind};
use crate::trajectory::{
    assemble_trajectory, classify_mechanism, load_trajectory, write_trajectory, MechanismReport, ThresholdConfig,
    Trajectory, TrajectoryDoc, TrajectoryMeta,
};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const DEFAULT_RETAIN: f64 = 0.95;
/// Longest NLL curve kept in diagnostics; longer curves are strided.
const CURVE_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Reduced steps and width.
    #[default]
    Test,
    /// Full-scale flow hyperparameters.
    Paper,
}

impl Profile {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Profile::Test => TrainConfig::test(),
            Profile::Paper => TrainConfig::paper(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Test => "test",
            Profile::Paper => "paper",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Profile::Test),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Invalid(format!("unknown profile {s:?} (expected test or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Language,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
        }
    }
}

/// Settings of the per-layer estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub pca: PcaSetting,
    pub flow: TrainConfig,
    pub ridge: f64,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSetting {
    Retain { fraction: f64, cap: Option<usize> },
    Fixed { d_prime: usize },
}

impl PcaSetting {
    fn rule(self) -> PcaRule {
        match self {
            PcaSetting::Retain { fraction, cap } => PcaRule::Retain { fraction, cap },
            PcaSetting::Fixed { d_prime } => PcaRule::Fixed(d_prime),
        }
    }
}

impl EstimatorSettings {
    pub fn new(profile: Profile, base_seed: u64) -> Self {
        EstimatorSettings {
            pca: PcaSetting::Retain {
                fraction: DEFAULT_RETAIN,
                cap: None,
            },
            flow: profile.train_config(),
            ridge: pid::DEFAULT_RIDGE,
            base_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllSummary {
    pub seed: u64,
    pub initial: f64,
    pub final_nll: f64,
    /// Training loss, strided to at most a few hundred points.
    pub curve: Vec<f64>,
}

impl NllSummary {
    fn of(model: &FlowModel, seed: u64) -> Self {
        let c = &model.nll_curve;
        let stride = c.len().div_ceil(CURVE_POINTS).max(1);
        NllSummary {
            seed,
            initial: model.initial_nll,
            final_nll: model.final_nll,
            curve: c.iter().step_by(stride).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub d_prime_v: usize,
    pub d_prime_l: usize,
    pub pca_capped: bool,
    pub flow_v: NllSummary,
    pub flow_l: NllSummary,
    pub gauss_v: GaussFitReport,
    pub gauss_l: GaussFitReport,
    pub gauss_y: GaussFitReport,
    /// RMS difference between the target outputs of the two flows.
    pub target_discrepancy: f64,
    pub identity: IdentityReport,
    pub clamp_flags: u8,
}

/// Everything produced for one layer.
#[derive(Debug, Clone)]
pub struct LayerEstimate {
    pub state: InfoState,
    pub diagnostics: LayerDiagnostics,
    pub pca_v: PcaBasis,
    pub pca_l: PcaBasis,
    pub flow_v: FlowModel,
    pub flow_l: FlowModel,
}

fn hstack(a: &DMatrix<f64>, y: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + 1);
    m.columns_mut(0, a.ncols()).copy_from(a);
    for (i, v) in y.iter().enumerate() {
        m[(i, a.ncols())] = *v;
    }
    m
}

fn train_pair(
    layer: usize,
    modality: Modality,
    z: &DMatrix<f64>,
    y: &[f64],
    labels: bool,
    s: &EstimatorSettings,
) -> Result<(FlowModel, DMatrix<f64>, u64)> {
    let seed = derive_seed(s.base_seed, layer, modality.name());
    let data = hstack(z, y);
    let mut mask = vec![true; data.ncols()];
    if labels {
        // Class indices carry no meaningful marginal shape.
        *mask.last_mut().expect("non-empty") = false;
    }
    let cfg = s.flow.with_seed(seed);
    let flow = train_flow_with(&data, z.ncols(), Some(&mask), &cfg)?;
    let (out, _) = flow.transform(&data, Direction::Forward)?;
    Ok((flow, out, seed))
}

/// Baseline models carried into a knockout run.
#[derive(Debug, Clone, Copy)]
pub struct Reuse<'a> {
    pub pca: (&'a PcaBasis, &'a PcaBasis),
    /// Apply these (vision, language) flows instead of retraining.
    pub flows: Option<(&'a FlowModel, &'a FlowModel)>,
}

impl<'a> Reuse<'a> {
    pub fn from_estimate(e: &'a LayerEstimate, flows: bool) -> Self {
        Reuse {
            pca: (&e.pca_v, &e.pca_l),
            flows: flows.then_some((&e.flow_v, &e.flow_l)),
        }
    }
}

fn apply_pair(flow: &FlowModel, z: &DMatrix<f64>, y: &[f64]) -> Result<(FlowModel, DMatrix<f64>, u64)> {
    let (out, _) = flow.transform(&hstack(z, y), Direction::Forward)?;
    Ok((flow.clone(), out, flow.train_config.seed))
}

/// Runs the estimator on one layer. `reuse` supplies baseline PCA bases (and
/// optionally flows) for knockout runs; otherwise everything is fit here.
pub fn estimate_layer(
    layer: usize,
    x_v: &DMatrix<f64>,
    x_l: &DMatrix<f64>,
    y: &[f64],
    labels: bool,
    reuse: Option<Reuse<'_>>,
    s: &EstimatorSettings,
) -> Result<LayerEstimate> {
    if x_v.nrows() != y.len() || x_l.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "layer {layer}: {} / {} source rows for {} targets",
            x_v.nrows(),
            x_l.nrows(),
            y.len()
        )));
    }
    let (pca_v, pca_l) = match reuse {
        Some(Reuse { pca: (v, l), .. }) => (v.clone(), l.clone()),
        None => (
            fit_pca_with(x_v, s.pca.rule()).context(|| "vision PCA".into())?,
            fit_pca_with(x_l, s.pca.rule()).context(|| "language PCA".into())?,
        ),
    };
    let zt_v = apply_pca(&pca_v, x_v).context(|| "vision PCA".into())?;
    let zt_l = apply_pca(&pca_l, x_l).context(|| "language PCA".into())?;

    let ((flow_v, out_v, seed_v), (flow_l, out_l, seed_l)) = match reuse.and_then(|r| r.flows) {
        Some((fv, fl)) => (
            apply_pair(fv, &zt_v, y).context(|| "vision flow".into())?,
            apply_pair(fl, &zt_l, y).context(|| "language flow".into())?,
        ),
        None => (
            train_pair(layer, Modality::Vision, &zt_v, y, labels, s).context(|| "vision flow".into())?,
            train_pair(layer, Modality::Language, &zt_l, y, labels, s).context(|| "language flow".into())?,
        ),
    };
    let (dv, dl) = (zt_v.ncols(), zt_l.ncols());
    let z_i = out_v.columns(0, dv).into_owned();
    let z_y_alt = out_v.columns(dv, 1).into_owned();
    let z_q = out_l.columns(0, dl).into_owned();
    let z_y = out_l.columns(dl, 1).into_owned();

    let joint = pid::estimate_joint_cov(&z_q, &z_i, &z_y, s.ridge)?;
    let state = pid::decompose_terms(layer, pid::mmi_terms(&joint)?);
    let identity = pid::check_identities(&state, &joint)?;
    let n = y.len() as f64;
    let target_discrepancy = (z_y.iter().zip(z_y_alt.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();

    let diagnostics = LayerDiagnostics {
        layer,
        d_prime_v: dv,
        d_prime_l: dl,
        pca_capped: pca_v.capped || pca_l.capped,
        flow_v: NllSummary::of(&flow_v, seed_v),
        flow_l: NllSummary::of(&flow_l, seed_l),
        gauss_v: gaussianity_diagnostics(&z_i)?,
        gauss_l: gaussianity_diagnostics(&z_q)?,
        gauss_y: gaussianity_diagnostics(&z_y)?,
        target_discrepancy,
        identity,
        clamp_flags: state.clamp_flags,
    };
    Ok(LayerEstimate {
        state,
        diagnostics,
        pca_v,
        pca_l,
        flow_v,
        flow_l,
    })
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub baseline: PathBuf,
    #[serde(default)]
    pub knockout: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default = "default_retain")]
    pub retain: f64,
    #[serde(default)]
    pub pca_cap: Option<usize>,
    /// Fixed d' per layer, overriding the retain rule.
    #[serde(default)]
    pub d_prime_override: BTreeMap<usize, usize>,
    /// Flow hyperparameters; defaults to the profile's. Must equal them
    /// under the paper profile.
    #[serde(default)]
    pub flow: Option<TrainConfig>,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Write trained flows and PCA bases next to the trajectories.
    #[serde(default = "default_true")]
    pub save_models: bool,
    /// Knockout runs apply the baseline flows instead of retraining.
    #[serde(default)]
    pub reuse_flows: bool,
}

fn default_seed() -> u64 {
    42
}
fn default_retain() -> f64 {
    DEFAULT_RETAIN
}
fn default_ridge() -> f64 {
    pid::DEFAULT_RIDGE
}
fn default_true() -> bool {
    true
}

impl PipelineConfig {
    pub fn new(baseline: impl Into<PathBuf>, output: impl Into<PathBuf>, profile: Profile) -> Self {
        PipelineConfig {
            baseline: baseline.into(),
            knockout: None,
            output: output.into(),
            profile,
            base_seed: default_seed(),
            retain: DEFAULT_RETAIN,
            pca_cap: None,
            d_prime_override: BTreeMap::new(),
            flow: None,
            thresholds: ThresholdConfig::default(),
            ridge: pid::DEFAULT_RIDGE,
            save_models: true,
            reuse_flows: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Flow hyperparameters in effect (before per-job seeding).
    pub fn train_config(&self) -> TrainConfig {
        self.flow.unwrap_or_else(|| self.profile.train_config())
    }

    pub fn settings_for(&self, layer: usize) -> EstimatorSettings {
        let pca = match self.d_prime_override.get(&layer) {
            Some(&d_prime) => PcaSetting::Fixed { d_prime },
            None => PcaSetting::Retain {
                fraction: self.retain,
                cap: self.pca_cap,
            },
        };
        EstimatorSettings {
            pca,
            flow: self.train_config(),
            ridge: self.ridge,
            base_seed: self.base_seed,
        }
    }

    /// Checks values and that every referenced store exists.
    pub fn validate(&self) -> Result<()> {
        if !(self.retain > 0.0 && self.retain <= 1.0) {
            return Err(Error::Invalid(format!("retain must be in (0, 1], got {}", self.retain)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Invalid("ridge must be non-negative".into()));
        }
        if self.d_prime_override.values().any(|&d| d == 0) || self.pca_cap == Some(0) {
            return Err(Error::Invalid("d' must be positive".into()));
        }
        let flow = self.train_config();
        flow.validate()?;
        if self.profile == Profile::Paper && flow.with_seed(0) != TrainConfig::paper().with_seed(0) {
            return Err(Error::Invalid(
                "the paper profile pins the flow hyperparameters; use the test profile to change them".into(),
            ));
        }
        self.thresholds.validate()?;
        for p in std::iter::once(&self.baseline).chain(self.knockout.as_ref()) {
            if !p.join(store::MANIFEST_FILE).is_file() {
                return Err(Error::Invalid(format!("no store at {}", p.display())));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreProvenance {
    pub path: PathBuf,
    pub model_id: String,
    pub task_id: String,
    pub condition: Condition,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_samples: usize,
    pub target_kind: TargetKind,
    pub sample_hash: Option<String>,
}

impl StoreProvenance {
    fn of(path: &Path, s: &ActivationStore) -> Self {
        let m = &s.manifest;
        StoreProvenance {
            path: path.to_path_buf(),
            model_id: m.model_id.clone(),
            task_id: m.task_id.clone(),
            condition: m.condition,
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_samples: m.num_samples,
            target_kind: m.target_kind,
            sample_hash: m.sample_hash.clone(),
        }
    }
}

/// Decision values fixed in code, recorded for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedConstants {
    pub clamp_tolerance_nats: f64,
    pub degenerate_eigenvalue: f64,
    pub degenerate_base_bits: f64,
    pub nmae_formula: String,
    pub bootstrap_resamples: usize,
    pub bootstrap_level: f64,
    pub bootstrap_seed: u64,
    pub gauss_skew_flag: f64,
    pub gauss_kurtosis_flag: f64,
    pub target_coordinate: String,
    pub seed_rule: String,
}

impl Default for FixedConstants {
    fn default() -> Self {
        FixedConstants {
            clamp_tolerance_nats: pid::CLAMP_TOLERANCE,
            degenerate_eigenvalue: crate::preprocess::DEGENERATE_EIGENVALUE,
            degenerate_base_bits: analysis::DEGENERATE_BASE,
            nmae_formula: analysis::NMAE_FORMULA.into(),
            bootstrap_resamples: analysis::DEFAULT_RESAMPLES,
            bootstrap_level: analysis::DEFAULT_LEVEL,
            bootstrap_seed: analysis::DEFAULT_SEED,
            gauss_skew_flag: crate::gaussianize::SKEW_FLAG,
            gauss_kurtosis_flag: crate::gaussianize::KURTOSIS_FLAG,
            target_coordinate: "language-flow target output; vision-flow output is a diagnostic".into(),
            seed_rule: "base_seed xor fnv1a(layer u64 le ++ modality)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub profile: Profile,
    pub base_seed: u64,
    pub config: PipelineConfig,
    pub flow: TrainConfig,
    pub constants: FixedConstants,
    pub baseline: StoreProvenance,
    pub knockout: Option<StoreProvenance>,
    /// (layer, vision seed, language seed)
    pub job_seeds: Vec<(usize, u64, u64)>,
    pub identity_failures: Vec<usize>,
    pub mechanism: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output: PathBuf,
    pub baseline: Trajectory,
    pub knockout: Option<Trajectory>,
    pub mechanism: Option<MechanismReport>,
    pub knockout_report: Option<KnockoutReport>,
    pub diagnostics: Vec<LayerDiagnostics>,
}

fn layer_matrices(store: &ActivationStore) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    store
        .blocks
        .iter()
        .map(|b| match &b.payload {
            LayerPayload::Pooled { x_v, x_l } => Ok((x_v.to_dmatrix(), x_l.to_dmatrix())),
            LayerPayload::Token(_) => Err(Error::Invalid("store was not pooled".into())),
        })
        .collect()
}

fn run_condition(
    cfg: &PipelineConfig,
    store: &ActivationStore,
    label: &str,
    bases: Option<&[LayerEstimate]>,
) -> Result<Vec<LayerEstimate>> {
    let pooled = pool_store(store, store.manifest.pooling_rule)?;
    let mats = layer_matrices(&pooled)?;
    let y = pooled.targets.to_f64();
    let labels = pooled.targets.kind() == TargetKind::DiscreteLabel;
    mats.par_iter()
        .enumerate()
        .map(|(l, (x_v, x_l))| {
            let reuse = bases.map(|b| Reuse::from_estimate(&b[l], cfg.reuse_flows));
            estimate_layer(l, x_v, x_l, &y, labels, reuse, &cfg.settings_for(l))
                .map_err(|e| e.context(format!("{label} layer {l}")))
        })
        .collect()
}

fn check_pair(a: &ActivationStore, b: &ActivationStore) -> Result<()> {
    let (ma, mb) = (&a.manifest, &b.manifest);
    if ma.condition != Condition::Normal || mb.condition != Condition::Knockout {
        return Err(Error::Invalid(format!(
            "expected normal baseline and knockout store, got {} and {}",
            ma.condition, mb.condition
        )));
    }
    if ma.model_id != mb.model_id || ma.task_id != mb.task_id {
        return Err(Error::Invalid("baseline and knockout stores describe different model/task".into()));
    }
    if ma.num_layers != mb.num_layers || ma.hidden_dim != mb.hidden_dim || ma.num_samples != mb.num_samples {
        return Err(Error::Dimension("baseline and knockout store shapes differ".into()));
    }
    match (&ma.sample_hash, &mb.sample_hash) {
        (Some(x), Some(y)) if x == y => Ok(()),
        (Some(_), Some(_)) => Err(Error::Invalid("sample hashes differ: stores are not paired".into())),
        _ => Err(Error::Invalid("paired runs need a sample hash in both manifests".into())),
    }
}

fn trajectory_of(est: &[LayerEstimate], store: &ActivationStore, cfg: &PipelineConfig) -> Result<Trajectory> {
    let m = &store.manifest;
    assemble_trajectory(
        est.iter().map(|e| e.state).collect(),
        TrajectoryMeta {
            model_id: m.model_id.clone(),
            task_id: m.task_id.clone(),
            condition: Some(m.condition),
            d_prime: est.iter().map(|e| (e.diagnostics.d_prime_v, e.diagnostics.d_prime_l)).collect(),
            seed: Some(cfg.base_seed),
            profile: Some(cfg.profile.name().into()),
        },
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    store::write_atomic(path, s.as_bytes())
}

fn write_condition(dir: &Path, traj: &Trajectory, est: &[LayerEstimate], cfg: &PipelineConfig, pca: bool) -> Result<()> {
    write_trajectory(dir, traj, &cfg.thresholds)?;
    let diags: Vec<&LayerDiagnostics> = est.iter().map(|e| &e.diagnostics).collect();
    write_json(&dir.join("diagnostics.json"), &diags)?;
    if cfg.save_models {
        for e in est {
            let l = e.state.layer;
            e.flow_v.save(&dir.join(format!("flow_{l}_vision.bin")))?;
            e.flow_l.save(&dir.join(format!("flow_{l}_language.bin")))?;
            if pca {
                e.pca_v.save_json(&dir.join(format!("pca_{l}_vision.json")))?;
                e.pca_l.save_json(&dir.join(format!("pca_{l}_language.json")))?;
            }
        }
    }
    Ok(())
}

fn summary_csv(rows: &[(&str, &InfoState)]) -> String {
    let mut out = format!("condition,{}\n", ShareRow::HEADER);
    for (cond, s) in rows {
        let _ = writeln!(out, "{cond},{}", ShareRow::from_state(s).csv_row());
    }
    out
}

/// Executes a configured run and writes the run directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let base_store = store::read_store(&cfg.baseline).context(|| format!("baseline store {}", cfg.baseline.display()))?;
    let ko_store = match &cfg.knockout {
        Some(p) => {
            let s = store::read_store(p).context(|| format!("knockout store {}", p.display()))?;
            check_pair(&base_store, &s)?;
            Some(s)
        }
        None => None,
    };

    let base_est = run_condition(cfg, &base_store, "baseline", None)?;
    let baseline = trajectory_of(&base_est, &base_store, cfg)?;
    let (ko_est, knockout) = match &ko_store {
        Some(s) => {
            let est = run_condition(cfg, s, "knockout", Some(&base_est))?;
            let t = trajectory_of(&est, s, cfg)?;
            (Some(est), Some(t))
        }
        None => (None, None),
    };
    let mechanism = classify_mechanism(&baseline, &cfg.thresholds).ok();
    let knockout_report = match &knockout {
        Some(k) => Some(knockout_deltas(&baseline, k)?),
        None => None,
    };

    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_condition(&out.join("baseline"), &baseline, &base_est, cfg, true)?;
    let mut finals = vec![("normal", baseline.final_state())];
    if let (Some(est), Some(t)) = (&ko_est, &knockout) {
        write_condition(&out.join("knockout"), t, est, cfg, false)?;
        finals.push(("knockout", t.final_state()));
    }
    store::write_atomic(&out.join("summary.csv"), summary_csv(&finals).as_bytes())?;
    if let Some(r) = &knockout_report {
        write_json(&out.join("knockout_report.json"), r)?;
        store::write_atomic(&out.join("knockout_report.csv"), r.to_csv().as_bytes())?;
    }

    let flow = cfg.train_config();
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        profile: cfg.profile,
        base_seed: cfg.base_seed,
        config: cfg.clone(),
        flow,
        constants: FixedConstants::default(),
        baseline: StoreProvenance::of(&cfg.baseline, &base_store),
        knockout: cfg.knockout.as_deref().zip(ko_store.as_ref()).map(|(p, s)| StoreProvenance::of(p, s)),
        job_seeds: base_est
            .iter()
            .map(|e| (e.state.layer, e.diagnostics.flow_v.seed, e.diagnostics.flow_l.seed))
            .collect(),
        identity_failures: base_est
            .iter()
            .chain(ko_est.iter().flatten())
            .filter(|e| !e.diagnostics.identity.passed)
            .map(|e| e.state.layer)
            .collect(),
        mechanism: mechanism.as_ref().map(|m| m.label().to_string()),
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;

    Ok(RunSummary {
        output: out.clone(),
        baseline,
        knockout,
        mechanism,
        knockout_report,
        diagnostics: base_est.into_iter().map(|e| e.diagnostics).collect(),
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Plotdata,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "plotdata" => Ok(ReportFormat::Plotdata),
            _ => Err(Error::Invalid(format!("unknown report format {s:?}"))),
        }
    }
}

/// Aggregate written by the json report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub baseline: TrajectoryDoc,
    pub knockout: Option<TrajectoryDoc>,
    pub knockout_report: Option<KnockoutReport>,
    pub comparison: Option<ComparisonReport>,
}

struct LoadedRun {
    manifest: RunManifest,
    baseline: Trajectory,
    knockout: Option<Trajectory>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let required = [RUN_MANIFEST, "baseline/trajectory.csv", "baseline/trajectory.json"];
    for f in required {
        if !dir.join(f).is_file() {
            return Err(Error::Invalid(format!("incomplete run directory {}: missing {f}", dir.display())));
        }
    }
    let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
    let baseline = load_trajectory(&dir.join("baseline"))?;
    let knockout = if manifest.knockout.is_some() {
        let k = dir.join("knockout");
        if !k.join("trajectory.csv").is_file() {
            return Err(Error::Invalid(format!(
                "incomplete run directory {}: missing knockout/trajectory.csv",
                dir.display()
            )));
        }
        Some(load_trajectory(&k)?)
    } else {
        None
    };
    Ok(LoadedRun {
        manifest,
        baseline,
        knockout,
    })
}

/// Long-format `layer,component,value,condition` rows for the four PID
/// components.
pub fn plotdata_csv(trajs: &[(&str, &Trajectory)]) -> String {
    let mut out = String::from("layer,component,value,condition\n");
    for (cond, t) in trajs {
        for s in &t.states {
            for c in pid::Component::PID {
                let _ = writeln!(out, "{},{},{:.10},{}", s.layer, c.name(), s.component(c), cond);
            }
        }
    }
    out
}

/// Writes report files for a completed run directory into `<dir>/report`
/// and returns their paths.
pub fn report(dir: &Path, format: ReportFormat, thresholds: Option<&ThresholdConfig>) -> Result<Vec<PathBuf>> {
    let run = load_run(dir)?;
    let thresholds = thresholds.copied().unwrap_or(run.manifest.config.thresholds);
    let out = dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut trajs = vec![("normal", &run.baseline)];
    if let Some(k) = &run.knockout {
        trajs.push(("knockout", k));
    }
    let ko_report = match &run.knockout {
        Some(k) => Some(knockout_deltas(&run.baseline, k)?),
        None => None,
    };
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let p = out.join(name);
        store::write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    match format {
        ReportFormat::Csv => {
            for (cond, t) in &trajs {
                emit(&format!("trajectory_{cond}.csv"), t.to_csv())?;
            }
            let finals: Vec<(&str, &InfoState)> = trajs.iter().map(|(c, t)| (*c, t.final_state())).collect();
            emit("summary.csv", summary_csv(&finals))?;
            if let Some(r) = &ko_report {
                emit("knockout.csv", r.to_csv())?;
            }
        }
        ReportFormat::Plotdata => emit("plotdata.csv", plotdata_csv(&trajs))?,
        ReportFormat::Json => {
            let doc = |t: &Trajectory| TrajectoryDoc {
                meta: t.meta.clone(),
                thresholds,
                turning_points: crate::trajectory::detect_turning_points(t, &thresholds).ok(),
                mechanism: classify_mechanism(t, &thresholds).ok(),
            };
            let comparison = match &run.knockout {
                Some(k) => Some(compare_trajectories(&run.baseline, k, &thresholds)?),
                None => None,
            };
            let rep = RunReport {
                baseline: doc(&run.baseline),
                knockout: run.knockout.as_ref().map(doc),
                knockout_report: ko_report.clone(),
                comparison,
                manifest: run.manifest.clone(),
            };
            let mut s = serde_json::to_string_pretty(&rep).map_err(|e| Error::json("report.json", e))?;
            s.push('\n');
            emit("report.json", s)?;
        }
    }
    Ok(written)
}
