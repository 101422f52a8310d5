//! Synthetic data with known information structure: Gaussian layer
//! generators with closed-form ground truth, scripted multi-layer regime
//! stores, and small discrete gates for the brute-force oracle.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pid::{self, bits_to_nats, DiscretePmf, InfoState, JointGaussian};
use crate::store::{self, ActivationStore, Condition, LayerBlock, Manifest, Matrix32, TargetVector};
use crate::trajectory::{assemble_trajectory, Mechanism, Trajectory, TrajectoryMeta};

/// Components below this many bits count as zero for achievability.
const ZERO_TOL: f64 = 1e-9;
const BISECTION_TOL: f64 = 1e-8;
/// Standard deviation of the nuisance coordinates padded onto each source.
const NUISANCE_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLayerSpec {
    pub d_v: usize,
    pub d_l: usize,
    /// Covariance over (X_V, X_L, Y), Y scalar.
    pub cov: DMatrix<f64>,
    pub n: usize,
    pub seed: u64,
}

impl GaussianLayerSpec {
    /// Scalar triplet with unit variances and the given correlations.
    pub fn scalar(r_v: f64, r_l: f64, r_vl: f64, n: usize, seed: u64) -> Self {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, r_vl, r_v, r_vl, 1.0, r_l, r_v, r_l, 1.0]);
        GaussianLayerSpec {
            d_v: 1,
            d_l: 1,
            cov,
            n,
            seed,
        }
    }

    fn dim(&self) -> usize {
        self.d_v + self.d_l + 1
    }

    fn check(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let d = self.dim();
        if self.d_v == 0 || self.d_l == 0 {
            return Err(Error::Invalid("both source blocks need at least one coordinate".into()));
        }
        if self.cov.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "covariance is {:?}, expected {d}x{d}",
                self.cov.shape()
            )));
        }
        if self.cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite covariance".into()));
        }
        Cholesky::new(self.cov.clone())
            .ok_or_else(|| Error::Invalid("covariance is not positive definite".into()))
    }

    /// Covariance reordered to (X_L, X_V, Y), the order `JointGaussian` uses.
    pub fn joint(&self) -> Result<JointGaussian> {
        self.check()?;
        let order: Vec<usize> = (self.d_v..self.d_v + self.d_l)
            .chain(0..self.d_v)
            .chain(std::iter::once(self.d_v + self.d_l))
            .collect();
        let d = order.len();
        let cov = DMatrix::from_fn(d, d, |i, j| self.cov[(order[i], order[j])]);
        JointGaussian::from_cov(self.d_l, self.d_v, 1, cov)
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Fill row by row so the stream does not depend on storage order.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

/// i.i.d. draws from the spec's Gaussian: `(x_v, x_l, y)`.
pub fn gen_gaussian_layer(spec: &GaussianLayerSpec) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    if spec.n == 0 {
        return Err(Error::Invalid("n must be positive".into()));
    }
    let chol = spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = normal_matrix(&mut rng, spec.n, spec.dim());
    let x = z * chol.l().transpose();
    let x_v = x.columns(0, spec.d_v).into_owned();
    let x_l = x.columns(spec.d_v, spec.d_l).into_owned();
    let y = x.column(spec.d_v + spec.d_l).iter().copied().collect();
    Ok((x_v, x_l, y))
}

/// Exact MMI decomposition of the generator covariance.
pub fn ground_truth_pid(spec: &GaussianLayerSpec) -> Result<InfoState> {
    pid::decompose_pid_mmi(&spec.joint()?)
}

// ---------------------------------------------------------------------------
// Scripted profiles
// ---------------------------------------------------------------------------

/// Target components for one layer, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub r: f64,
    pub u_v: f64,
    pub u_l: f64,
    pub s: f64,
}

impl ProfileRow {
    pub fn to_state(&self, layer: usize) -> InfoState {
        InfoState::new(layer, self.r, self.u_v, self.u_l, self.s)
    }
}

/// Unit-variance correlations realising a profile row under MMI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    /// corr(X_V, Y)
    pub r_v: f64,
    /// corr(X_L, Y)
    pub r_l: f64,
    /// corr(X_V, X_L)
    pub r_vl: f64,
}

impl Triplet {
    pub fn spec(&self, n: usize, seed: u64) -> GaussianLayerSpec {
        GaussianLayerSpec::scalar(self.r_v, self.r_l, self.r_vl, n, seed)
    }
}

/// Squared multiple correlation of Y on (X_V, X_L).
fn joint_r2(r_v: f64, r_l: f64, c: f64) -> f64 {
    (r_v * r_v + r_l * r_l - 2.0 * r_v * r_l * c) / (1.0 - c * c)
}

/// Solves for the correlation triplet whose MMI decomposition equals `row`.
///
/// The single-source correlations follow from I_V = R + U_V and
/// I_L = R + U_L; synergy is then injected by pushing corr(X_V, X_L) below
/// the value at which the weaker source is redundant given the stronger one,
/// found by bisection.
pub fn solve_profile(row: &ProfileRow) -> Result<Triplet> {
    let comps = [row.r, row.u_v, row.u_l, row.s];
    if comps.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::Invalid(format!("profile components must be finite and >= 0: {row:?}")));
    }
    if row.u_v > ZERO_TOL && row.u_l > ZERO_TOL {
        return Err(Error::Unachievable(format!(
            "U_V = {} and U_L = {} are both positive, but the minimum-information redundancy forces min(U_V, U_L) = 0",
            row.u_v, row.u_l
        )));
    }
    let i_v = bits_to_nats(row.r + row.u_v);
    let i_l = bits_to_nats(row.r + row.u_l);
    let i_j = bits_to_nats(row.r + row.u_v + row.u_l + row.s);
    let r_v = (-(-2.0 * i_v).exp_m1()).sqrt();
    let r_l = (-(-2.0 * i_l).exp_m1()).sqrt();
    let target = -(-2.0 * i_j).exp_m1();
    let (hi_r, lo_r) = if r_v >= r_l { (r_v, r_l) } else { (r_l, r_v) };
    if hi_r == 0.0 {
        if row.s > ZERO_TOL {
            return Err(Error::Unachievable(
                "synergy without single-source information cannot be realised by a scalar Gaussian triplet".into(),
            ));
        }
        return Ok(Triplet {
            r_v,
            r_l,
            r_vl: 0.0,
        });
    }
    let c0 = lo_r / hi_r;
    if row.s <= ZERO_TOL {
        return Ok(Triplet { r_v, r_l, r_vl: c0 });
    }
    // joint_r2 decreases on (-1, c0] from +inf to hi_r^2 < target.
    let (mut lo, mut hi) = (-1.0, c0);
    while hi - lo > BISECTION_TOL * 1e-3 {
        let mid = 0.5 * (lo + hi);
        if joint_r2(r_v, r_l, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r_vl = 0.5 * (lo + hi);
    if !(r_vl > -1.0) || (joint_r2(r_v, r_l, r_vl) - target).abs() > BISECTION_TOL {
        return Err(Error::Unachievable(format!(
            "no source correlation realises S = {} bits",
            row.s
        )));
    }
    Ok(Triplet { r_v, r_l, r_vl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeScript {
    pub regime: Mechanism,
    pub model_id: String,
    pub task_id: String,
    /// Samples per layer.
    pub samples: usize,
    /// Nuisance coordinates padded onto each source (hidden dim = 1 + this).
    #[serde(default = "default_nuisance")]
    pub nuisance_dims: usize,
    pub profile: Vec<ProfileRow>,
}

fn default_nuisance() -> usize {
    1
}

impl RegimeScript {
    pub fn layers(&self) -> usize {
        self.profile.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: RegimeScript =
            serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        s.validate()?;
        Ok(s)
    }

    /// Checks shape and MMI achievability of every layer.
    pub fn validate(&self) -> Result<Vec<Triplet>> {
        if self.profile.is_empty() {
            return Err(Error::Invalid("regime script has no layers".into()));
        }
        if self.samples < 2 {
            return Err(Error::Invalid("regime script needs at least 2 samples".into()));
        }
        self.profile
            .iter()
            .enumerate()
            .map(|(l, row)| solve_profile(row).map_err(|e| e.context(format!("layer {l}"))))
            .collect()
    }

    /// The scripted components as a trajectory (what a perfect estimator
    /// would return).
    pub fn ideal_trajectory(&self) -> Result<Trajectory> {
        let states = self.profile.iter().enumerate().map(|(l, r)| r.to_state(l)).collect();
        assemble_trajectory(
            states,
            TrajectoryMeta {
                model_id: self.model_id.clone(),
                task_id: self.task_id.clone(),
                condition: Some(Condition::Normal),
                ..Default::default()
            },
        )
    }

    /// Copy with components multiplied per layer, e.g. to inject a knockout
    /// effect. The result is re-validated.
    pub fn scaled(&self, scales: &ProfileRow) -> Result<Self> {
        let mut s = self.clone();
        for row in &mut s.profile {
            row.r *= scales.r;
            row.u_v *= scales.u_v;
            row.u_l *= scales.u_l;
            row.s *= scales.s;
        }
        s.validate()?;
        Ok(s)
    }
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (layer as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Random rotation from the QR decomposition of a Gaussian matrix.
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = normal_matrix(rng, d, d);
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the rotation is uniquely determined by the draw.
    let mut q = q;
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Draws the sources of one layer given the shared target `y`: the signal
/// coordinate from the conditional Gaussian, padded with low-variance
/// nuisance coordinates and randomly rotated.
fn draw_layer(t: &Triplet, y: &[f64], nuisance: usize, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let cv = 1.0 - t.r_v * t.r_v;
    let cl = 1.0 - t.r_l * t.r_l;
    let cvl = t.r_vl - t.r_v * t.r_l;
    let cond = DMatrix::from_row_slice(2, 2, &[cv, cvl, cvl, cl]);
    let chol = Cholesky::new(cond)
        .ok_or_else(|| Error::Numeric("conditional source covariance is not positive definite".into()))?;
    let l = chol.l();
    let n = y.len();
    let d = 1 + nuisance;
    let rot_v = rotation(rng, d);
    let rot_l = rotation(rng, d);
    let mut x_v = DMatrix::zeros(n, d);
    let mut x_l = DMatrix::zeros(n, d);
    let mut pad = DVector::zeros(d);
    for i in 0..n {
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        let sv = t.r_v * y[i] + l[(0, 0)] * e0;
        let sl = t.r_l * y[i] + l[(1, 0)] * e0 + l[(1, 1)] * e1;
        for (sig, out, rot) in [(sv, &mut x_v, &rot_v), (sl, &mut x_l, &rot_l)] {
            pad[0] = sig;
            for k in 1..d {
                let e: f64 = StandardNormal.sample(rng);
                pad[k] = NUISANCE_SD * e;
            }
            let v = rot * &pad;
            for k in 0..d {
                out[(i, k)] = v[k];
            }
        }
    }
    Ok((x_v, x_l))
}

pub fn sample_ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}-{i:06}")).collect()
}

fn build_store(
    script: &RegimeScript,
    triplets: &[Triplet],
    condition: Condition,
    seed: u64,
) -> Result<ActivationStore> {
    let n = script.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let d = 1 + script.nuisance_dims;
    let mut blocks = Vec::with_capacity(triplets.len());
    for (l, t) in triplets.iter().enumerate() {
        let mut lrng = ChaCha8Rng::seed_from_u64(layer_seed(seed, l));
        let (x_v, x_l) = draw_layer(t, &y, script.nuisance_dims, &mut lrng)?;
        blocks.push(LayerBlock::pooled(l, Matrix32::from_dmatrix(&x_v), Matrix32::from_dmatrix(&x_l)));
    }
    let mut manifest = Manifest::pooled(&script.model_id, &script.task_id, condition, triplets.len(), d, n);
    manifest.base_seed = seed;
    manifest.capture_point = Some(format!("synthetic {} script", script.regime.name()));
    manifest.sample_hash = Some(store::sample_hash(&sample_ids(&format!("synth{seed}"), n)));
    Ok(ActivationStore {
        manifest,
        blocks,
        targets: TargetVector::Scalar(y),
    })
}

/// Pooled store realising the script layer by layer. The target is shared
/// across layers, so each layer's sources are drawn conditionally on it.
pub fn gen_regime_dataset(script: &RegimeScript, seed: u64) -> Result<ActivationStore> {
    let triplets = script.validate()?;
    build_store(script, &triplets, Condition::Normal, seed)
}

/// Normal and knockout stores on identical samples (same target draws and
/// sample hash); the knockout store realises `knockout`.
pub fn gen_knockout_pair(
    normal: &RegimeScript,
    knockout: &RegimeScript,
    seed: u64,
) -> Result<(ActivationStore, ActivationStore)> {
    if normal.layers() != knockout.layers() || normal.samples != knockout.samples {
        return Err(Error::Invalid("knockout script must match the normal script's shape".into()));
    }
    let a = build_store(normal, &normal.validate()?, Condition::Normal, seed)?;
    let b = build_store(knockout, &knockout.validate()?, Condition::Knockout, seed)?;
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// Canonical regimes
// ---------------------------------------------------------------------------

fn row(r: f64, u_v: f64, u_l: f64, s: f64) -> ProfileRow {
    ProfileRow { r, u_v, u_l, s }
}

/// U_V peaks at layer 1 and decays to zero by layer 11; U_L appears at
/// layer 12, holds, then surges from layer 19 to 6 bits.
pub fn transduction_script(samples: usize) -> RegimeScript {
    let uv_head = [2.5, 4.0, 3.2, 2.5, 1.9, 1.4, 1.0, 0.7, 0.45, 0.25, 0.1];
    let profile = (0..32)
        .map(|l| {
            let u_v = uv_head.get(l).copied().unwrap_or(0.0);
            let u_l = match l {
                0..=10 => 0.0,
                11..=19 => 0.5,
                _ => 0.5 + 5.5 * (l as f64 - 19.0) / 12.0,
            };
            row(0.3, u_v, u_l, 0.2)
        })
        .collect();
    RegimeScript {
        regime: Mechanism::ModalTransduction,
        model_id: "synth".into(),
        task_id: "transduction".into(),
        samples,
        nuisance_dims: 1,
        profile,
    }
}

/// Synergy holds at 2 bits at every layer with small other components.
pub fn synergy_script(samples: usize) -> RegimeScript {
    let profile = (0..32).map(|_| row(0.3, 0.0, 0.4, 2.0)).collect();
    RegimeScript {
        regime: Mechanism::PersistentSynergy,
        model_id: "synth".into(),
        task_id: "persistent_synergy".into(),
        samples,
        nuisance_dims: 1,
        profile,
    }
}

/// Redundancy grows from 0.5 to 5 bits and dominates the final layer.
pub fn redundancy_script(samples: usize) -> RegimeScript {
    let profile = (0..32)
        .map(|l| row(0.5 + 4.5 * l as f64 / 31.0, 0.0, 0.3, 0.2))
        .collect();
    RegimeScript {
        regime: Mechanism::RedundancyDominant,
        model_id: "synth".into(),
        task_id: "redundancy_dominant".into(),
        samples,
        nuisance_dims: 1,
        profile,
    }
}

pub fn canonical_scripts(samples: usize) -> [RegimeScript; 3] {
    [
        transduction_script(samples),
        synergy_script(samples),
        redundancy_script(samples),
    ]
}

// ---------------------------------------------------------------------------
// Discrete systems
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteSystem {
    Xor,
    And,
    Copy,
    Unique1,
}

/// Uniform-input gate distributions over bits.
pub fn gen_discrete_system(name: DiscreteSystem) -> DiscretePmf {
    let bits = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let outcomes: Vec<(usize, usize, usize)> = match name {
        DiscreteSystem::Xor => bits.iter().map(|&(a, b)| (a, b, a ^ b)).collect(),
        DiscreteSystem::And => bits.iter().map(|&(a, b)| (a, b, a & b)).collect(),
        DiscreteSystem::Copy => vec![(0, 0, 0), (1, 1, 1)],
        DiscreteSystem::Unique1 => bits.iter().map(|&(a, b)| (a, b, a)).collect(),
    };
    DiscretePmf::uniform_over(2, 2, 2, &outcomes).expect("gate tables are valid pmfs")
}
