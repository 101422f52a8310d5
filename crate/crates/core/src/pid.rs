//! Closed-form Gaussian mutual information, the minimum-information (MMI)
//! partial information decomposition, and a brute-force discrete oracle
//! based on Williams–Beer specific information.
//!
//! Internally everything is in nats; [`InfoState`] values are in bits.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BITS_PER_NAT: f64 = std::f64::consts::LOG2_E;
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Largest negative component (nats) that is clamped silently.
pub const CLAMP_TOLERANCE: f64 = 1e-6;

pub fn nats_to_bits(x: f64) -> f64 {
    x * BITS_PER_NAT
}

pub fn bits_to_nats(x: f64) -> f64 {
    x / BITS_PER_NAT
}

/// Joint Gaussian over the concatenation (Z_Q, Z_I, Z_Y): language
/// coordinates, vision coordinates, target coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGaussian {
    pub d_q: usize,
    pub d_i: usize,
    pub d_y: usize,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Diagonal regulariser that was added to `cov`.
    pub ridge: f64,
    pub n_samples: usize,
}

impl JointGaussian {
    /// Wraps a known covariance (e.g. a generator's) with zero mean.
    pub fn from_cov(d_q: usize, d_i: usize, d_y: usize, cov: DMatrix<f64>) -> Result<Self> {
        let dim = d_q + d_i + d_y;
        if d_q == 0 || d_i == 0 || d_y == 0 {
            return Err(Error::Invalid("every group needs at least one coordinate".into()));
        }
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::Dimension(format!(
                "covariance is {}x{}, groups need {dim}x{dim}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        if !(asym <= 1e-10) {
            return Err(Error::Invalid(format!("covariance not symmetric (max gap {asym:e})")));
        }
        if Cholesky::new(cov.clone()).is_none() {
            return Err(Error::Numeric("singular covariance".into()));
        }
        Ok(JointGaussian {
            d_q,
            d_i,
            d_y,
            mean: vec![0.0; dim],
            cov,
            ridge: 0.0,
            n_samples: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.d_q + self.d_i + self.d_y
    }

    pub fn language(&self) -> Vec<usize> {
        (0..self.d_q).collect()
    }

    pub fn vision(&self) -> Vec<usize> {
        (self.d_q..self.d_q + self.d_i).collect()
    }

    pub fn target(&self) -> Vec<usize> {
        (self.d_q + self.d_i..self.dim()).collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.d_q + self.d_i).collect()
    }

    fn sub(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.cov[(idx[i], idx[j])])
    }
}

fn log_det(m: DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(m).ok_or_else(|| Error::Numeric("singular covariance".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// I(A;B) in nats for disjoint coordinate groups of a joint Gaussian.
pub fn gaussian_mi(joint: &JointGaussian, a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("mutual information groups must be non-empty".into()));
    }
    let dim = joint.dim();
    if a.iter().chain(b).any(|&i| i >= dim) {
        return Err(Error::Dimension(format!("group index outside 0..{dim}")));
    }
    if a.iter().any(|i| b.contains(i)) {
        return Err(Error::Invalid("mutual information groups overlap".into()));
    }
    if let ([i], [j]) = (a, b) {
        let (vi, vj, c) = (joint.cov[(*i, *i)], joint.cov[(*j, *j)], joint.cov[(*i, *j)]);
        if !(vi > 0.0 && vj > 0.0) {
            return Err(Error::Numeric("singular covariance".into()));
        }
        let rho2 = c * c / (vi * vj);
        if rho2 >= 1.0 {
            return Err(Error::Numeric("singular covariance".into()));
        }
        return Ok(-0.5 * (-rho2).ln_1p());
    }
    let union: Vec<usize> = a.iter().chain(b).copied().collect();
    let mi = 0.5 * (log_det(joint.sub(a))? + log_det(joint.sub(b))? - log_det(joint.sub(&union))?);
    // Negative values here are pure rounding.
    Ok(mi.max(0.0))
}

/// MLE covariance (1/n) of the stacked columns plus `ridge * I`.
pub fn estimate_joint_cov(
    z_q: &DMatrix<f64>,
    z_i: &DMatrix<f64>,
    z_y: &DMatrix<f64>,
    ridge: f64,
) -> Result<JointGaussian> {
    let n = z_q.nrows();
    if z_i.nrows() != n || z_y.nrows() != n {
        return Err(Error::Dimension(format!(
            "row counts differ: {n}, {}, {}",
            z_i.nrows(),
            z_y.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {n}")));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Invalid("ridge must be non-negative".into()));
    }
    let (d_q, d_i, d_y) = (z_q.ncols(), z_i.ncols(), z_y.ncols());
    let dim = d_q + d_i + d_y;
    let mut stacked = DMatrix::zeros(n, dim);
    stacked.columns_mut(0, d_q).copy_from(z_q);
    stacked.columns_mut(d_q, d_i).copy_from(z_i);
    stacked.columns_mut(d_q + d_i, d_y).copy_from(z_y);
    if stacked.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite coordinates".into()));
    }
    let mean = stacked.row_mean();
    for mut row in stacked.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = (stacked.transpose() * &stacked) / n as f64;
    // enforce exact symmetry
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += ridge;
    }
    if Cholesky::new(cov.clone()).is_none() {
        return Err(Error::Numeric("singular covariance".into()));
    }
    Ok(JointGaussian {
        d_q,
        d_i,
        d_y,
        mean: mean.iter().copied().collect(),
        cov,
        ridge,
        n_samples: n,
    })
}

pub const CLAMP_R: u8 = 1;
pub const CLAMP_UV: u8 = 1 << 1;
pub const CLAMP_UL: u8 = 1 << 2;
pub const CLAMP_S: u8 = 1 << 3;

/// PID quadruple for one layer, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoState {
    pub layer: usize,
    pub r: f64,
    pub u_v: f64,
    pub u_l: f64,
    pub s: f64,
    pub i_tot: f64,
    /// Bitfield of components clamped from a small negative value to zero.
    pub clamp_flags: u8,
}

impl InfoState {
    pub fn new(layer: usize, r: f64, u_v: f64, u_l: f64, s: f64) -> Self {
        InfoState {
            layer,
            r,
            u_v,
            u_l,
            s,
            i_tot: r + u_v + u_l + s,
            clamp_flags: 0,
        }
    }

    pub fn component(&self, c: Component) -> f64 {
        match c {
            Component::R => self.r,
            Component::UV => self.u_v,
            Component::UL => self.u_l,
            Component::S => self.s,
            Component::Total => self.i_tot,
        }
    }

    pub fn component_sum(&self) -> f64 {
        self.r + self.u_v + self.u_l + self.s
    }

    /// Relative additivity error |R+U_V+U_L+S - I_tot| / max(I_tot, 1e-9).
    pub fn additivity_error(&self) -> f64 {
        (self.component_sum() - self.i_tot).abs() / self.i_tot.max(1e-9)
    }

    pub fn is_valid(&self) -> bool {
        let comps = [self.r, self.u_v, self.u_l, self.s, self.i_tot];
        comps.iter().all(|c| c.is_finite())
            && [self.r, self.u_v, self.u_l, self.s]
                .iter()
                .all(|&c| c >= -nats_to_bits(CLAMP_TOLERANCE))
            && self.additivity_error() < 0.01
    }

    pub const CSV_HEADER: &'static str = "layer,R,U_V,U_L,S,I_tot,clamp_flags";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.layer, self.r, self.u_v, self.u_l, self.s, self.i_tot, self.clamp_flags
        );
        s
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("bad info-state row {line:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number {s:?} in {line:?}")))
        };
        Ok(InfoState {
            layer: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad layer in {line:?}")))?,
            r: num(f[1])?,
            u_v: num(f[2])?,
            u_l: num(f[3])?,
            s: num(f[4])?,
            i_tot: num(f[5])?,
            clamp_flags: f[6]
                .parse()
                .map_err(|_| Error::Format(format!("bad clamp flags in {line:?}")))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "R")]
    R,
    #[serde(rename = "U_V")]
    UV,
    #[serde(rename = "U_L")]
    UL,
    #[serde(rename = "S")]
    S,
    #[serde(rename = "I_tot")]
    Total,
}

impl Component {
    pub const PID: [Component; 4] = [Component::R, Component::UV, Component::UL, Component::S];
    pub const ALL: [Component; 5] = [
        Component::R,
        Component::UV,
        Component::UL,
        Component::S,
        Component::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::R => "R",
            Component::UV => "U_V",
            Component::UL => "U_L",
            Component::S => "S",
            Component::Total => "I_tot",
        }
    }
}

/// The three mutual informations the MMI decomposition is built from, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmiTerms {
    /// I(Z_I; Z_Y)
    pub i_v: f64,
    /// I(Z_Q; Z_Y)
    pub i_l: f64,
    /// I(Z_Q, Z_I; Z_Y)
    pub i_joint: f64,
}

pub fn mmi_terms(joint: &JointGaussian) -> Result<MmiTerms> {
    let y = joint.target();
    Ok(MmiTerms {
        i_v: gaussian_mi(joint, &joint.vision(), &y)?,
        i_l: gaussian_mi(joint, &joint.language(), &y)?,
        i_joint: gaussian_mi(joint, &joint.sources(), &y)?,
    })
}

/// MMI decomposition of already-computed mutual informations (nats in,
/// bits out).
pub fn decompose_terms(layer: usize, t: MmiTerms) -> InfoState {
    let r = t.i_v.min(t.i_l);
    let u_v = t.i_v - r;
    let u_l = t.i_l - r;
    let s = t.i_joint - t.i_l - t.i_v + r;
    let mut flags = 0;
    let mut clamp = |v: f64, bit: u8| {
        if v < 0.0 {
            flags |= bit;
            0.0
        } else {
            v
        }
    };
    let (r, u_v, u_l, s) = (
        clamp(r, CLAMP_R),
        clamp(u_v, CLAMP_UV),
        clamp(u_l, CLAMP_UL),
        clamp(s, CLAMP_S),
    );
    InfoState {
        layer,
        r: nats_to_bits(r),
        u_v: nats_to_bits(u_v),
        u_l: nats_to_bits(u_l),
        s: nats_to_bits(s),
        i_tot: nats_to_bits(t.i_joint),
        clamp_flags: flags,
    }
}

pub fn decompose_pid_mmi(joint: &JointGaussian) -> Result<InfoState> {
    Ok(decompose_terms(0, mmi_terms(joint)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    /// |I(Z_I;Z_Y) - (R + U_V)| in nats.
    pub vision_residual: f64,
    /// |I(Z_Q;Z_Y) - (R + U_L)| in nats.
    pub language_residual: f64,
    /// |I(Z_I;Z_Y|Z_Q) - (U_V + S)| in nats.
    pub conditional_residual: f64,
    pub passed: bool,
}

impl IdentityReport {
    pub fn max_residual(&self) -> f64 {
        self.vision_residual
            .max(self.language_residual)
            .max(self.conditional_residual)
    }
}

pub fn check_identities(state: &InfoState, joint: &JointGaussian) -> Result<IdentityReport> {
    let t = mmi_terms(joint)?;
    let r = bits_to_nats(state.r);
    let u_v = bits_to_nats(state.u_v);
    let u_l = bits_to_nats(state.u_l);
    let s = bits_to_nats(state.s);
    let i_cond = t.i_joint - t.i_l;
    let vision_residual = (t.i_v - (r + u_v)).abs();
    let language_residual = (t.i_l - (r + u_l)).abs();
    let conditional_residual = (i_cond - (u_v + s)).abs();
    let passed = vision_residual < CLAMP_TOLERANCE
        && language_residual < CLAMP_TOLERANCE
        && conditional_residual < CLAMP_TOLERANCE;
    Ok(IdentityReport {
        vision_residual,
        language_residual,
        conditional_residual,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Discrete oracle
// ---------------------------------------------------------------------------

pub const MAX_ALPHABET: usize = 16;

/// Joint pmf over (X1, X2, Y) with exact rational probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePmf {
    pub n1: usize,
    pub n2: usize,
    pub ny: usize,
    probs: Vec<BigRational>,
}

impl DiscretePmf {
    pub fn from_rationals(n1: usize, n2: usize, ny: usize, probs: Vec<BigRational>) -> Result<Self> {
        if [n1, n2, ny].iter().any(|&k| k == 0 || k > MAX_ALPHABET) {
            return Err(Error::Invalid(format!(
                "alphabet sizes must be in 1..={MAX_ALPHABET}"
            )));
        }
        if probs.len() != n1 * n2 * ny {
            return Err(Error::Dimension(format!(
                "pmf needs {} entries, got {}",
                n1 * n2 * ny,
                probs.len()
            )));
        }
        if probs.iter().any(|p| p.is_negative()) {
            return Err(Error::Invalid("negative probability".into()));
        }
        let total: BigRational = probs.iter().sum();
        let total = total.to_f64().unwrap_or(f64::NAN);
        if !((total - 1.0).abs() <= 1e-9) {
            return Err(Error::Invalid(format!("pmf sums to {total}, not 1")));
        }
        Ok(DiscretePmf { n1, n2, ny, probs })
    }

    /// Float probabilities are converted exactly to rationals.
    pub fn from_f64(n1: usize, n2: usize, ny: usize, probs: &[f64]) -> Result<Self> {
        let probs = probs
            .iter()
            .map(|&p| {
                BigRational::from_float(p)
                    .ok_or_else(|| Error::Invalid(format!("non-finite probability {p}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rationals(n1, n2, ny, probs)
    }

    /// Uniform distribution over the listed (x1, x2, y) outcomes.
    pub fn uniform_over(n1: usize, n2: usize, ny: usize, outcomes: &[(usize, usize, usize)]) -> Result<Self> {
        let mut probs = vec![BigRational::zero(); n1 * n2 * ny];
        let w = BigRational::new(BigInt::from(1), BigInt::from(outcomes.len()));
        for &(a, b, y) in outcomes {
            if a >= n1 || b >= n2 || y >= ny {
                return Err(Error::Dimension("outcome outside alphabet".into()));
            }
            probs[(a * n2 + b) * ny + y] += &w;
        }
        Self::from_rationals(n1, n2, ny, probs)
    }

    pub fn p(&self, a: usize, b: usize, y: usize) -> &BigRational {
        &self.probs[(a * self.n2 + b) * self.ny + y]
    }
}

/// Discrete PID with sources X1, X2, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretePid {
    pub r: f64,
    pub u1: f64,
    pub u2: f64,
    pub s: f64,
    pub i1: f64,
    pub i2: f64,
    pub i_joint: f64,
}

impl DiscretePid {
    /// Maps X1 to the vision source and X2 to the language source.
    pub fn to_info_state(&self, layer: usize) -> InfoState {
        InfoState {
            layer,
            r: self.r,
            u_v: self.u1,
            u_l: self.u2,
            s: self.s,
            i_tot: self.i_joint,
            clamp_flags: 0,
        }
    }
}

fn ratio_log2(num: &BigRational, den: &BigRational) -> f64 {
    (num / den).to_f64().unwrap_or(f64::NAN).log2()
}

/// Source marginals p(x, y) for one source, exact.
fn source_joint(pmf: &DiscretePmf, which: usize) -> Vec<Vec<BigRational>> {
    let nx = if which == 0 { pmf.n1 } else { pmf.n2 };
    let mut out = vec![vec![BigRational::zero(); pmf.ny]; nx];
    for a in 0..pmf.n1 {
        for b in 0..pmf.n2 {
            for y in 0..pmf.ny {
                let x = if which == 0 { a } else { b };
                out[x][y] += pmf.p(a, b, y);
            }
        }
    }
    out
}

/// Mutual information and per-outcome specific information for a source
/// given its joint table p(x, y).
fn specific_information(pxy: &[Vec<BigRational>], py: &[BigRational]) -> (f64, Vec<f64>) {
    let px: Vec<BigRational> = pxy.iter().map(|row| row.iter().sum()).collect();
    let mut spec = vec![0.0; py.len()];
    let mut mi = 0.0;
    for (y, p_y) in py.iter().enumerate() {
        if p_y.is_zero() {
            continue;
        }
        for (x, row) in pxy.iter().enumerate() {
            let p_xy = &row[y];
            if p_xy.is_zero() {
                continue;
            }
            // p(y|x) / p(y) = p(x,y) / (p(x) p(y))
            let gain = ratio_log2(p_xy, &(&px[x] * p_y));
            spec[y] += (p_xy / p_y).to_f64().unwrap_or(f64::NAN) * gain;
            mi += p_xy.to_f64().unwrap_or(f64::NAN) * gain;
        }
    }
    (mi, spec)
}

/// Williams–Beer I_min decomposition by exhaustive enumeration.
pub fn discrete_pid_brute(pmf: &DiscretePmf) -> DiscretePid {
    let mut py = vec![BigRational::zero(); pmf.ny];
    for a in 0..pmf.n1 {
        for b in 0..pmf.n2 {
            for (y, slot) in py.iter_mut().enumerate() {
                *slot += pmf.p(a, b, y);
            }
        }
    }
    let (i1, spec1) = specific_information(&source_joint(pmf, 0), &py);
    let (i2, spec2) = specific_information(&source_joint(pmf, 1), &py);
    let joint: Vec<Vec<BigRational>> = (0..pmf.n1 * pmf.n2)
        .map(|k| (0..pmf.ny).map(|y| pmf.p(k / pmf.n2, k % pmf.n2, y).clone()).collect())
        .collect();
    let (i_joint, _) = specific_information(&joint, &py);
    let r: f64 = py
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_zero())
        .map(|(y, p)| p.to_f64().unwrap_or(f64::NAN) * spec1[y].min(spec2[y]))
        .sum();
    DiscretePid {
        r,
        u1: i1 - r,
        u2: i2 - r,
        s: i_joint - i1 - i2 + r,
        i1,
        i2,
        i_joint,
    }
}
