//! Normalizing-flow Gaussianization.
//!
//! A [`FlowModel`] maps `D = d' + 1` coordinates (reduced representation plus
//! target) toward a standard normal. After standardization, each coordinate
//! passes through a fixed monotone piecewise-linear map fitted to its
//! empirical quantiles (see [`QuantileMap`]). Each block then applies, in order:
//!
//! 1. a per-coordinate sinh-arcsinh bijection `y = sinh(delta * asinh(x) - eps)`,
//! 2. an affine coupling that mixes representation coordinates only
//!    (present when `d' >= 2`; masks alternate halves between blocks),
//! 3. a normalization with running statistics (frozen at evaluation).
//!
//! No transform ever mixes the representation block with the target
//! coordinate, so the flow is `f(x, y) = (g(x), h(y))` and
//! `I(g(X); h(Y)) = I(X; Y)` holds exactly for every parameter value.
//!
//! Gradients are hand-derived; training minimises the change-of-variables
//! negative log-likelihood with Adam, L2 weight decay and global-norm clipping.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::store;

pub const FLOW_MAGIC: &[u8; 4] = b"PIDF";
pub const FLOW_VERSION: u32 = 2;

/// Log-scale bound of the coupling layers.
const LOG_SCALE_BOUND: f64 = 4.0;
const NORM_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Rows used by the warm-start marginal fits.
const WARM_ROWS: usize = 2048;
/// Knot count bounds for the quantile layer; about one knot per 40 rows.
const QUANTILE_KNOTS_MIN: usize = 16;
const QUANTILE_KNOTS_MAX: usize = 256;
const ROWS_PER_KNOT: usize = 40;
/// Rows used for the periodic model-selection NLL.
const EVAL_ROWS: usize = 8192;
const EVAL_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub num_blocks: usize,
    pub hidden_dim: usize,
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            steps: 10_000,
            weight_decay: 1e-5,
            grad_clip: 1.0,
            seed: 42,
            num_blocks: 8,
            hidden_dim: 256,
        }
    }

    /// Reduced steps and width for laptop-scale runs.
    pub fn test() -> Self {
        TrainConfig {
            steps: 2000,
            hidden_dim: 64,
            ..Self::paper()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && self.grad_clip > 0.0
            && self.num_blocks > 0
            && self.hidden_dim > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad flow train config {self:?}")))
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Per-job seed: `base_seed` xor an FNV-1a hash of (layer, modality).
pub fn derive_seed(base_seed: u64, layer: usize, modality: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in (layer as u64)
        .to_le_bytes()
        .iter()
        .chain(modality.as_bytes())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    base_seed ^ h
}

/// `(sinh u, cosh u, ln cosh u)` from a single `expm1`.
#[inline]
fn sinh_cosh(u: f64) -> (f64, f64, f64) {
    let a = u.abs();
    let em1 = a.exp_m1();
    let e = em1 + 1.0;
    if !e.is_finite() {
        return (f64::INFINITY.copysign(u), f64::INFINITY, a - std::f64::consts::LN_2);
    }
    let sh = 0.5 * em1 * (em1 + 2.0) / e;
    let ch = 0.5 * (e + 1.0 / e);
    let ln_ch = a - std::f64::consts::LN_2 + (1.0 / (e * e)).ln_1p();
    (sh.copysign(u), ch, ln_ch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CouplingLayout {
    cond: (usize, usize),
    trans: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl CouplingLayout {
    fn cond_dim(&self) -> usize {
        self.cond.1 - self.cond.0
    }

    fn trans_dim(&self) -> usize {
        self.trans.1 - self.trans.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockLayout {
    log_delta: usize,
    eps: usize,
    coupling: Option<CouplingLayout>,
}

fn layouts(dim: usize, rep_dim: usize, hidden: usize, blocks: usize) -> (Vec<BlockLayout>, usize) {
    let mut off = 0;
    let mut out = Vec::with_capacity(blocks);
    let half = rep_dim / 2;
    for b in 0..blocks {
        let log_delta = off;
        off += dim;
        let eps = off;
        off += dim;
        let coupling = (rep_dim >= 2).then(|| {
            let first = (0, rep_dim - half);
            let second = (rep_dim - half, rep_dim);
            let (cond, trans) = if b % 2 == 0 { (first, second) } else { (second, first) };
            let c = cond.1 - cond.0;
            let k = trans.1 - trans.0;
            let w1 = off;
            off += hidden * c;
            let b1 = off;
            off += hidden;
            let w2 = off;
            off += 2 * k * hidden;
            let b2 = off;
            off += 2 * k;
            CouplingLayout {
                cond,
                trans,
                w1,
                b1,
                w2,
                b2,
            }
        });
        out.push(BlockLayout {
            log_delta,
            eps,
            coupling,
        });
    }
    (out, off)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    fn inv_std(&self, j: usize) -> f64 {
        1.0 / self.var[j].max(NORM_EPS).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub input_dim: usize,
    /// Leading coordinates that form the representation block.
    pub rep_dim: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    /// Per-coordinate switch for the trainable elementwise bijection.
    pub elementwise: Vec<bool>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Per-coordinate quantile layer applied after standardization.
    pub marginals: Vec<Option<QuantileMap>>,
    pub params: Vec<f64>,
    pub norms: Vec<NormStats>,
    pub train_config: TrainConfig,
    /// NLL (nats per sample) of the identity-initialised model on the data.
    pub initial_nll: f64,
    pub final_nll: f64,
    pub nll_curve: Vec<f64>,
    layout: Vec<BlockLayout>,
}

impl FlowModel {
    /// Identity-initialised flow.
    pub fn identity(input_dim: usize, rep_dim: usize, config: &TrainConfig) -> Result<Self> {
        if input_dim == 0 || rep_dim == 0 || rep_dim > input_dim {
            return Err(Error::Invalid(format!(
                "flow needs 1 <= rep_dim <= input_dim, got rep_dim {rep_dim}, input_dim {input_dim}"
            )));
        }
        config.validate()?;
        let (layout, len) = layouts(input_dim, rep_dim, config.hidden_dim, config.num_blocks);
        let mut params = vec![0.0; len];
        // Hidden-layer weights get a small deterministic init; the output
        // layer stays zero so every coupling starts as the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        for block in &layout {
            if let Some(c) = block.coupling {
                let bound = (1.0 / c.cond_dim() as f64).sqrt();
                for w in &mut params[c.w1..c.b1] {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(FlowModel {
            input_dim,
            rep_dim,
            num_blocks: config.num_blocks,
            hidden_dim: config.hidden_dim,
            elementwise: vec![true; input_dim],
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            marginals: vec![None; input_dim],
            params,
            norms: vec![NormStats::identity(input_dim); config.num_blocks],
            train_config: *config,
            initial_nll: f64::NAN,
            final_nll: f64::NAN,
            nll_curve: Vec::new(),
            layout,
        })
    }

    /// Flow whose only non-identity part is the input standardisation
    /// `x -> (x - shift) / scale`.
    pub fn affine(shift: Vec<f64>, scale: Vec<f64>, config: &TrainConfig) -> Result<Self> {
        if shift.len() != scale.len() || scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Invalid("affine flow needs positive scales".into()));
        }
        let mut m = Self::identity(shift.len(), shift.len(), config)?;
        m.input_shift = shift;
        m.input_scale = scale;
        Ok(m)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Transforms one row in place and returns the log-determinant of the
    /// applied map (forward or inverse).
    fn transform_row(&self, row: &mut [f64], direction: Direction, hidden: &mut [f64], out: &mut [f64]) -> f64 {
        let d = self.input_dim;
        let p = &self.params;
        let mut log_det = 0.0;
        match direction {
            Direction::Forward => {
                for j in 0..d {
                    row[j] = (row[j] - self.input_shift[j]) / self.input_scale[j];
                    log_det -= self.input_scale[j].ln();
                    if let Some(q) = &self.marginals[j] {
                        let (z, ld) = q.forward(row[j]);
                        row[j] = z;
                        log_det += ld;
                    }
                }
                for (b, block) in self.layout.iter().enumerate() {
                    for j in 0..d {
                        if !self.elementwise[j] {
                            continue;
                        }
                        let delta = p[block.log_delta + j].exp();
                        let x = row[j];
                        let u = delta * x.asinh() - p[block.eps + j];
                        let (sh, _, ln_ch) = sinh_cosh(u);
                        row[j] = sh;
                        log_det += ln_ch + delta.ln() - 0.5 * x.mul_add(x, 1.0).ln();
                    }
                    if let Some(c) = &block.coupling {
                        self.conditioner(c, row, hidden, out);
                        let k = c.trans_dim();
                        for i in 0..k {
                            let ls = LOG_SCALE_BOUND * (out[i] / LOG_SCALE_BOUND).tanh();
                            let t = out[k + i];
                            let idx = c.trans.0 + i;
                            row[idx] = row[idx] * ls.exp() + t;
                            log_det += ls;
                        }
                    }
                    let norm = &self.norms[b];
                    for j in 0..d {
                        let is = norm.inv_std(j);
                        row[j] = (row[j] - norm.mean[j]) * is;
                        log_det += is.ln();
                    }
                }
            }
            Direction::Inverse => {
                for (b, block) in self.layout.iter().enumerate().rev() {
                    let norm = &self.norms[b];
                    for j in 0..d {
                        let is = norm.inv_std(j);
                        row[j] = row[j] / is + norm.mean[j];
                        log_det -= is.ln();
                    }
                    if let Some(c) = &block.coupling {
                        self.conditioner(c, row, hidden, out);
                        let k = c.trans_dim();
                        for i in 0..k {
                            let ls = LOG_SCALE_BOUND * (out[i] / LOG_SCALE_BOUND).tanh();
                            let t = out[k + i];
                            let idx = c.trans.0 + i;
                            row[idx] = (row[idx] - t) * (-ls).exp();
                            log_det -= ls;
                        }
                    }
                    for j in 0..d {
                        if !self.elementwise[j] {
                            continue;
                        }
                        let delta = p[block.log_delta + j].exp();
                        let y = row[j];
                        let u = y.asinh();
                        let x = ((u + p[block.eps + j]) / delta).sinh();
                        row[j] = x;
                        log_det -= u.cosh().ln() + delta.ln() - 0.5 * x.mul_add(x, 1.0).ln();
                    }
                }
                for j in 0..d {
                    if let Some(q) = &self.marginals[j] {
                        let (x, ld) = q.inverse(row[j]);
                        row[j] = x;
                        log_det += ld;
                    }
                    row[j] = row[j] * self.input_scale[j] + self.input_shift[j];
                    log_det += self.input_scale[j].ln();
                }
            }
        }
        log_det
    }

    /// Conditioner MLP: `out = W2 relu(W1 x_cond + b1) + b2`.
    fn conditioner(&self, c: &CouplingLayout, row: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let p = &self.params;
        let cd = c.cond_dim();
        let h = self.hidden_dim;
        let cond = &row[c.cond.0..c.cond.1];
        for (u, slot) in hidden[..h].iter_mut().enumerate() {
            let w = &p[c.w1 + u * cd..c.w1 + (u + 1) * cd];
            let mut acc = p[c.b1 + u];
            for (wi, xi) in w.iter().zip(cond) {
                acc += wi * xi;
            }
            *slot = acc.max(0.0);
        }
        for o in 0..2 * c.trans_dim() {
            let w = &p[c.w2 + o * h..c.w2 + (o + 1) * h];
            let mut acc = p[c.b2 + o];
            for (wi, hi) in w.iter().zip(&hidden[..h]) {
                acc += wi * hi;
            }
            out[o] = acc;
        }
    }

    fn scratch(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.hidden_dim], vec![0.0; 2 * self.input_dim])
    }

    /// Applies the flow to every row; returns outputs and per-row log-dets.
    pub fn transform(&self, data: &DMatrix<f64>, direction: Direction) -> Result<(DMatrix<f64>, Vec<f64>)> {
        if data.ncols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "flow expects {} columns, data has {}",
                self.input_dim,
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite flow input".into()));
        }
        let n = data.nrows();
        let mut out = data.clone();
        let mut log_dets = Vec::with_capacity(n);
        let (mut hidden, mut o) = self.scratch();
        let mut row = vec![0.0; self.input_dim];
        for i in 0..n {
            for j in 0..self.input_dim {
                row[j] = data[(i, j)];
            }
            log_dets.push(self.transform_row(&mut row, direction, &mut hidden, &mut o));
            for j in 0..self.input_dim {
                out[(i, j)] = row[j];
            }
        }
        Ok((out, log_dets))
    }

    /// Mean negative log-likelihood (nats per sample) of `rows` (row-major).
    fn nll_rows(&self, rows: &[f64]) -> f64 {
        let d = self.input_dim;
        let n = rows.len() / d;
        let (mut hidden, mut o) = self.scratch();
        let mut row = vec![0.0; d];
        let mut total = 0.0;
        for i in 0..n {
            row.copy_from_slice(&rows[i * d..(i + 1) * d]);
            let ld = self.transform_row(&mut row, Direction::Forward, &mut hidden, &mut o);
            let sq: f64 = row.iter().map(|z| z * z).sum();
            total += 0.5 * sq + 0.5 * d as f64 * LN_2PI - ld;
        }
        total / n as f64
    }

    /// Mean NLL in nats per sample.
    pub fn nll(&self, data: &DMatrix<f64>) -> Result<f64> {
        if data.ncols() != self.input_dim {
            return Err(Error::Dimension("flow input width".into()));
        }
        Ok(self.nll_rows(&row_major(data)))
    }

    // -- serialization -----------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(FLOW_MAGIC);
        for v in [
            FLOW_VERSION,
            self.input_dim as u32,
            self.rep_dim as u32,
            self.num_blocks as u32,
            self.hidden_dim as u32,
            self.train_config.batch_size as u32,
            self.train_config.steps as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.train_config.seed.to_le_bytes());
        buf.extend(self.elementwise.iter().map(|&b| b as u8));
        let mut put = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        let tc = &self.train_config;
        for v in [tc.learning_rate, tc.weight_decay, tc.grad_clip, self.initial_nll, self.final_nll] {
            put(v);
        }
        for v in self.input_shift.iter().chain(&self.input_scale).chain(&self.params) {
            put(*v);
        }
        for n in &self.norms {
            for v in n.mean.iter().chain(&n.var) {
                put(*v);
            }
        }
        for q in &self.marginals {
            let knots = q.as_ref().map_or(&[][..], |q| &q.xs[..]);
            buf.extend_from_slice(&(knots.len() as u32).to_le_bytes());
            if let Some(q) = q {
                for v in q.xs.iter().chain(&q.zs) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("flow file: {m}"));
        if bytes.len() < 4 || &bytes[..4] != FLOW_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut pos = 4;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("short read"))?;
            *pos += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let version = u32_at(&mut pos)?;
        if version != FLOW_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let input_dim = u32_at(&mut pos)? as usize;
        let rep_dim = u32_at(&mut pos)? as usize;
        let num_blocks = u32_at(&mut pos)? as usize;
        let hidden_dim = u32_at(&mut pos)? as usize;
        let batch_size = u32_at(&mut pos)? as usize;
        let steps = u32_at(&mut pos)? as usize;
        let seed_bytes = bytes.get(pos..pos + 8).ok_or_else(|| bad("short read"))?;
        let seed = u64::from_le_bytes(seed_bytes.try_into().expect("8 bytes"));
        pos += 8;
        let mask = bytes.get(pos..pos + input_dim).ok_or_else(|| bad("short read"))?;
        let elementwise: Vec<bool> = mask.iter().map(|&b| b != 0).collect();
        pos += input_dim;
        let f64_at = |pos: &mut usize| -> Result<f64> {
            let b = bytes.get(*pos..*pos + 8).ok_or_else(|| bad("short read"))?;
            *pos += 8;
            Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
        };
        let learning_rate = f64_at(&mut pos)?;
        let weight_decay = f64_at(&mut pos)?;
        let grad_clip = f64_at(&mut pos)?;
        let initial_nll = f64_at(&mut pos)?;
        let final_nll = f64_at(&mut pos)?;
        let config = TrainConfig {
            learning_rate,
            batch_size,
            steps,
            weight_decay,
            grad_clip,
            seed,
            num_blocks,
            hidden_dim,
        };
        let mut m = FlowModel::identity(input_dim, rep_dim, &config)?;
        m.elementwise = elementwise;
        m.initial_nll = initial_nll;
        m.final_nll = final_nll;
        let read_vec = |len: usize, pos: &mut usize| -> Result<Vec<f64>> {
            (0..len).map(|_| f64_at(pos)).collect()
        };
        m.input_shift = read_vec(input_dim, &mut pos)?;
        m.input_scale = read_vec(input_dim, &mut pos)?;
        m.params = read_vec(m.params.len(), &mut pos)?;
        for b in 0..num_blocks {
            m.norms[b] = NormStats {
                mean: read_vec(input_dim, &mut pos)?,
                var: read_vec(input_dim, &mut pos)?,
            };
        }
        for j in 0..input_dim {
            let k = u32_at(&mut pos)? as usize;
            if k > 0 {
                let xs = read_vec(k, &mut pos)?;
                let zs = read_vec(k, &mut pos)?;
                m.marginals[j] = Some(QuantileMap::from_knots(xs, zs).map_err(|_| bad("bad quantile knots"))?);
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn row_major(data: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.nrows() {
        for j in 0..data.ncols() {
            out.push(data[(i, j)]);
        }
    }
    out
}

pub fn flow_transform(model: &FlowModel, data: &DMatrix<f64>, direction: Direction) -> Result<(DMatrix<f64>, Vec<f64>)> {
    model.transform(data, direction)
}

/// Strictly increasing piecewise-linear map from a coordinate to normal
/// scores, with knots at empirical quantiles `(k + 1/2) / K` and linear
/// extension past the end knots. Fitted once from data and then frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    xs: Vec<f64>,
    zs: Vec<f64>,
}

impl QuantileMap {
    /// `None` when the values have fewer than two distinct quantiles.
    pub fn fit(mut values: Vec<f64>) -> Option<Self> {
        let n = values.len();
        if n < 2 {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let k = (n / ROWS_PER_KNOT).clamp(QUANTILE_KNOTS_MIN, QUANTILE_KNOTS_MAX);
        let normal = Normal::standard();
        let (mut xs, mut zs) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for i in 0..k {
            let p = (i as f64 + 0.5) / k as f64;
            let pos = (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let x = values[lo] + (pos - lo as f64) * (values[hi] - values[lo]);
            if xs.last().is_none_or(|&last| x > last) {
                xs.push(x);
                zs.push(normal.inverse_cdf(p));
            }
        }
        Self::from_knots(xs, zs).ok()
    }

    pub fn from_knots(xs: Vec<f64>, zs: Vec<f64>) -> Result<Self> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]) && v.iter().all(|x| x.is_finite());
        if xs.len() != zs.len() || xs.len() < 2 || !increasing(&xs) || !increasing(&zs) {
            return Err(Error::Invalid("quantile knots must be finite and strictly increasing".into()));
        }
        Ok(QuantileMap { xs, zs })
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.xs, &self.zs)
    }

    fn eval(from: &[f64], to: &[f64], v: f64) -> (f64, f64) {
        let seg = from.partition_point(|&k| k <= v).clamp(1, from.len() - 1) - 1;
        let slope = (to[seg + 1] - to[seg]) / (from[seg + 1] - from[seg]);
        (to[seg] + slope * (v - from[seg]), slope.ln())
    }

    /// Image and log-derivative at `x`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        Self::eval(&self.xs, &self.zs, x)
    }

    /// Preimage of `z` and the log-derivative of the inverse there.
    pub fn inverse(&self, z: f64) -> (f64, f64) {
        Self::eval(&self.zs, &self.xs, z)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Activations cached by the batched forward pass for one block.
struct BlockCache {
    /// Block input (after previous block), B x D.
    input: Vec<f64>,
    /// asinh of the block input, B x D.
    asinh_in: Vec<f64>,
    /// cosh and tanh of the pre-sinh values u, B x D.
    cosh_u: Vec<f64>,
    tanh_u: Vec<f64>,
    /// Output of the elementwise stage (input to the coupling), B x D.
    sas_out: Vec<f64>,
    /// Conditioner pre-activations, B x H.
    pre: Vec<f64>,
    /// Raw conditioner outputs, B x 2k.
    raw: Vec<f64>,
    /// Input to the normalization, B x D.
    norm_in: Vec<f64>,
}

impl FlowModel {
    /// Forward pass over a batch with caches; returns the final outputs and
    /// the per-row log-dets.
    fn forward_batch(&self, rows: &[f64], caches: &mut Vec<BlockCache>) -> (Vec<f64>, Vec<f64>) {
        let d = self.input_dim;
        let bsz = rows.len() / d;
        let h = self.hidden_dim;
        let p = &self.params;
        let mut x = rows.to_vec();
        let base: f64 = self.input_scale.iter().map(|s| -s.ln()).sum();
        let mut log_det = vec![base; bsz];
        for (i, v) in x.iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.input_shift[j]) / self.input_scale[j];
            if let Some(q) = &self.marginals[j] {
                let (z, ld) = q.forward(*v);
                *v = z;
                log_det[i / d] += ld;
            }
        }
        caches.clear();
        for (b, block) in self.layout.iter().enumerate() {
            let input = x.clone();
            let mut asinh_in = vec![0.0; bsz * d];
            let mut cosh_u = vec![1.0; bsz * d];
            let mut tanh_u = vec![0.0; bsz * d];
            for j in 0..d {
                if !self.elementwise[j] {
                    continue;
                }
                let delta = p[block.log_delta + j].exp();
                let ln_delta = p[block.log_delta + j];
                let eps = p[block.eps + j];
                for i in 0..bsz {
                    let idx = i * d + j;
                    let xi = x[idx];
                    let a = xi.asinh();
                    let (sh, ch, ln_ch) = sinh_cosh(delta * a - eps);
                    asinh_in[idx] = a;
                    cosh_u[idx] = ch;
                    tanh_u[idx] = sh / ch;
                    x[idx] = sh;
                    log_det[i] += ln_ch + ln_delta - 0.5 * xi.mul_add(xi, 1.0).ln();
                }
            }
            let sas_out = x.clone();
            let (mut pre, mut raw) = (Vec::new(), Vec::new());
            if let Some(c) = &block.coupling {
                let cd = c.cond_dim();
                let k = c.trans_dim();
                pre = vec![0.0; bsz * h];
                raw = vec![0.0; bsz * 2 * k];
                for i in 0..bsz {
                    let cond = &sas_out[i * d + c.cond.0..i * d + c.cond.1];
                    let pre_i = &mut pre[i * h..(i + 1) * h];
                    for (hu, slot) in pre_i.iter_mut().enumerate() {
                        let w = &p[c.w1 + hu * cd..c.w1 + (hu + 1) * cd];
                        let mut acc = p[c.b1 + hu];
                        for (wi, xi) in w.iter().zip(cond) {
                            acc += wi * xi;
                        }
                        *slot = acc;
                    }
                    let raw_i = &mut raw[i * 2 * k..(i + 1) * 2 * k];
                    for (o, slot) in raw_i.iter_mut().enumerate() {
                        let w = &p[c.w2 + o * h..c.w2 + (o + 1) * h];
                        let mut acc = p[c.b2 + o];
                        for (wi, pi) in w.iter().zip(pre_i.iter()) {
                            if *pi > 0.0 {
                                acc += wi * pi;
                            }
                        }
                        *slot = acc;
                    }
                    for t in 0..k {
                        let ls = LOG_SCALE_BOUND * (raw_i[t] / LOG_SCALE_BOUND).tanh();
                        let idx = i * d + c.trans.0 + t;
                        x[idx] = x[idx] * ls.exp() + raw_i[k + t];
                        log_det[i] += ls;
                    }
                }
            }
            let norm_in = x.clone();
            let norm = &self.norms[b];
            for j in 0..d {
                let is = norm.inv_std(j);
                let ld = is.ln();
                for i in 0..bsz {
                    let idx = i * d + j;
                    x[idx] = (x[idx] - norm.mean[j]) * is;
                    log_det[i] += ld;
                }
            }
            caches.push(BlockCache {
                input,
                asinh_in,
                cosh_u,
                tanh_u,
                sas_out,
                pre,
                raw,
                norm_in,
            });
        }
        (x, log_det)
    }

    /// Mean batch loss and its gradient with respect to `params`.
    /// Normalization statistics are treated as constants.
    fn loss_and_grad(&self, rows: &[f64], grad: &mut [f64], caches: &mut Vec<BlockCache>) -> f64 {
        let d = self.input_dim;
        let bsz = rows.len() / d;
        let h = self.hidden_dim;
        let p = &self.params;
        let (z, log_det) = self.forward_batch(rows, caches);
        let mut loss = 0.0;
        for i in 0..bsz {
            let sq: f64 = z[i * d..(i + 1) * d].iter().map(|v| v * v).sum();
            loss += 0.5 * sq + 0.5 * d as f64 * LN_2PI - log_det[i];
        }
        loss /= bsz as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / bsz as f64;
        // dL/dz for the final output
        let mut g: Vec<f64> = z.iter().map(|v| v * scale).collect();
        for (b, block) in self.layout.iter().enumerate().rev() {
            let cache = &caches[b];
            let norm = &self.norms[b];
            for j in 0..d {
                let is = norm.inv_std(j);
                for i in 0..bsz {
                    g[i * d + j] *= is;
                }
            }
            if let Some(c) = &block.coupling {
                let cd = c.cond_dim();
                let k = c.trans_dim();
                let mut dpre = vec![0.0; h];
                let mut draw = vec![0.0; 2 * k];
                for i in 0..bsz {
                    let raw_i = &cache.raw[i * 2 * k..(i + 1) * 2 * k];
                    let pre_i = &cache.pre[i * h..(i + 1) * h];
                    for t in 0..k {
                        let th = (raw_i[t] / LOG_SCALE_BOUND).tanh();
                        let ls = LOG_SCALE_BOUND * th;
                        let e = ls.exp();
                        let idx = i * d + c.trans.0 + t;
                        let y_in = cache.sas_out[idx];
                        let gy = g[idx];
                        let dls = gy * y_in * e - scale;
                        draw[t] = dls * (1.0 - th * th);
                        draw[k + t] = gy;
                        g[idx] = gy * e;
                    }
                    dpre.iter_mut().for_each(|v| *v = 0.0);
                    for (o, dr) in draw.iter().enumerate() {
                        if *dr == 0.0 {
                            continue;
                        }
                        grad[c.b2 + o] += dr;
                        let wrow = c.w2 + o * h;
                        for hu in 0..h {
                            if pre_i[hu] > 0.0 {
                                grad[wrow + hu] += dr * pre_i[hu];
                                dpre[hu] += dr * p[wrow + hu];
                            }
                        }
                    }
                    let cond = &cache.sas_out[i * d + c.cond.0..i * d + c.cond.1];
                    for hu in 0..h {
                        let dp = dpre[hu];
                        if dp == 0.0 || pre_i[hu] <= 0.0 {
                            continue;
                        }
                        grad[c.b1 + hu] += dp;
                        let wrow = c.w1 + hu * cd;
                        for (ci, xc) in cond.iter().enumerate() {
                            grad[wrow + ci] += dp * xc;
                            g[i * d + c.cond.0 + ci] += dp * p[wrow + ci];
                        }
                    }
                }
            }
            for j in 0..d {
                if !self.elementwise[j] {
                    continue;
                }
                let delta = p[block.log_delta + j].exp();
                let mut g_logdelta = 0.0;
                let mut g_eps = 0.0;
                for i in 0..bsz {
                    let idx = i * d + j;
                    let x = cache.input[idx];
                    let du = g[idx] * cache.cosh_u[idx] - scale * cache.tanh_u[idx];
                    g_logdelta += delta * du * cache.asinh_in[idx] - scale;
                    g_eps -= du;
                    let r = x.mul_add(x, 1.0);
                    g[idx] = du * delta / r.sqrt() + scale * x / r;
                }
                grad[block.log_delta + j] += g_logdelta;
                grad[block.eps + j] += g_eps;
            }
        }
        loss
    }

    fn update_norms(&mut self, caches: &[BlockCache], bsz: usize) {
        let d = self.input_dim;
        for (b, cache) in caches.iter().enumerate() {
            for j in 0..d {
                let mut mean = 0.0;
                for i in 0..bsz {
                    mean += cache.norm_in[i * d + j];
                }
                mean /= bsz as f64;
                let mut var = 0.0;
                for i in 0..bsz {
                    let c = cache.norm_in[i * d + j] - mean;
                    var += c * c;
                }
                var /= (bsz.max(2) - 1) as f64;
                let n = &mut self.norms[b];
                n.mean[j] += NORM_MOMENTUM * (mean - n.mean[j]);
                n.var[j] += NORM_MOMENTUM * (var - n.var[j]);
            }
        }
    }
}

/// Marginal NLL (up to constants) of one standardized coordinate after the
/// elementwise bijection and an optimal affine rescale.
/// `asinh_xs` holds the asinh of the coordinate's values.
fn marginal_objective(asinh_xs: &[f64], log_delta: f64, eps: f64) -> f64 {
    let delta = log_delta.exp();
    let n = asinh_xs.len() as f64;
    let (mut s1, mut s2, mut jac) = (0.0, 0.0, 0.0);
    for &a in asinh_xs {
        let (y, _, ln_ch) = sinh_cosh(delta * a - eps);
        s1 += y;
        s2 += y * y;
        jac += ln_ch;
    }
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(1e-300);
    0.5 * var.ln() - jac / n - log_delta
}

impl FlowModel {
    /// Data-dependent initialisation. Block by block, each elementwise
    /// bijection is fitted to the marginals of its (normalized) input by a
    /// coarse-to-fine grid search, and each normalization layer is set to the
    /// exact moments of its input. Greedy marginal Gaussianization, in short.
    fn warm_start(&mut self, rows: &[f64]) {
        let d = self.input_dim;
        let take = (rows.len() / d).min(WARM_ROWS);
        let sample = &rows[..take * d];
        let mut caches = Vec::new();
        // Once a block fits to the identity, later blocks see the same
        // standardized input and would too.
        let mut settled = false;
        for b in 0..self.num_blocks {
            self.forward_batch(sample, &mut caches);
            let block = self.layout[b];
            if !settled {
                settled = true;
                for j in 0..d {
                    if !self.elementwise[j] {
                        continue;
                    }
                    let xs: Vec<f64> = (0..take).map(|i| caches[b].asinh_in[i * d + j]).collect();
                    let (ld, ep) = fit_marginal(&xs);
                    self.params[block.log_delta + j] = ld;
                    self.params[block.eps + j] = ep;
                    settled &= ld == 0.0 && ep == 0.0;
                }
            }
            self.forward_batch(sample, &mut caches);
            let cache = &caches[b];
            for j in 0..d {
                let col = (0..take).map(|i| cache.norm_in[i * d + j]);
                let mean = col.clone().sum::<f64>() / take as f64;
                let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / take as f64;
                self.norms[b].mean[j] = mean;
                self.norms[b].var[j] = var.max(NORM_EPS);
            }
        }
    }
}

/// Best `(log_delta, eps)` for one coordinate from the asinh of its values;
/// the identity wins ties.
fn fit_marginal(asinh_xs: &[f64]) -> (f64, f64) {
    let (mut best_ld, mut best_eps) = (0.0, 0.0);
    let mut best = marginal_objective(asinh_xs, 0.0, 0.0);
    let (mut c_ld, mut c_eps, mut span_ld, mut span_eps) = (-0.5, 0.0, 1.5, 2.0);
    for _ in 0..3 {
        for a in 0..=8 {
            for b in 0..=8 {
                let ld = c_ld + span_ld * (a as f64 / 4.0 - 1.0);
                let ep = c_eps + span_eps * (b as f64 / 4.0 - 1.0);
                let f = marginal_objective(asinh_xs, ld, ep);
                if f < best - 1e-9 {
                    (best, best_ld, best_eps) = (f, ld, ep);
                }
            }
        }
        (c_ld, c_eps) = (best_ld, best_eps);
        span_ld /= 3.0;
        span_eps /= 3.0;
    }
    (best_ld, best_eps)
}

/// Trains a flow on `data` (rows are samples). The last
/// `data.ncols() - rep_dim` columns are target coordinates that only receive
/// elementwise transforms; `elementwise` (if given) disables the elementwise
/// bijection on selected columns, e.g. for discrete targets.
pub fn train_flow_with(
    data: &DMatrix<f64>,
    rep_dim: usize,
    elementwise: Option<&[bool]>,
    config: &TrainConfig,
) -> Result<FlowModel> {
    let n = data.nrows();
    let d = data.ncols();
    if n < 2 {
        return Err(Error::Invalid(format!("flow training needs at least 2 rows, got {n}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite flow training data".into()));
    }
    let mut model = FlowModel::identity(d, rep_dim, config)?;
    if let Some(mask) = elementwise {
        if mask.len() != d {
            return Err(Error::Dimension("elementwise mask width".into()));
        }
        model.elementwise = mask.to_vec();
    }
    for j in 0..d {
        let col = data.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::Invalid(format!("flow input column {j} has zero variance")));
        }
        model.input_shift[j] = mean;
        model.input_scale[j] = var.sqrt();
    }

    let rows = row_major(data);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let eval_rows: Vec<f64> = order
        .iter()
        .take(EVAL_ROWS.min(n))
        .flat_map(|&i| rows[i * d..(i + 1) * d].iter().copied())
        .collect();

    if config.steps == 0 {
        let nll = model.nll_rows(&rows);
        model.initial_nll = nll;
        model.final_nll = nll;
        model.nll_curve = vec![nll];
        return Ok(model);
    }
    for j in 0..d {
        if model.elementwise[j] {
            let std: Vec<f64> = data
                .column(j)
                .iter()
                .map(|v| (v - model.input_shift[j]) / model.input_scale[j])
                .collect();
            model.marginals[j] = QuantileMap::fit(std);
        }
    }
    model.warm_start(&eval_rows);
    let initial_full = model.nll_rows(&rows);
    model.initial_nll = initial_full;

    let bsz = config.batch_size.min(n);
    let mut grad = vec![0.0; model.params.len()];
    let mut m1 = vec![0.0; model.params.len()];
    let mut m2 = vec![0.0; model.params.len()];
    let mut caches = Vec::with_capacity(config.num_blocks);
    let mut batch = vec![0.0; bsz * d];
    let mut cursor = n; // forces a reshuffle on the first step
    let start = (model.params.clone(), model.norms.clone());
    let mut best = (model.nll_rows(&eval_rows), model.params.clone(), model.norms.clone());
    let eval_every = (config.steps / EVAL_POINTS).max(1);
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        for slot in 0..bsz {
            if cursor >= n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            batch[slot * d..(slot + 1) * d].copy_from_slice(&rows[i * d..(i + 1) * d]);
        }
        let loss = model.loss_and_grad(&batch, &mut grad, &mut caches);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "flow training diverged at step {step} (loss {loss})"
            )));
        }
        curve.push(loss);
        for (g, p) in grad.iter_mut().zip(&model.params) {
            *g += config.weight_decay * p;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > config.grad_clip {
            let s = config.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let t = (step + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (a, v)) in model
            .params
            .iter_mut()
            .zip(&grad)
            .zip(m1.iter_mut().zip(m2.iter_mut()))
        {
            *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= config.learning_rate * (*a / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        model.update_norms(&caches, bsz);
        if (step + 1) % eval_every == 0 || step + 1 == config.steps {
            let nll = model.nll_rows(&eval_rows);
            if !nll.is_finite() {
                return Err(Error::Numeric(format!(
                    "flow evaluation diverged at step {step}"
                )));
            }
            if nll <= best.0 {
                best = (nll, model.params.clone(), model.norms.clone());
            }
        }
    }
    model.params = best.1;
    model.norms = best.2;
    let final_full = model.nll_rows(&rows);
    if final_full > initial_full {
        // Training never beat the warm start on the full data; keep it.
        model.params = start.0;
        model.norms = start.1;
        model.final_nll = initial_full;
    } else {
        model.final_nll = final_full;
    }
    model.nll_curve = curve;
    Ok(model)
}

/// Trains a flow where the last column is the target coordinate (all
/// columns form the representation block when `D = 1`).
pub fn train_flow(data: &DMatrix<f64>, config: &TrainConfig) -> Result<FlowModel> {
    let rep_dim = if data.ncols() > 1 { data.ncols() - 1 } else { 1 };
    train_flow_with(data, rep_dim, None, config)
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussFitReport {
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    pub max_abs_skew: f64,
    pub max_abs_kurtosis: f64,
    /// Coordinates beyond the skew or kurtosis flag thresholds.
    pub flagged: Vec<usize>,
    pub nll_curve: Vec<f64>,
}

pub const SKEW_FLAG: f64 = 0.5;
pub const KURTOSIS_FLAG: f64 = 1.0;

pub fn gaussianity_diagnostics(data: &DMatrix<f64>) -> Result<GaussFitReport> {
    gaussianity_diagnostics_with(data, SKEW_FLAG, KURTOSIS_FLAG)
}

pub fn gaussianity_diagnostics_with(data: &DMatrix<f64>, skew_flag: f64, kurt_flag: f64) -> Result<GaussFitReport> {
    let n = data.nrows();
    if n < 8 {
        return Err(Error::Invalid(format!("diagnostics need at least 8 rows, got {n}")));
    }
    let mut skewness = Vec::with_capacity(data.ncols());
    let mut kurt = Vec::with_capacity(data.ncols());
    for (j, col) in data.column_iter().enumerate() {
        let mean = col.mean();
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for v in col.iter() {
            let c = v - mean;
            let c2 = c * c;
            m2 += c2;
            m3 += c2 * c;
            m4 += c2 * c2;
        }
        let nf = n as f64;
        m2 /= nf;
        m3 /= nf;
        m4 /= nf;
        if !(m2 > 0.0) {
            return Err(Error::Invalid(format!("coordinate {j} has zero variance")));
        }
        skewness.push(m3 / m2.powf(1.5));
        kurt.push(m4 / (m2 * m2) - 3.0);
    }
    let flagged = (0..skewness.len())
        .filter(|&j| skewness[j].abs() > skew_flag || kurt[j].abs() > kurt_flag)
        .collect();
    Ok(GaussFitReport {
        max_abs_skew: skewness.iter().fold(0.0, |a, b| a.max(b.abs())),
        max_abs_kurtosis: kurt.iter().fold(0.0, |a, b| a.max(b.abs())),
        skewness,
        excess_kurtosis: kurt,
        flagged,
        nll_curve: vec![f64::NAN],
    })
}

impl GaussFitReport {
    pub fn with_curve(mut self, curve: &[f64]) -> Self {
        self.nll_curve = if curve.is_empty() { vec![f64::NAN] } else { curve.to_vec() };
        self
    }
}
