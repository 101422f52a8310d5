//! Token pooling and PCA reduction.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{
    self, ActivationStore, Granularity, LayerBlock, LayerPayload, Matrix32, PoolingRule,
};

/// Eigenvalues below this are treated as degenerate and never retained.
pub const DEGENERATE_EIGENVALUE: f64 = 1e-12;

pub fn pool_region(
    tokens: &DMatrix<f64>,
    rule: PoolingRule,
    weights: Option<&[f64]>,
) -> Result<DVector<f64>> {
    let m = tokens.nrows();
    if m == 0 {
        return Err(Error::Invalid("cannot pool an empty token region".into()));
    }
    match rule {
        PoolingRule::Mean => Ok(tokens.row_mean().transpose()),
        PoolingRule::Max => Ok(DVector::from_iterator(
            tokens.ncols(),
            tokens.column_iter().map(|c| c.max()),
        )),
        PoolingRule::Attention => {
            let w = weights.ok_or_else(|| {
                Error::Invalid("attention pooling requires a stored weight block".into())
            })?;
            if w.len() != m {
                return Err(Error::Dimension(format!(
                    "{} attention weights for {m} tokens",
                    w.len()
                )));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Invalid("attention weights must be non-negative".into()));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Invalid("attention weights are all zero".into()));
            }
            let w = DVector::from_iterator(m, w.iter().map(|x| x / total));
            Ok(tokens.transpose() * w)
        }
        PoolingRule::None => Err(Error::Invalid("pooling rule none cannot pool".into())),
    }
}

fn pool_tokens(tokens: &Matrix32, weights: Option<&Vec<f32>>, rule: PoolingRule) -> Result<Vec<f32>> {
    let w: Option<Vec<f64>> = weights.map(|w| w.iter().map(|&x| x as f64).collect());
    let pooled = pool_region(&tokens.to_dmatrix(), rule, w.as_deref())?;
    Ok(pooled.iter().map(|&v| v as f32).collect())
}

/// Converts a token-granularity store into a pooled one with `rule`.
pub fn pool_store(store: &ActivationStore, rule: PoolingRule) -> Result<ActivationStore> {
    if store.manifest.granularity == Granularity::Pooled {
        return Ok(store.clone());
    }
    let n = store.manifest.num_samples;
    let d = store.manifest.hidden_dim;
    let blocks = store
        .blocks
        .iter()
        .map(|block| {
            let LayerPayload::Token(records) = &block.payload else {
                return Err(Error::Invalid("token store holds a pooled block".into()));
            };
            let mut xv = Vec::with_capacity(n * d);
            let mut xl = Vec::with_capacity(n * d);
            for r in records {
                xv.extend(pool_tokens(&r.vision, r.vision_weights.as_ref(), rule)?);
                xl.extend(pool_tokens(&r.language, r.language_weights.as_ref(), rule)?);
            }
            Ok(LayerBlock::pooled(
                block.layer_index,
                Matrix32::from_rows(n, d, xv)?,
                Matrix32::from_rows(n, d, xl)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = store.manifest.clone();
    manifest.granularity = Granularity::Pooled;
    manifest.pooling_rule = rule;
    Ok(ActivationStore {
        manifest,
        blocks,
        targets: store.targets.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// d' rows of length d, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub retained_fraction: f64,
    pub d_prime: usize,
    /// Set when a cap (or fixed d') cut below the retain rule.
    pub capped: bool,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json("pca basis", e))?;
        store::write_atomic(path, s.as_bytes())
    }
}

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcaRule {
    /// Smallest d' reaching the variance fraction, optionally capped.
    Retain { fraction: f64, cap: Option<usize> },
    /// Exactly d' components (bounded by the non-degenerate rank).
    Fixed(usize),
}

struct Spectrum {
    mean: DVector<f64>,
    values: Vec<f64>,
    vectors: Vec<DVector<f64>>,
    total: f64,
}

fn spectrum(data: &DMatrix<f64>) -> Result<Spectrum> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("PCA input contains non-finite values".into()));
    }
    let mean = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().sum();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut values = Vec::new();
    let mut vectors = Vec::new();
    for i in order {
        let lambda = eig.eigenvalues[i];
        if lambda < DEGENERATE_EIGENVALUE {
            continue;
        }
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (j, x)| {
                if x.abs() > best.1 + 1e-12 {
                    (j, x.abs())
                } else {
                    best
                }
            })
            .0;
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        values.push(lambda);
        vectors.push(v);
    }
    if values.is_empty() {
        return Err(Error::Invalid("zero-variance data: all rows identical".into()));
    }
    Ok(Spectrum {
        mean,
        values,
        vectors,
        total,
    })
}

pub fn fit_pca(data: &DMatrix<f64>, retain: f64, cap: Option<usize>) -> Result<PcaBasis> {
    fit_pca_with(data, PcaRule::Retain { fraction: retain, cap })
}

pub fn fit_pca_with(data: &DMatrix<f64>, rule: PcaRule) -> Result<PcaBasis> {
    let spec = spectrum(data)?;
    let kept = spec.values.len();
    let (k, capped) = match rule {
        PcaRule::Retain { fraction, cap } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Invalid(format!("retain fraction {fraction} not in (0, 1]")));
            }
            let target = fraction * spec.total * (1.0 - 1e-12);
            let mut cum = 0.0;
            let mut k = kept;
            for (i, v) in spec.values.iter().enumerate() {
                cum += v;
                if cum >= target {
                    k = i + 1;
                    break;
                }
            }
            match cap {
                Some(c) if c < k => (c.max(1), true),
                _ => (k, false),
            }
        }
        PcaRule::Fixed(dims) => {
            if dims == 0 {
                return Err(Error::Invalid("fixed PCA dimension must be positive".into()));
            }
            (dims.min(kept), false)
        }
    };
    let retained: f64 = spec.values[..k].iter().sum();
    let retained_fraction = (retained / spec.total).min(1.0);
    Ok(PcaBasis {
        mean: spec.mean.iter().copied().collect(),
        components: spec.vectors[..k]
            .iter()
            .map(|v| v.iter().copied().collect())
            .collect(),
        eigenvalues: spec.values[..k].to_vec(),
        retained_fraction,
        d_prime: k,
        capped,
    })
}

pub fn apply_pca(basis: &PcaBasis, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = basis.input_dim();
    if data.ncols() != d {
        return Err(Error::Dimension(format!(
            "PCA basis expects {d} columns, data has {}",
            data.ncols()
        )));
    }
    let n = data.nrows();
    let mut out = DMatrix::zeros(n, basis.d_prime);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            centered[j] = data[(i, j)] - basis.mean[j];
        }
        for (k, comp) in basis.components.iter().enumerate() {
            out[(i, k)] = comp.iter().zip(&centered).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}
