//! On-disk activation store.
//!
//! A store is a directory holding `manifest.json`, one `layer_<l>.bin` per
//! captured layer (layer 0 is the embedding output) and `targets.bin`.
//!
//! Layer files start with the magic `PIDL`, then `u32` version, `u32 n`,
//! `u32 d`, all little-endian. Pooled layers follow with `n*d` f32 values of
//! the vision summaries and `n*d` f32 values of the language summaries, both
//! row-major. Token layers instead carry a `u32` bitfield (bit 0: vision
//! weights present, bit 1: language weights present) and then one record per
//! sample: `u32 nV`, `u32 nL`, `nV*d` f32, `nL*d` f32, then the optional
//! `nV` / `nL` f32 attention weights.
//!
//! `targets.bin` is `PIDY`, `u32` version, `u32 n`, `u8` kind (0 scalar
//! logit, 1 discrete label) and `n` f64 or `n` u32 values.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const LAYER_MAGIC: &[u8; 4] = b"PIDL";
pub const TARGET_MAGIC: &[u8; 4] = b"PIDY";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TARGETS_FILE: &str = "targets.bin";

const WEIGHTS_VISION: u32 = 1;
const WEIGHTS_LANGUAGE: u32 = 1 << 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Normal,
    Knockout,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Normal => "normal",
            Condition::Knockout => "knockout",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Pooled,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingRule {
    Mean,
    Max,
    Attention,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    ScalarLogit,
    DiscreteLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub task_id: String,
    pub condition: Condition,
    /// L + 1 entries; layer 0 is the embedding output.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_samples: usize,
    pub granularity: Granularity,
    pub pooling_rule: PoolingRule,
    pub target_kind: TargetKind,
    pub base_seed: u64,
    pub layer_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u32>,
    /// Free-form note on where hidden states were captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_point: Option<String>,
    /// SHA-256 over the ordered sample IDs; paired stores must agree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_hash: Option<String>,
}

impl Manifest {
    /// Manifest for a pooled store with default layer file names.
    pub fn pooled(
        model_id: impl Into<String>,
        task_id: impl Into<String>,
        condition: Condition,
        num_layers: usize,
        hidden_dim: usize,
        num_samples: usize,
    ) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            task_id: task_id.into(),
            condition,
            num_layers,
            hidden_dim,
            num_samples,
            granularity: Granularity::Pooled,
            pooling_rule: PoolingRule::Mean,
            target_kind: TargetKind::ScalarLogit,
            base_seed: 42,
            layer_files: default_layer_files(num_layers),
            num_classes: None,
            capture_point: None,
            sample_hash: None,
        }
    }
}

pub fn default_layer_files(num_layers: usize) -> Vec<String> {
    (0..num_layers).map(|l| format!("layer_{l}.bin")).collect()
}

/// Hex SHA-256 of the ordered sample IDs (newline separated).
pub fn sample_hash<S: AsRef<str>>(ids: &[S]) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.as_ref().as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Row-major f32 matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix32 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix32 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix32 { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Converts to an f64 nalgebra matrix.
    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_iterator(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64),
        )
    }

    pub fn from_dmatrix(m: &nalgebra::DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)] as f32);
            }
        }
        Matrix32 {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

/// Per-sample token activations for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub vision: Matrix32,
    pub language: Matrix32,
    pub vision_weights: Option<Vec<f32>>,
    pub language_weights: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    Pooled { x_v: Matrix32, x_l: Matrix32 },
    Token(Vec<TokenRecord>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub layer_index: usize,
    pub payload: LayerPayload,
}

impl LayerBlock {
    pub fn pooled(layer_index: usize, x_v: Matrix32, x_l: Matrix32) -> Self {
        LayerBlock {
            layer_index,
            payload: LayerPayload::Pooled { x_v, x_l },
        }
    }

    pub fn num_samples(&self) -> usize {
        match &self.payload {
            LayerPayload::Pooled { x_v, .. } => x_v.rows,
            LayerPayload::Token(records) => records.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetVector {
    Scalar(Vec<f64>),
    Labels(Vec<u32>),
}

impl TargetVector {
    pub fn len(&self) -> usize {
        match self {
            TargetVector::Scalar(v) => v.len(),
            TargetVector::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> TargetKind {
        match self {
            TargetVector::Scalar(_) => TargetKind::ScalarLogit,
            TargetVector::Labels(_) => TargetKind::DiscreteLabel,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TargetVector::Scalar(v) => v.clone(),
            TargetVector::Labels(v) => v.iter().map(|&l| l as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub manifest: Manifest,
    pub blocks: Vec<LayerBlock>,
    pub targets: TargetVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MissingFile,
    Manifest,
    BadMagic,
    Version,
    ShortRead,
    TrailingBytes,
    Dimension,
    NonFinite,
    TokenCount,
    Weights,
    TargetLength,
    TargetKind,
    LabelRange,
    LayerCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub layer: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l} {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(
        &mut self,
        kind: ViolationKind,
        layer: Option<usize>,
        field: &str,
        message: impl Into<String>,
    ) {
        self.violations.push(Violation {
            kind,
            layer,
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn into_result(self) -> Result<()> {
        match self.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::Format(v.to_string())),
        }
    }
}

fn check_manifest(m: &Manifest, report: &mut ValidationReport) {
    use ViolationKind::Manifest as M;
    if m.format_version != FORMAT_VERSION {
        report.push(
            ViolationKind::Version,
            None,
            "format_version",
            format!("unsupported version {}", m.format_version),
        );
    }
    if m.num_layers < 1 {
        report.push(M, None, "num_layers", "must be at least 1");
    }
    if m.num_samples < 2 {
        report.push(M, None, "num_samples", "must be at least 2");
    }
    if m.hidden_dim < 1 {
        report.push(M, None, "hidden_dim", "must be at least 1");
    }
    if m.layer_files.len() != m.num_layers {
        report.push(
            ViolationKind::LayerCount,
            None,
            "layer_files",
            format!(
                "layer count mismatch: {} files for {} layers",
                m.layer_files.len(),
                m.num_layers
            ),
        );
    }
    for name in &m.layer_files {
        if name.is_empty() || name.contains('/') || name.contains('\\') || name == ".." {
            report.push(M, None, "layer_files", format!("bad file name {name:?}"));
        }
    }
    match (m.granularity, m.pooling_rule) {
        (Granularity::Token, PoolingRule::None) => {}
        (Granularity::Token, rule) => report.push(
            M,
            None,
            "pooling_rule",
            format!("token granularity requires pooling_rule none, got {rule:?}"),
        ),
        (Granularity::Pooled, PoolingRule::None) => report.push(
            M,
            None,
            "pooling_rule",
            "pooled granularity requires the pooling rule that produced it",
        ),
        _ => {}
    }
    if let Some(k) = m.num_classes {
        if k < 2 {
            report.push(M, None, "num_classes", "must be at least 2");
        }
    }
}

fn check_matrix(
    mat: &Matrix32,
    rows: usize,
    cols: usize,
    layer: usize,
    field: &str,
    report: &mut ValidationReport,
) {
    if mat.rows != rows || mat.cols != cols || mat.data.len() != rows * cols {
        report.push(
            ViolationKind::Dimension,
            Some(layer),
            field,
            format!("expected {rows}x{cols}, got {}x{}", mat.rows, mat.cols),
        );
    }
    let bad = mat.data.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        report.push(
            ViolationKind::NonFinite,
            Some(layer),
            field,
            format!("{bad} non-finite values"),
        );
    }
}

fn check_block(m: &Manifest, block: &LayerBlock, layer: usize, report: &mut ValidationReport) {
    let n = m.num_samples;
    let d = m.hidden_dim;
    match (&block.payload, m.granularity) {
        (LayerPayload::Pooled { x_v, x_l }, Granularity::Pooled) => {
            check_matrix(x_v, n, d, layer, "x_v", report);
            check_matrix(x_l, n, d, layer, "x_l", report);
        }
        (LayerPayload::Token(records), Granularity::Token) => {
            if records.len() != n {
                report.push(
                    ViolationKind::Dimension,
                    Some(layer),
                    "records",
                    format!("expected {n} samples, got {}", records.len()),
                );
            }
            let vw = records.first().is_some_and(|r| r.vision_weights.is_some());
            let lw = records.first().is_some_and(|r| r.language_weights.is_some());
            for (i, r) in records.iter().enumerate() {
                if r.vision.rows == 0 || r.language.rows == 0 {
                    report.push(
                        ViolationKind::TokenCount,
                        Some(layer),
                        "token_counts",
                        format!("sample {i} has an empty token region"),
                    );
                }
                check_matrix(&r.vision, r.vision.rows, d, layer, "vision_tokens", report);
                check_matrix(&r.language, r.language.rows, d, layer, "language_tokens", report);
                for (present, weights, rows, field) in [
                    (vw, &r.vision_weights, r.vision.rows, "vision_weights"),
                    (lw, &r.language_weights, r.language.rows, "language_weights"),
                ] {
                    match weights {
                        Some(w) if !present || w.len() != rows => report.push(
                            ViolationKind::Weights,
                            Some(layer),
                            field,
                            format!("sample {i} weight block inconsistent"),
                        ),
                        Some(w) if w.iter().any(|v| !v.is_finite()) => report.push(
                            ViolationKind::NonFinite,
                            Some(layer),
                            field,
                            format!("sample {i} has non-finite weights"),
                        ),
                        None if present => report.push(
                            ViolationKind::Weights,
                            Some(layer),
                            field,
                            format!("sample {i} missing weight block"),
                        ),
                        _ => {}
                    }
                }
            }
        }
        _ => report.push(
            ViolationKind::Manifest,
            Some(layer),
            "granularity",
            "block granularity does not match manifest",
        ),
    }
}

fn check_targets(m: &Manifest, targets: &TargetVector, report: &mut ValidationReport) {
    if targets.len() != m.num_samples {
        report.push(
            ViolationKind::TargetLength,
            None,
            "targets",
            format!(
                "target length {} does not match num_samples {}",
                targets.len(),
                m.num_samples
            ),
        );
    }
    if targets.kind() != m.target_kind {
        report.push(
            ViolationKind::TargetKind,
            None,
            "targets",
            "target kind does not match manifest",
        );
    }
    match targets {
        TargetVector::Scalar(v) => {
            let bad = v.iter().filter(|x| !x.is_finite()).count();
            if bad > 0 {
                report.push(
                    ViolationKind::NonFinite,
                    None,
                    "targets",
                    format!("{bad} non-finite values"),
                );
            }
        }
        TargetVector::Labels(v) => {
            if let Some(k) = m.num_classes {
                if v.iter().any(|&l| l >= k) {
                    report.push(
                        ViolationKind::LabelRange,
                        None,
                        "targets",
                        format!("label outside [0, {k})"),
                    );
                }
            }
        }
    }
}

/// Checks in-memory store contents against every invariant.
pub fn check_store(store: &ActivationStore) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = &store.manifest;
    check_manifest(m, &mut report);
    if store.blocks.len() != m.num_layers {
        report.push(
            ViolationKind::LayerCount,
            None,
            "blocks",
            format!(
                "layer count mismatch: {} blocks for {} layers",
                store.blocks.len(),
                m.num_layers
            ),
        );
    }
    for (l, block) in store.blocks.iter().enumerate() {
        if block.layer_index != l {
            report.push(
                ViolationKind::LayerCount,
                Some(l),
                "layer_index",
                format!("block at position {l} has index {}", block.layer_index),
            );
        }
        check_block(m, block, l, &mut report);
    }
    check_targets(m, &store.targets, &mut report);
    report
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} exceeds u32")))
}

pub fn encode_layer(block: &LayerBlock, n: usize, d: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 8 * n * d);
    buf.extend_from_slice(LAYER_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, to_u32(n, "num_samples")?);
    put_u32(&mut buf, to_u32(d, "hidden_dim")?);
    match &block.payload {
        LayerPayload::Pooled { x_v, x_l } => {
            put_f32s(&mut buf, &x_v.data);
            put_f32s(&mut buf, &x_l.data);
        }
        LayerPayload::Token(records) => {
            let mut flags = 0;
            if records.first().is_some_and(|r| r.vision_weights.is_some()) {
                flags |= WEIGHTS_VISION;
            }
            if records.first().is_some_and(|r| r.language_weights.is_some()) {
                flags |= WEIGHTS_LANGUAGE;
            }
            put_u32(&mut buf, flags);
            for r in records {
                put_u32(&mut buf, to_u32(r.vision.rows, "vision token count")?);
                put_u32(&mut buf, to_u32(r.language.rows, "language token count")?);
                put_f32s(&mut buf, &r.vision.data);
                put_f32s(&mut buf, &r.language.data);
                if let Some(w) = &r.vision_weights {
                    put_f32s(&mut buf, w);
                }
                if let Some(w) = &r.language_weights {
                    put_f32s(&mut buf, w);
                }
            }
        }
    }
    Ok(buf)
}

pub fn encode_targets(targets: &TargetVector) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(13 + 8 * targets.len());
    buf.extend_from_slice(TARGET_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, to_u32(targets.len(), "target length")?);
    match targets {
        TargetVector::Scalar(v) => {
            buf.push(0);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TargetVector::Labels(v) => {
            buf.push(1);
            for x in v {
                put_u32(&mut buf, *x);
            }
        }
    }
    Ok(buf)
}

fn encode_manifest(m: &Manifest) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(m).map_err(|e| Error::json("manifest", e))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Validates then writes a store; nothing is written when validation fails.
pub fn write_store(store: &ActivationStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_store(store).into_result()?;
    let m = &store.manifest;
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::with_capacity(m.num_layers + 2);
    for (block, name) in store.blocks.iter().zip(&m.layer_files) {
        files.push((
            path.join(name),
            encode_layer(block, m.num_samples, m.hidden_dim)?,
        ));
    }
    files.push((path.join(TARGETS_FILE), encode_targets(&store.targets)?));
    files.push((path.join(MANIFEST_FILE), encode_manifest(m)?));
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    for (file, bytes) in files {
        write_atomic(&file, &bytes)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(len)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, count: usize) -> Option<Vec<f32>> {
        let raw = self.take(count.checked_mul(4)?)?;
        Some(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        )
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Checks the magic/version/n/d header; returns false if parsing must stop.
fn check_header(
    cur: &mut Cursor<'_>,
    magic: &[u8; 4],
    n: usize,
    d: Option<usize>,
    layer: Option<usize>,
    field: &str,
    report: &mut ValidationReport,
) -> bool {
    match cur.take(4) {
        Some(m) if m == magic => {}
        Some(_) => {
            report.push(ViolationKind::BadMagic, layer, field, "bad magic");
            return false;
        }
        None => {
            report.push(ViolationKind::ShortRead, layer, field, "short read in header");
            return false;
        }
    }
    let Some(version) = cur.u32() else {
        report.push(ViolationKind::ShortRead, layer, field, "short read in header");
        return false;
    };
    if version != FORMAT_VERSION {
        report.push(
            ViolationKind::Version,
            layer,
            field,
            format!("unsupported version {version}"),
        );
        return false;
    }
    let Some(file_n) = cur.u32() else {
        report.push(ViolationKind::ShortRead, layer, field, "short read in header");
        return false;
    };
    if file_n as usize != n {
        let kind = if magic == TARGET_MAGIC {
            ViolationKind::TargetLength
        } else {
            ViolationKind::Dimension
        };
        let what = if magic == TARGET_MAGIC {
            "target length"
        } else {
            "sample count"
        };
        report.push(
            kind,
            layer,
            field,
            format!("{what} {file_n} does not match manifest num_samples {n}"),
        );
        return false;
    }
    if let Some(d) = d {
        let Some(file_d) = cur.u32() else {
            report.push(ViolationKind::ShortRead, layer, field, "short read in header");
            return false;
        };
        if file_d as usize != d {
            report.push(
                ViolationKind::Dimension,
                layer,
                field,
                format!("hidden dim {file_d} does not match manifest hidden_dim {d}"),
            );
            return false;
        }
    }
    true
}

fn finite_check(values: &[f32], layer: usize, field: &str, report: &mut ValidationReport) {
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        report.push(
            ViolationKind::NonFinite,
            Some(layer),
            field,
            format!("{bad} non-finite values (NaN payload)"),
        );
    }
}

fn short_read(layer: Option<usize>, field: &str, report: &mut ValidationReport) {
    report.push(
        ViolationKind::ShortRead,
        layer,
        field,
        "short read: file truncated",
    );
}

fn decode_layer(
    bytes: &[u8],
    m: &Manifest,
    layer: usize,
    report: &mut ValidationReport,
) -> Option<LayerBlock> {
    let n = m.num_samples;
    let d = m.hidden_dim;
    let field = m.layer_files.get(layer).map(String::as_str).unwrap_or("layer");
    let mut cur = Cursor::new(bytes);
    if !check_header(&mut cur, LAYER_MAGIC, n, Some(d), Some(layer), field, report) {
        return None;
    }
    let payload = match m.granularity {
        Granularity::Pooled => {
            let Some(xv) = cur.f32s(n * d) else {
                short_read(Some(layer), field, report);
                return None;
            };
            finite_check(&xv, layer, "x_v", report);
            let Some(xl) = cur.f32s(n * d) else {
                short_read(Some(layer), field, report);
                return None;
            };
            finite_check(&xl, layer, "x_l", report);
            LayerPayload::Pooled {
                x_v: Matrix32 {
                    rows: n,
                    cols: d,
                    data: xv,
                },
                x_l: Matrix32 {
                    rows: n,
                    cols: d,
                    data: xl,
                },
            }
        }
        Granularity::Token => {
            let Some(flags) = cur.u32() else {
                short_read(Some(layer), field, report);
                return None;
            };
            if flags & !(WEIGHTS_VISION | WEIGHTS_LANGUAGE) != 0 {
                report.push(
                    ViolationKind::Weights,
                    Some(layer),
                    field,
                    format!("unknown weight flags {flags:#x}"),
                );
            }
            let mut records = Vec::with_capacity(n);
            for i in 0..n {
                let (Some(nv), Some(nl)) = (cur.u32(), cur.u32()) else {
                    short_read(Some(layer), field, report);
                    return None;
                };
                let (nv, nl) = (nv as usize, nl as usize);
                if nv == 0 || nl == 0 {
                    report.push(
                        ViolationKind::TokenCount,
                        Some(layer),
                        "token_counts",
                        format!("sample {i} has an empty token region"),
                    );
                }
                let Some(v) = cur.f32s(nv * d) else {
                    short_read(Some(layer), field, report);
                    return None;
                };
                let Some(l) = cur.f32s(nl * d) else {
                    short_read(Some(layer), field, report);
                    return None;
                };
                finite_check(&v, layer, "vision_tokens", report);
                finite_check(&l, layer, "language_tokens", report);
                let mut weights = |present: bool, count: usize| -> Option<Option<Vec<f32>>> {
                    if !present {
                        return Some(None);
                    }
                    cur.f32s(count).map(Some)
                };
                let Some(vw) = weights(flags & WEIGHTS_VISION != 0, nv) else {
                    short_read(Some(layer), field, report);
                    return None;
                };
                let Some(lw) = weights(flags & WEIGHTS_LANGUAGE != 0, nl) else {
                    short_read(Some(layer), field, report);
                    return None;
                };
                records.push(TokenRecord {
                    vision: Matrix32 {
                        rows: nv,
                        cols: d,
                        data: v,
                    },
                    language: Matrix32 {
                        rows: nl,
                        cols: d,
                        data: l,
                    },
                    vision_weights: vw,
                    language_weights: lw,
                });
            }
            LayerPayload::Token(records)
        }
    };
    if cur.remaining() > 0 {
        report.push(
            ViolationKind::TrailingBytes,
            Some(layer),
            field,
            format!("{} trailing bytes", cur.remaining()),
        );
    }
    Some(LayerBlock {
        layer_index: layer,
        payload,
    })
}

fn decode_targets(bytes: &[u8], m: &Manifest, report: &mut ValidationReport) -> Option<TargetVector> {
    let n = m.num_samples;
    let mut cur = Cursor::new(bytes);
    if !check_header(&mut cur, TARGET_MAGIC, n, None, None, TARGETS_FILE, report) {
        return None;
    }
    let Some(kind) = cur.take(1).map(|b| b[0]) else {
        short_read(None, TARGETS_FILE, report);
        return None;
    };
    let targets = match kind {
        0 => {
            let Some(raw) = cur.take(n * 8) else {
                short_read(None, TARGETS_FILE, report);
                return None;
            };
            let v: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            TargetVector::Scalar(v)
        }
        1 => {
            let Some(raw) = cur.take(n * 4) else {
                short_read(None, TARGETS_FILE, report);
                return None;
            };
            TargetVector::Labels(
                raw.chunks_exact(4)
                    .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            )
        }
        other => {
            report.push(
                ViolationKind::TargetKind,
                None,
                TARGETS_FILE,
                format!("unknown target kind byte {other}"),
            );
            return None;
        }
    };
    if cur.remaining() > 0 {
        report.push(
            ViolationKind::TrailingBytes,
            None,
            TARGETS_FILE,
            format!("{} trailing bytes", cur.remaining()),
        );
    }
    check_targets(m, &targets, report);
    Some(targets)
}

fn read_file(path: &Path, field: &str, layer: Option<usize>, report: &mut ValidationReport) -> Option<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Some(b),
        Err(e) => {
            report.push(
                ViolationKind::MissingFile,
                layer,
                field,
                format!("cannot read {}: {e}", path.display()),
            );
            None
        }
    }
}

fn scan_store(path: &Path) -> (Option<ActivationStore>, ValidationReport) {
    let mut report = ValidationReport::default();
    let Some(raw) = read_file(&path.join(MANIFEST_FILE), MANIFEST_FILE, None, &mut report) else {
        return (None, report);
    };
    let manifest: Manifest = match serde_json::from_slice(&raw) {
        Ok(m) => m,
        Err(e) => {
            report.push(
                ViolationKind::Manifest,
                None,
                MANIFEST_FILE,
                format!("unparseable manifest: {e}"),
            );
            return (None, report);
        }
    };
    check_manifest(&manifest, &mut report);
    if !report.is_valid() {
        return (None, report);
    }
    let mut blocks = Vec::with_capacity(manifest.num_layers);
    for (l, name) in manifest.layer_files.iter().enumerate() {
        if let Some(bytes) = read_file(&path.join(name), name, Some(l), &mut report) {
            if let Some(block) = decode_layer(&bytes, &manifest, l, &mut report) {
                blocks.push(block);
            }
        }
    }
    let targets = read_file(&path.join(TARGETS_FILE), TARGETS_FILE, None, &mut report)
        .and_then(|bytes| decode_targets(&bytes, &manifest, &mut report));
    let store = match (report.is_valid(), targets) {
        (true, Some(targets)) => Some(ActivationStore {
            manifest,
            blocks,
            targets,
        }),
        _ => None,
    };
    (store, report)
}

/// Reads a store, failing on the first violated invariant.
pub fn read_store(path: impl AsRef<Path>) -> Result<ActivationStore> {
    let (store, report) = scan_store(path.as_ref());
    report.into_result()?;
    store.ok_or_else(|| Error::Format("store could not be decoded".into()))
}

/// Enumerates every violated invariant of the store at `path`.
pub fn validate_store(path: impl AsRef<Path>) -> ValidationReport {
    scan_store(path.as_ref()).1
}
