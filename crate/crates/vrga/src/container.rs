//! On-disk containers: a JSON manifest plus a raw little-endian payload.
//!
//! Attention dumps carry `f32` rows `[L][H][M]` (or `[steps][L][H][M]`);
//! toy checkpoints carry the flat `f64` parameter vector. The payload path in
//! a manifest is resolved relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vrga_core::dump::{DumpKind, DumpShape};
use vrga_core::toy::{Optimizer, ToyConfig, ToyModel};
use vrga_core::{AttentionDump, Grid, RowCheck, RowSumWarning, Span, TokenLayout};

use crate::error::{AppError, AppResult};
use crate::fsutil::{read, write_atomic};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifestKind {
    QtSlice,
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub version: u32,
    pub kind: ManifestKind,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "M")]
    pub tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub visual_spans: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<GridSpec>>,
    pub question_end_index: usize,
    pub dtype: String,
    pub byte_order: String,
    pub payload_file: String,
    #[serde(default)]
    pub payload_offset_bytes: u64,
    /// Free-form description of how the rows were captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<serde_json::Value>,
}

impl DumpManifest {
    pub fn describe(dump: &AttentionDump, payload_file: &str) -> Self {
        let layout = dump.layout();
        let grids = layout.has_grid().then(|| {
            layout
                .grids()
                .iter()
                .map(|g| GridSpec {
                    rows: g.rows,
                    cols: g.cols,
                    patch_px: g.patch_px,
                })
                .collect()
        });
        Self {
            version: FORMAT_VERSION,
            kind: match dump.kind() {
                DumpKind::QtSlice => ManifestKind::QtSlice,
                DumpKind::PerStep => ManifestKind::PerStep,
            },
            layers: dump.layers(),
            heads: dump.heads(),
            tokens: layout.total_tokens(),
            steps: (dump.kind() == DumpKind::PerStep).then_some(dump.steps()),
            visual_spans: layout.visual_spans().iter().map(|s| [s.start, s.end]).collect(),
            grids,
            question_end_index: layout.question_end_index(),
            dtype: "f32".into(),
            byte_order: "little".into(),
            payload_file: payload_file.into(),
            payload_offset_bytes: 0,
            capture: None,
        }
    }

    pub fn layout(&self) -> AppResult<TokenLayout> {
        let spans = self.visual_spans.iter().map(|s| Span::new(s[0], s[1])).collect();
        let grids = self
            .grids
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|g| Grid {
                rows: g.rows,
                cols: g.cols,
                patch_px: g.patch_px,
            })
            .collect();
        for s in &self.visual_spans {
            if s[0] > s[1] {
                return Err(AppError::validation(format!("visual span [{}, {}) is reversed", s[0], s[1])));
            }
        }
        Ok(TokenLayout::new(self.tokens, spans, self.question_end_index, grids)?)
    }

    pub fn shape(&self) -> AppResult<DumpShape> {
        match (self.kind, self.steps) {
            (ManifestKind::QtSlice, None | Some(1)) => Ok(DumpShape::qt_slice(self.layers, self.heads)),
            (ManifestKind::QtSlice, Some(s)) => Err(AppError::validation(format!("qt-slice manifest with {s} steps"))),
            (ManifestKind::PerStep, Some(s)) => Ok(DumpShape::per_step(s, self.layers, self.heads)),
            (ManifestKind::PerStep, None) => Err(AppError::validation("per-step manifest without steps")),
        }
    }

    fn check_encoding(&self, dtype: &str) -> AppResult<()> {
        if self.version != FORMAT_VERSION {
            return Err(AppError::validation(format!("unsupported manifest version {}", self.version)));
        }
        if self.dtype != dtype {
            return Err(AppError::validation(format!("dtype {:?}, expected {dtype:?}", self.dtype)));
        }
        if self.byte_order != "little" {
            return Err(AppError::validation(format!("byte order {:?}, expected \"little\"", self.byte_order)));
        }
        Ok(())
    }
}

fn payload_path(manifest_path: &Path, payload_file: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(payload_file)
}

/// Payload file name used next to `manifest_path`: the manifest's stem with
/// a `.bin` extension.
pub fn default_payload_name(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("payload");
    format!("{stem}.bin")
}

/// Reads `count` little-endian values of `width` bytes starting at `offset`.
fn read_payload(manifest_path: &Path, file: &str, offset: u64, count: usize, width: usize) -> AppResult<Vec<u8>> {
    let path = payload_path(manifest_path, file);
    let bytes = read(&path)?;
    let start = usize::try_from(offset).map_err(|_| AppError::validation("payload offset too large"))?;
    let want = count
        .checked_mul(width)
        .ok_or_else(|| AppError::validation("payload size overflows"))?;
    let have = bytes.len().saturating_sub(start);
    if have < want {
        return Err(AppError::validation(format!(
            "truncated payload {}: {have} bytes after offset {start}, expected {want}",
            path.display()
        )));
    }
    if have > want {
        return Err(AppError::validation(format!(
            "payload {} has {} trailing bytes",
            path.display(),
            have - want
        )));
    }
    Ok(bytes[start..].to_vec())
}

pub fn read_dump_manifest(path: &Path) -> AppResult<DumpManifest> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::validation(format!("malformed dump manifest {}: {e}", path.display())))
}

/// Loads and validates a dump.
pub fn load_dump(manifest_path: &Path, check: RowCheck) -> AppResult<(AttentionDump, Vec<RowSumWarning>)> {
    let m = read_dump_manifest(manifest_path)?;
    m.check_encoding("f32")?;
    let layout = m.layout()?;
    let shape = m.shape()?;
    let count = shape.rows() * layout.total_tokens();
    let bytes = read_payload(manifest_path, &m.payload_file, m.payload_offset_bytes, count, 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(AttentionDump::new(shape, layout, data, check)?)
}

/// Writes the payload, then the manifest, each atomically. Returns the
/// manifest that was written.
pub fn save_dump(manifest_path: &Path, dump: &AttentionDump) -> AppResult<DumpManifest> {
    let name = default_payload_name(manifest_path);
    let payload: Vec<u8> = dump.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&payload_path(manifest_path, &name), &payload)?;
    let m = DumpManifest::describe(dump, &name);
    write_atomic(manifest_path, &crate::fsutil::to_json_bytes(&m)?)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl From<Optimizer> for OptimizerSpec {
    fn from(o: Optimizer) -> Self {
        match o {
            Optimizer::Sgd { momentum } => OptimizerSpec::Sgd { momentum },
            Optimizer::Adam { beta1, beta2, eps } => OptimizerSpec::Adam { beta1, beta2, eps },
        }
    }
}

impl From<OptimizerSpec> for Optimizer {
    fn from(o: OptimizerSpec) -> Self {
        match o {
            OptimizerSpec::Sgd { momentum } => Optimizer::Sgd { momentum },
            OptimizerSpec::Adam { beta1, beta2, eps } => Optimizer::Adam { beta1, beta2, eps },
        }
    }
}

/// Serializable mirror of [`ToyConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfigSpec {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub symbols: usize,
    pub question_len: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerSpec,
    pub pos_init: f64,
    pub seed: u64,
}

impl From<ToyConfig> for ToyConfigSpec {
    fn from(c: ToyConfig) -> Self {
        Self {
            d_model: c.d_model,
            layers: c.layers,
            heads: c.heads,
            d_ff: c.d_ff,
            grid_rows: c.grid_rows,
            grid_cols: c.grid_cols,
            symbols: c.symbols,
            question_len: c.question_len,
            learning_rate: c.learning_rate,
            steps: c.steps,
            batch: c.batch,
            optimizer: c.optimizer.into(),
            pos_init: c.pos_init,
            seed: c.seed,
        }
    }
}

impl From<ToyConfigSpec> for ToyConfig {
    fn from(c: ToyConfigSpec) -> Self {
        Self {
            d_model: c.d_model,
            layers: c.layers,
            heads: c.heads,
            d_ff: c.d_ff,
            grid_rows: c.grid_rows,
            grid_cols: c.grid_cols,
            symbols: c.symbols,
            question_len: c.question_len,
            learning_rate: c.learning_rate,
            steps: c.steps,
            batch: c.batch,
            optimizer: c.optimizer.into(),
            pos_init: c.pos_init,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub kind: String,
    pub config: ToyConfigSpec,
    pub tensors: Vec<TensorEntry>,
    pub dtype: String,
    pub byte_order: String,
    pub payload_file: String,
    #[serde(default)]
    pub payload_offset_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

impl CheckpointManifest {
    fn check(&self) -> AppResult<()> {
        if self.version != FORMAT_VERSION {
            return Err(AppError::validation(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.kind != CHECKPOINT_KIND {
            return Err(AppError::validation(format!("checkpoint kind {:?}", self.kind)));
        }
        if self.dtype != "f64" || self.byte_order != "little" {
            return Err(AppError::validation("checkpoint payload must be little-endian f64"));
        }
        Ok(())
    }
}

pub const CHECKPOINT_KIND: &str = "toy-checkpoint";

/// Writes a model checkpoint; `run` is embedded as the run manifest.
pub fn save_checkpoint(manifest_path: &Path, model: &ToyModel, run: Option<serde_json::Value>) -> AppResult<()> {
    let name = default_payload_name(manifest_path);
    let payload: Vec<u8> = model.params().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&payload_path(manifest_path, &name), &payload)?;
    let m = CheckpointManifest {
        version: FORMAT_VERSION,
        kind: CHECKPOINT_KIND.into(),
        config: (*model.config()).into(),
        tensors: model
            .param_layout()
            .tensors()
            .iter()
            .map(|(n, r)| TensorEntry {
                name: n.clone(),
                offset: r.start,
                len: r.len(),
            })
            .collect(),
        dtype: "f64".into(),
        byte_order: "little".into(),
        payload_file: name,
        payload_offset_bytes: 0,
        manifest: run,
    };
    write_atomic(manifest_path, &crate::fsutil::to_json_bytes(&m)?)
}

pub fn load_checkpoint(manifest_path: &Path) -> AppResult<ToyModel> {
    let bytes = read(manifest_path)?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes)
        .map_err(|e| AppError::validation(format!("malformed checkpoint {}: {e}", manifest_path.display())))?;
    m.check()?;
    let cfg: ToyConfig = m.config.into();
    cfg.validate()?;
    let expected = vrga_core::toy::ParamLayout::new(&cfg);
    let listed: Vec<(String, std::ops::Range<usize>)> =
        m.tensors.iter().map(|t| (t.name.clone(), t.offset..t.offset + t.len)).collect();
    if listed.as_slice() != expected.tensors() {
        return Err(AppError::validation("checkpoint tensor table does not match its config"));
    }
    let payload = read_payload(manifest_path, &m.payload_file, m.payload_offset_bytes, expected.total(), 8)?;
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ToyModel::from_params(&cfg, params)?)
}
