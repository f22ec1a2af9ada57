//! On-disk formats: feature banks, label sidecars, checkpoints and CSV
//! reports.
//!
//! A feature bank file is a little-endian binary blob:
//!
//! ```text
//! "CMRE" | version u16 | count u32 | dim u32 | count * dim f32, row-major
//! ```
//!
//! Its labels live next to it in `<path>.labels.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::enhancement::{BatchStats, BnWeightMode};
use crate::error::{Error, Result};
use crate::evalkit::{EmbeddingBank, Metrics};
use crate::losses::LossTerm;
use crate::numerics::FeatureMap;
use crate::toytrain::{ModelShape, Params, SynthDataset, SynthSample, ToyModel, TrainLog};
use crate::Modality;

pub const MAGIC: &[u8; 4] = b"CMRE";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

pub fn encode_bank(vectors: &Array2<f64>) -> Result<Vec<u8>> {
    let (n, d) = vectors.dim();
    let too_big = |what: &str| Error::InvalidInput(format!("{what} does not fit in 32 bits"));
    let n32 = u32::try_from(n).map_err(|_| too_big("row count"))?;
    let d32 = u32::try_from(d).map_err(|_| too_big("dimension"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &v in vectors.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected CMRE".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (n, d) = (word(6), word(10));
    let payload = &bytes[HEADER_LEN..];
    let expected = n.checked_mul(d).and_then(|x| x.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Format(format!("payload is {} bytes, header says {n} x {d} floats", payload.len())));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((n, d), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_bank(path: &Path, vectors: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_bank(vectors)?)?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<Array2<f64>> {
    decode_bank(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: usize,
    pub modality: Modality,
    pub camera: u32,
}

pub fn sidecar_path(bank: &Path) -> PathBuf {
    let mut name = bank.as_os_str().to_owned();
    name.push(".labels.json");
    PathBuf::from(name)
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(labels)? + "\n")?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes a bank file and its label sidecar.
pub fn save_embedding_bank(path: &Path, bank: &EmbeddingBank) -> Result<()> {
    let labels: Vec<LabelRecord> = (0..bank.len())
        .map(|i| LabelRecord { id: bank.identity[i], modality: bank.modality[i], camera: bank.camera[i] })
        .collect();
    write_bank(path, &bank.vectors)?;
    write_labels(&sidecar_path(path), &labels)
}

pub fn load_embedding_bank(path: &Path) -> Result<EmbeddingBank> {
    let vectors = read_bank(path)?;
    let labels = read_labels(&sidecar_path(path))?;
    if labels.len() != vectors.nrows() {
        return Err(Error::Format(format!(
            "{} has {} rows but its sidecar lists {} labels",
            path.display(),
            vectors.nrows(),
            labels.len()
        )));
    }
    EmbeddingBank::new(
        vectors,
        labels.iter().map(|l| l.id).collect(),
        labels.iter().map(|l| l.modality).collect(),
        labels.iter().map(|l| l.camera).collect(),
    )
}

pub const DATASET_CFG: &str = "dataset.cfg";

pub fn bank_file(dir: &Path, modality: Modality) -> PathBuf {
    dir.join(format!("{}.cmre", modality.name()))
}

/// Writes one bank per modality (rows are flattened `C x H x W` images) and
/// a `dataset.cfg` holding the image shape.
pub fn save_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (c, h, w) = data.shape;
    for m in [Modality::Visible, Modality::Thermal] {
        let part = data.of_modality(m);
        let mut rows = Array2::zeros((part.len(), c * h * w));
        for (i, s) in part.samples.iter().enumerate() {
            rows.row_mut(i).assign(&Array1::from_iter(s.image.data().iter().copied()));
        }
        let labels: Vec<LabelRecord> =
            part.samples.iter().map(|s| LabelRecord { id: s.identity, modality: m, camera: s.camera }).collect();
        let path = bank_file(dir, m);
        write_bank(&path, &rows)?;
        write_labels(&sidecar_path(&path), &labels)?;
    }
    fs::write(dir.join(DATASET_CFG), format!("channels = {c}\nheight = {h}\nwidth = {w}\n"))?;
    Ok(())
}

fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    let cfg = parse_key_values(&fs::read_to_string(dir.join(DATASET_CFG))?)?;
    let dim = |k: &str| -> Result<usize> {
        cfg.get(k)
            .ok_or_else(|| Error::Config(format!("{DATASET_CFG} lacks {k}")))?
            .parse()
            .map_err(|e| Error::Config(format!("{k}: {e}")))
    };
    let shape = (dim("channels")?, dim("height")?, dim("width")?);
    let mut samples = Vec::new();
    for m in [Modality::Visible, Modality::Thermal] {
        let bank = load_embedding_bank(&bank_file(dir, m))?;
        for (i, row) in bank.vectors.rows().into_iter().enumerate() {
            let image = FeatureMap::from_vec(shape.0, shape.1, shape.2, row.to_vec())?;
            if bank.modality[i] != m {
                return Err(Error::Format(format!("{} row {i} is labelled {:?}", m.name(), bank.modality[i])));
            }
            samples.push(SynthSample { image, identity: bank.identity[i], modality: m, camera: bank.camera[i] });
        }
    }
    samples.sort_by_key(|s| (s.identity, s.modality));
    SynthDataset::new(shape, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub shape: ModelShape,
    pub bn_weight_mode: BnWeightMode,
    pub eps: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &ToyModel) -> Self {
        let tensors = model
            .params
            .slices()
            .into_iter()
            .map(|s| (s.name, TensorRecord { shape: s.shape, data: s.data.to_vec() }))
            .collect();
        Self {
            shape: model.shape,
            bn_weight_mode: model.bn_mode,
            eps: model.eps,
            running_mean: model.running.mean.to_vec(),
            running_var: model.running.var.to_vec(),
            tensors,
        }
    }

    pub fn into_model(self) -> Result<ToyModel> {
        self.shape.validate()?;
        let mut params = Params::zeros(&self.shape);
        let expected: Vec<(String, Vec<usize>)> = params.slices().into_iter().map(|s| (s.name, s.shape)).collect();
        if self.tensors.len() != expected.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, model needs {}", self.tensors.len(), expected.len())));
        }
        for (slot, (name, shape)) in params.slices_mut().into_iter().zip(expected) {
            let t = self.tensors.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if t.shape != shape || t.data.len() != slot.data.len() {
                return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            slot.data.copy_from_slice(&t.data);
        }
        let c = self.shape.embed_dim;
        if self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Format("running statistics do not match embed_dim".into()));
        }
        let running = BatchStats::new(Array1::from(self.running_mean), Array1::from(self.running_var))?;
        Ok(ToyModel { shape: self.shape, params, running, bn_mode: self.bn_weight_mode, eps: self.eps })
    }
}

pub fn save_checkpoint(path: &Path, model: &ToyModel) -> Result<()> {
    fs::write(path, serde_json::to_string(&Checkpoint::from_model(model))? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    ckpt.into_model()
}

pub fn loss_log_header() -> String {
    let mut cols = vec!["step"];
    cols.extend(LossTerm::ALL.iter().map(|t| t.name()));
    cols.extend(["total", "lr"]);
    cols.join(",")
}

pub fn write_loss_log<W: Write>(mut out: W, log: &TrainLog) -> Result<()> {
    writeln!(out, "{}", loss_log_header())?;
    for r in &log.steps {
        write!(out, "{}", r.step)?;
        for v in r.report.components() {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{},{}", r.report.total, r.lr)?;
    }
    Ok(())
}

/// One row of an evaluation or ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub mean: Metrics,
    pub std: Metrics,
}

pub fn write_metrics_csv<W: Write>(mut out: W, key: &str, rows: &[TableRow]) -> Result<()> {
    write!(out, "{key}")?;
    for name in Metrics::NAMES {
        write!(out, ",{name},{name}_std")?;
    }
    writeln!(out)?;
    for row in rows {
        write!(out, "{}", row.label)?;
        for (m, s) in row.mean.values().iter().zip(row.std.values()) {
            write!(out, ",{m:.6},{s:.6}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Fixed-width text table with values in percent.
pub fn format_metrics_table(key: &str, rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).chain([key.len()]).max().unwrap_or(0);
    let mut out = format!("{key:<width$}");
    for name in Metrics::NAMES {
        out.push_str(&format!("  {name:>15}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<width$}", row.label));
        for (m, s) in row.mean.values().iter().zip(row.std.values()) {
            let cell = format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
            out.push_str(&format!("  {cell:>15}"));
        }
        out.push('\n');
    }
    out
}

/// Flattens a `n x parts x dim` stripe tensor to `n x (parts * dim)` rows.
pub fn flatten_stripes(stripes: &Array3<f64>) -> Array2<f64> {
    let (n, p, d) = stripes.dim();
    stripes.as_standard_layout().into_owned().into_shape_with_order((n, p * d)).expect("contiguous")
}
