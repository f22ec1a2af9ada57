use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use cmreid::evalkit::{
    cross_modal_split, pairwise_distances_with, pipeline_distances, protocol_run, DistanceMode, EmbeddingBank,
    EvalOptions, Pipeline, Splitter,
};
use cmreid::formats::{
    bank_file, flatten_stripes, format_metrics_table, load_checkpoint, load_dataset, load_embedding_bank,
    save_checkpoint, save_dataset, save_embedding_bank, write_loss_log, write_metrics_csv, TableRow,
};
use cmreid::rerank::EcnConfig;
use cmreid::toytrain::{init_model, synth_dataset, SynthDataset, ToyModel, TrainConfig};
use cmreid::Modality;
use ndarray::Array2;

use crate::{AblateArgs, AlignArgs, DistanceArgs, EmbedArgs, EvalArgs, RerankArgs, SynthArgs, TrainArgs};

/// Bad flag values; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Feature {
    Global,
    Enhanced,
}

const HOLDOUT_DIR: &str = "holdout";

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.ids < 2 {
        return Err(usage(format!("--ids must be at least 2, got {}", a.ids)));
    }
    if a.per_id < 2 {
        return Err(usage(format!("--per-id must be at least 2, got {}", a.per_id)));
    }
    let all = synth_dataset(a.ids + a.holdout_ids, a.per_id, a.seed)?;
    let (train, holdout) = all.split_identities(a.ids);
    save_dataset(&a.out, &train).with_context(|| format!("writing {}", a.out.display()))?;
    if a.holdout_ids > 0 {
        save_dataset(&a.out.join(HOLDOUT_DIR), &holdout)?;
    }
    println!(
        "wrote {} visible and {} thermal samples of {} identities to {}",
        train.of_modality(Modality::Visible).len(),
        train.of_modality(Modality::Thermal).len(),
        a.ids,
        a.out.display()
    );
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn open_out(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let model = init_model(&data, &cfg)?;
    let (model, log) = cmreid::toytrain::train(model, &data, &cfg)?;
    save_checkpoint(&a.out_model, &model)?;
    if let Some(path) = &a.log {
        let mut out = open_out(path)?;
        write_loss_log(&mut out, &log)?;
        out.flush()?;
    }
    let means = log.epoch_means();
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        println!("{} steps, mean loss {first:.4} (first epoch) -> {last:.4} (last epoch)", log.steps.len());
    }
    Ok(())
}

/// Global and flattened stripe banks for every sample of `data`.
fn embed_banks(model: &ToyModel, data: &SynthDataset, feature: Feature) -> Result<(EmbeddingBank, EmbeddingBank)> {
    let images: Vec<_> = data.samples.iter().map(|s| &s.image).collect();
    let modality: Vec<_> = data.samples.iter().map(|s| s.modality).collect();
    let out = model.embed(&images, &modality)?;
    let identity: Vec<usize> = data.samples.iter().map(|s| s.identity).collect();
    let camera: Vec<u32> = data.samples.iter().map(|s| s.camera).collect();
    let global = match feature {
        Feature::Global => out.global,
        Feature::Enhanced => out.enhanced,
    };
    Ok((
        EmbeddingBank::new(global, identity.clone(), modality.clone(), camera.clone())?,
        EmbeddingBank::new(flatten_stripes(&out.stripes), identity, modality, camera)?,
    ))
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let model = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let (global, stripes) = embed_banks(&model, &data, a.feature)?;
    fs::create_dir_all(&a.out)?;
    for m in [Modality::Visible, Modality::Thermal] {
        save_embedding_bank(&bank_file(&a.out, m), &global.select(&global.rows_of(m)))?;
        let path = a.out.join(format!("{}.stripes.cmre", m.name()));
        save_embedding_bank(&path, &stripes.select(&stripes.rows_of(m)))?;
    }
    println!(
        "wrote {} embeddings (dim {}, {} stripes of dim {}) to {}",
        global.len(),
        global.dim(),
        model.shape.parts,
        model.shape.local_dim,
        a.out.display()
    );
    Ok(())
}

fn load_bank(path: &Path) -> Result<EmbeddingBank> {
    load_embedding_bank(path).with_context(|| format!("loading {}", path.display()))
}

fn write_matrix<W: Write>(mut out: W, m: &Array2<f64>) -> Result<()> {
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn emit_matrix(path: Option<&Path>, m: &Array2<f64>) -> Result<()> {
    match path {
        Some(p) => write_matrix(open_out(p)?, m),
        None => write_matrix(io::stdout().lock(), m),
    }
}

fn check_parts(bank: &EmbeddingBank, parts: usize) -> Result<()> {
    if parts == 0 || bank.dim() % parts != 0 {
        return Err(usage(format!("--parts {parts} does not divide the bank dimension {}", bank.dim())));
    }
    Ok(())
}

pub fn align(a: &AlignArgs) -> Result<()> {
    let query = load_bank(&a.query)?;
    let gallery = load_bank(&a.gallery)?;
    check_parts(&query, a.parts)?;
    let d = pairwise_distances_with(&query, &gallery, DistanceMode::Aligned { parts: a.parts })?;
    emit_matrix(a.out.as_deref(), &d)
}

fn pipeline_for(d: &DistanceArgs, query: &EmbeddingBank, rerank: bool) -> Result<Pipeline> {
    let distance = if d.use_align {
        check_parts(query, d.parts)?;
        DistanceMode::Aligned { parts: d.parts }
    } else {
        DistanceMode::Euclidean
    };
    let rerank = if rerank {
        if d.top_t == 0 {
            return Err(usage("--top-t must be at least 1"));
        }
        Some(EcnConfig { top_t: d.top_t, expand_q: d.expand_q })
    } else {
        None
    };
    Ok(Pipeline { distance, rerank, options: EvalOptions::default() })
}

fn setting_label(p: &Pipeline) -> String {
    let mut label = match p.distance {
        DistanceMode::Euclidean => "euclidean".to_string(),
        DistanceMode::Aligned { parts } => format!("aligned-p{parts}"),
    };
    if let Some(cfg) = p.rerank {
        label.push_str(&format!("+ecn(t{}/q{})", cfg.top_t, cfg.expand_q));
    }
    label
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let query = load_bank(&a.dist.query)?;
    let gallery = load_bank(&a.dist.gallery)?;
    let mut pipeline = pipeline_for(&a.dist, &query, a.rerank)?;
    pipeline.options.camera_filter = a.camera_filter;
    let splitter = Splitter { query_shots: a.query_shots, gallery_shots: a.gallery_shots };
    let result = protocol_run(&query, &gallery, &splitter, &pipeline, a.repeats, a.seed)?;
    let rows = vec![TableRow { label: setting_label(&pipeline), mean: result.mean, std: result.std }];
    print!("{}", format_metrics_table("setting", &rows));
    if let Some(path) = &a.csv {
        let mut out = open_out(path)?;
        write_metrics_csv(&mut out, "setting", &rows)?;
        out.flush()?;
    }
    Ok(())
}

pub fn rerank(a: &RerankArgs) -> Result<()> {
    let query = load_bank(&a.dist.query)?;
    let gallery = load_bank(&a.dist.gallery)?;
    let pipeline = pipeline_for(&a.dist, &query, true)?;
    let d = pipeline_distances(&query, &gallery, &pipeline)?;
    emit_matrix(a.out.as_deref(), &d)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sweep {
    Parts(Vec<usize>),
    Dim(Vec<usize>),
}

fn parse_list(text: &str) -> Option<Vec<usize>> {
    if let Some((lo, hi)) = text.split_once("..") {
        let (lo, hi): (usize, usize) = (lo.trim().parse().ok()?, hi.trim().parse().ok()?);
        return (lo <= hi).then(|| (lo..=hi).collect());
    }
    text.split(',').map(|v| v.trim().parse().ok()).collect()
}

pub fn parse_sweep(text: &str) -> Result<Sweep> {
    let bad = || usage(format!("--sweep expects parts=LO..HI, parts=A,B,.. or dim=A,B,.., got {text:?}"));
    let (key, values) = text.split_once('=').ok_or_else(bad)?;
    let values = parse_list(values).filter(|v| !v.is_empty() && !v.contains(&0)).ok_or_else(bad)?;
    match key.trim() {
        "parts" => Ok(Sweep::Parts(values)),
        "dim" => Ok(Sweep::Dim(values)),
        _ => Err(bad()),
    }
}

/// Trains one model per grid value and scores held-out thermal queries
/// against the visible gallery.
pub fn ablate(a: &AblateArgs) -> Result<()> {
    let sweep = parse_sweep(&a.sweep)?;
    let mut base = read_config(a.config.as_deref())?;
    base.seed = a.seed;
    if let Some(epochs) = a.epochs {
        base.epochs = epochs;
    }
    let (train_set, test_set) = match &a.data {
        Some(dir) => (load_dataset(dir)?, load_dataset(&dir.join(HOLDOUT_DIR))?),
        None => {
            if a.ids < 2 || a.holdout_ids < 1 {
                return Err(usage("--ids must be at least 2 and --holdout-ids at least 1"));
            }
            synth_dataset(a.ids + a.holdout_ids, a.per_id, a.seed)?.split_identities(a.ids)
        }
    };
    let (key, grid) = match &sweep {
        Sweep::Parts(v) => ("parts", v.clone()),
        Sweep::Dim(v) => ("dim", v.clone()),
    };
    let height = train_set.shape.1;
    if let Sweep::Parts(v) = &sweep {
        if let Some(p) = v.iter().find(|&&p| p > height) {
            return Err(usage(format!("parts {p} exceeds the image height {height}")));
        }
    }
    let mut rows = Vec::new();
    for value in grid {
        let mut cfg = base.clone();
        match sweep {
            Sweep::Parts(_) => cfg.parts = value,
            Sweep::Dim(_) => {
                cfg.parts = 2;
                cfg.embed_dim = value;
            }
        }
        let model = init_model(&train_set, &cfg)?;
        let (model, _) = cmreid::toytrain::train(model, &train_set, &cfg)?;
        let (global, _) = embed_banks(&model, &test_set, Feature::Enhanced)?;
        let (query, gallery) = cross_modal_split(&global, Modality::Thermal);
        let r = protocol_run(&query, &gallery, &Splitter::default(), &Pipeline::default(), 1, a.seed)?;
        rows.push(TableRow { label: value.to_string(), mean: r.mean, std: r.std });
    }
    print!("{}", format_metrics_table(key, &rows));
    if let Some(path) = &a.csv {
        let mut out = open_out(path)?;
        write_metrics_csv(&mut out, key, &rows)?;
        out.flush()?;
    }
    Ok(())
}
