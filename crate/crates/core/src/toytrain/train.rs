//! Training configuration, step schedule and the SGD loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{PkSampler, SynthDataset};
use super::model::{labeled_batch, Mode, ModelShape, ParamGroup, Params, ToyModel};
use crate::enhancement::{BnWeightMode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::losses::{loss_and_backward, LossConfig, LossReport, SumFrom, DEFAULT_MARGIN};
use crate::numerics::FeatureMap;
use crate::Modality;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub p: usize,
    pub k: usize,
    pub parts: usize,
    pub local_dim: usize,
    pub embed_dim: usize,
    pub stream_channels: usize,
    pub fusion_hidden: usize,
    pub m_g: f64,
    pub m_l: f64,
    pub eps: f64,
    pub bn_momentum: f64,
    pub bn_weight_mode: BnWeightMode,
    pub sum_from: SumFrom,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 4,
            k: 2,
            parts: 3,
            local_dim: 32,
            embed_dim: 64,
            stream_channels: 32,
            fusion_hidden: 64,
            m_g: DEFAULT_MARGIN,
            m_l: DEFAULT_MARGIN,
            eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_weight_mode: BnWeightMode::Abs,
            sum_from: SumFrom::First,
            lr_backbone: 0.01,
            lr_head: 0.1,
            lr_decay_every: 10,
            lr_decay_factor: 10.0,
            momentum: 0.0,
            epochs: 30,
            seed: 0,
        }
    }
}

const KEYS: [&str; 20] = [
    "p",
    "k",
    "parts",
    "local_dim",
    "embed_dim",
    "stream_channels",
    "fusion_hidden",
    "m_g",
    "m_l",
    "eps",
    "bn_momentum",
    "bn_weight_mode",
    "sum_from",
    "lr_backbone",
    "lr_head",
    "lr_decay_every",
    "lr_decay_factor",
    "momentum",
    "epochs",
    "seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.p < 2 {
            return bad("p must be at least 2");
        }
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.parts == 0 || self.local_dim == 0 || self.embed_dim == 0 {
            return bad("parts, local_dim and embed_dim must be positive");
        }
        if self.stream_channels == 0 || self.fusion_hidden == 0 {
            return bad("layer widths must be positive");
        }
        // lr = 0 is accepted so a frozen run can be checked
        if !(self.lr_backbone >= 0.0 && self.lr_head >= 0.0 && self.lr_backbone.is_finite() && self.lr_head.is_finite())
        {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.lr_decay_factor > 1.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be greater than 1");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(self.m_g >= 0.0 && self.m_l >= 0.0) {
            return bad("margins must be non-negative");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(0.0..1.0).contains(&self.momentum) {
            return bad("bn_momentum must lie in [0, 1] and momentum in [0, 1)");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { m_g: self.m_g, m_l: self.m_l, sum_from: self.sum_from }
    }

    /// Sets one field from its key=value spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "p" => self.p = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "parts" => self.parts = parse_value(key, v)?,
            "local_dim" => self.local_dim = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "stream_channels" => self.stream_channels = parse_value(key, v)?,
            "fusion_hidden" => self.fusion_hidden = parse_value(key, v)?,
            "m_g" => self.m_g = parse_value(key, v)?,
            "m_l" => self.m_l = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, v)?,
            "bn_weight_mode" => self.bn_weight_mode = parse_value(key, v)?,
            "sum_from" => self.sum_from = parse_value(key, v)?,
            "lr_backbone" => self.lr_backbone = parse_value(key, v)?,
            "lr_head" => self.lr_head = parse_value(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored,
    /// missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let values: BTreeMap<&str, String> = [
            ("p", self.p.to_string()),
            ("k", self.k.to_string()),
            ("parts", self.parts.to_string()),
            ("local_dim", self.local_dim.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("stream_channels", self.stream_channels.to_string()),
            ("fusion_hidden", self.fusion_hidden.to_string()),
            ("m_g", self.m_g.to_string()),
            ("m_l", self.m_l.to_string()),
            ("eps", self.eps.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("bn_weight_mode", self.bn_weight_mode.to_string()),
            ("sum_from", self.sum_from.to_string()),
            ("lr_backbone", self.lr_backbone.to_string()),
            ("lr_head", self.lr_head.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("momentum", self.momentum.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .collect();
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", values[key]);
        }
        out
    }
}

/// `(lr_backbone, lr_head)` for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let steps = (epoch / cfg.lr_decay_every.max(1)) as i32;
    let scale = cfg.lr_decay_factor.powi(-steps);
    (cfg.lr_backbone * scale, cfg.lr_head * scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
    /// Backbone learning rate in effect; the head rate keeps a fixed ratio.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean total loss of every epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.steps {
            let e = sums.entry(r.epoch).or_default();
            e.0 += r.report.total;
            e.1 += 1;
        }
        sums.values().map(|(s, c)| s / *c as f64).collect()
    }
}

/// Maps dataset identities to contiguous class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    ids: Vec<usize>,
}

impl ClassMap {
    pub fn new(dataset: &SynthDataset) -> Self {
        Self { ids: dataset.identities() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_of(&self, identity: usize) -> Result<usize> {
        self.ids
            .binary_search(&identity)
            .map_err(|_| Error::LabelOutOfRange { label: identity, classes: self.ids.len() })
    }
}

/// Derives an independent random stream from the run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const INIT_STREAM: u64 = 0;
pub const SAMPLER_STREAM: u64 = 1;

/// A freshly initialised model sized for `dataset` and `cfg`.
pub fn init_model(dataset: &SynthDataset, cfg: &TrainConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let (c, h, w) = dataset.shape;
    let shape = ModelShape {
        in_channels: c,
        height: h,
        width: w,
        stream_channels: cfg.stream_channels,
        fusion_hidden: cfg.fusion_hidden,
        embed_dim: cfg.embed_dim,
        local_dim: cfg.local_dim,
        parts: cfg.parts,
        classes: dataset.identities().len(),
    };
    ToyModel::new(shape, cfg.bn_weight_mode, cfg.eps, &mut rng_stream(cfg.seed, INIT_STREAM))
}

/// One SGD update, `velocity = momentum * velocity + grad`, `w -= lr * velocity`.
fn sgd_step(params: &mut Params, velocity: &mut Params, grads: &Params, lr: (f64, f64), momentum: f64) {
    let grads = grads.slices();
    for ((w, v), g) in params.slices_mut().into_iter().zip(velocity.slices_mut()).zip(grads) {
        let rate = match w.group {
            ParamGroup::Backbone => lr.0,
            ParamGroup::Head => lr.1,
        };
        for ((wi, vi), gi) in w.data.iter_mut().zip(v.data.iter_mut()).zip(g.data) {
            *vi = momentum * *vi + gi;
            *wi -= rate * *vi;
        }
    }
}

/// Runs `cfg.epochs` epochs of PK batches. Each epoch has
/// `ceil(len / 2PK)` steps.
pub fn train(mut model: ToyModel, dataset: &SynthDataset, cfg: &TrainConfig) -> Result<(ToyModel, TrainLog)> {
    cfg.validate()?;
    if dataset.shape != (model.shape.in_channels, model.shape.height, model.shape.width) {
        return Err(Error::ShapeMismatch("dataset and model image shapes differ".into()));
    }
    let classes = ClassMap::new(dataset);
    if classes.len() != model.shape.classes {
        return Err(Error::ShapeMismatch(format!(
            "model has {} classes, dataset has {} identities",
            model.shape.classes,
            classes.len()
        )));
    }
    let sampler = PkSampler::new(&dataset.samples);
    let mut rng = rng_stream(cfg.seed, SAMPLER_STREAM);
    let loss_cfg = cfg.loss_config();
    let batch = 2 * cfg.p * cfg.k;
    let steps_per_epoch = dataset.len().div_ceil(batch).max(1);
    let pixels = model.shape.pixels();
    let mut velocity = Params::zeros(&model.shape);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for _ in 0..steps_per_epoch {
            let picks = sampler.sample(cfg.p, cfg.k, &mut rng)?;
            let images: Vec<&FeatureMap> = picks.iter().map(|&i| &dataset.samples[i].image).collect();
            let modality: Vec<Modality> = picks.iter().map(|&i| dataset.samples[i].modality).collect();
            let labels = picks
                .iter()
                .map(|&i| classes.class_of(dataset.samples[i].identity))
                .collect::<Result<Vec<_>>>()?;
            let cache = model.forward(&images, &modality, Mode::Train)?;
            let (report, grads) = loss_and_backward(&labeled_batch(&cache, &labels), &loss_cfg)?;
            let param_grads = model.backward(&cache, &grads)?;
            model.running.update_running(cache.stats(), picks.len() * pixels, cfg.bn_momentum);
            sgd_step(&mut model.params, &mut velocity, &param_grads, lr, cfg.momentum);
            log.steps.push(StepRecord { step: log.steps.len(), epoch, report, lr: lr.0 });
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytrain::data::synth_dataset;

    #[test]
    fn schedule_matches_step_decay() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), (0.01, 0.1));
        assert_eq!(lr_at(9, &cfg), (0.01, 0.1));
        let (b, h) = lr_at(10, &cfg);
        assert!((b - 0.001).abs() < 1e-15 && (h - 0.01).abs() < 1e-15);
        let (b, h) = lr_at(25, &cfg);
        assert!((b - 0.01 * 1e-2).abs() < 1e-15 && (h - 0.1 * 1e-2).abs() < 1e-15);
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.parts = 5;
        cfg.bn_weight_mode = BnWeightMode::Signed;
        cfg.sum_from = SumFrom::Second;
        cfg.lr_head = 0.25;
        cfg.seed = 77;
        let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_parse_handles_comments_and_defaults() {
        let cfg = TrainConfig::parse("# toy run\n\nepochs = 3  # short\nseed=4\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.p, TrainConfig::default().p);
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("p = x").is_err());
        assert!(TrainConfig::parse("p = 1").is_err());
        assert!(TrainConfig::parse("lr_decay_factor = 1").is_err());
        assert!(TrainConfig::parse("lr_head = -0.1").is_err());
        assert!(TrainConfig::parse("no equals sign").is_err());
    }

    fn tiny() -> (SynthDataset, TrainConfig) {
        let data = synth_dataset(3, 3, 5).unwrap();
        let cfg = TrainConfig {
            p: 2,
            k: 2,
            embed_dim: 8,
            local_dim: 4,
            stream_channels: 6,
            fusion_hidden: 8,
            epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        (data, cfg)
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (data, mut cfg) = tiny();
        cfg.lr_backbone = 0.0;
        cfg.lr_head = 0.0;
        let model = init_model(&data, &cfg).unwrap();
        let before = model.params.clone();
        let (after, log) = train(model, &data, &cfg).unwrap();
        assert_eq!(after.params, before);
        assert_eq!(log.steps.len(), 2 * 18usize.div_ceil(8));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (data, cfg) = tiny();
        let (a, la) = train(init_model(&data, &cfg).unwrap(), &data, &cfg).unwrap();
        let (b, lb) = train(init_model(&data, &cfg).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn log_records_schedule_and_components() {
        let (data, mut cfg) = tiny();
        cfg.epochs = 3;
        cfg.lr_decay_every = 2;
        let (_, log) = train(init_model(&data, &cfg).unwrap(), &data, &cfg).unwrap();
        for r in &log.steps {
            assert_eq!(r.lr, lr_at(r.epoch, &cfg).0);
            let sum: f64 = r.report.components().iter().sum();
            assert!((sum - r.report.total).abs() < 1e-9);
        }
        assert_eq!(log.epoch_means().len(), 3);
    }
}
