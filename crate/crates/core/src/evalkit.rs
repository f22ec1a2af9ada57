//! Retrieval metrics (CMC, mAP, mINP) and the repeated random split protocol.
//!
//! Every ranking sorts a query's distances ascending and breaks ties by
//! gallery index, so the metrics depend only on the ordering of each row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::pairwise_align;
use crate::error::{Error, Result};
use crate::numerics::StripeSet;
use crate::rerank::{ecn_rerank, EcnConfig};
use crate::Modality;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub vectors: Array2<f64>,
    pub identity: Vec<usize>,
    pub modality: Vec<Modality>,
    pub camera: Vec<u32>,
}

impl EmbeddingBank {
    pub fn new(vectors: Array2<f64>, identity: Vec<usize>, modality: Vec<Modality>, camera: Vec<u32>) -> Result<Self> {
        let n = vectors.nrows();
        for (name, len) in [("identity", identity.len()), ("modality", modality.len()), ("camera", camera.len())] {
            if len != n {
                return Err(Error::ShapeMismatch(format!("{n} vectors but {len} {name} labels")));
            }
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding bank holds non-finite values".into()));
        }
        Ok(Self { vectors, identity, modality, camera })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select(Axis(0), rows),
            identity: rows.iter().map(|&i| self.identity[i]).collect(),
            modality: rows.iter().map(|&i| self.modality[i]).collect(),
            camera: rows.iter().map(|&i| self.camera[i]).collect(),
        }
    }

    pub fn rows_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modality[i] == modality).collect()
    }

    /// Stacks two banks row-wise.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch(self.dim(), other.dim()));
        }
        let vectors = ndarray::concatenate(Axis(0), &[self.vectors.view(), other.vectors.view()])
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let join = |a: &[usize], b: &[usize]| a.iter().chain(b).copied().collect::<Vec<_>>();
        Ok(Self {
            vectors,
            identity: join(&self.identity, &other.identity),
            modality: self.modality.iter().chain(&other.modality).copied().collect(),
            camera: self.camera.iter().chain(&other.camera).copied().collect(),
        })
    }
}

/// How query/gallery distances are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceMode {
    #[default]
    Euclidean,
    /// Rows are flattened stripe sets of `parts` stripes compared by
    /// shortest-path alignment.
    Aligned { parts: usize },
}

pub fn pairwise_distances(query: &EmbeddingBank, gallery: &EmbeddingBank) -> Result<Array2<f64>> {
    euclidean(query.vectors.view(), gallery.vectors.view())
}

fn euclidean(q: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if q.ncols() != g.ncols() {
        return Err(Error::DimMismatch(q.ncols(), g.ncols()));
    }
    let qn: Array1<f64> = q.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gn: Array1<f64> = g.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = q.dot(&g.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (qn[i] + gn[j] - 2.0 * *v).max(0.0).sqrt();
    }
    // the expansion loses exactness for identical rows
    for (i, qr) in q.rows().into_iter().enumerate() {
        for (j, gr) in g.rows().into_iter().enumerate() {
            if qr == gr {
                d[[i, j]] = 0.0;
            }
        }
    }
    Ok(d)
}

pub fn stripe_sets(bank: &EmbeddingBank, parts: usize) -> Result<Vec<StripeSet>> {
    bank.vectors.rows().into_iter().map(|r| StripeSet::from_flat(&r.to_vec(), parts)).collect()
}

pub fn pairwise_distances_with(
    query: &EmbeddingBank,
    gallery: &EmbeddingBank,
    mode: DistanceMode,
) -> Result<Array2<f64>> {
    match mode {
        DistanceMode::Euclidean => pairwise_distances(query, gallery),
        DistanceMode::Aligned { parts } => {
            if query.dim() != gallery.dim() {
                return Err(Error::DimMismatch(query.dim(), gallery.dim()));
            }
            pairwise_align(&stripe_sets(query, parts)?, &stripe_sets(gallery, parts)?)
        }
    }
}

/// Gallery indices of one row in retrieval order.
pub fn ranking(row: ndarray::ArrayView1<'_, f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Per-query match flags in retrieval order, with ignored gallery items
/// removed.
fn match_flags(
    dist: ArrayView2<'_, f64>,
    q_ids: &[usize],
    g_ids: &[usize],
    ignore: &dyn Fn(usize, usize) -> bool,
) -> Result<Vec<Vec<bool>>> {
    let (nq, ng) = dist.dim();
    if q_ids.len() != nq || g_ids.len() != ng {
        return Err(Error::ShapeMismatch(format!(
            "distance matrix {nq}x{ng} with {} query and {} gallery labels",
            q_ids.len(),
            g_ids.len()
        )));
    }
    (0..nq)
        .map(|qi| {
            let flags: Vec<bool> = ranking(dist.row(qi))
                .into_iter()
                .filter(|&gi| !ignore(qi, gi))
                .map(|gi| g_ids[gi] == q_ids[qi])
                .collect();
            if flags.iter().any(|&m| m) {
                Ok(flags)
            } else {
                Err(Error::NoMatchForQuery(qi))
            }
        })
        .collect()
}

fn cmc_of(flags: &[Vec<bool>], len: usize) -> Vec<f64> {
    let mut hits = vec![0usize; len];
    for f in flags {
        let first = f.iter().position(|&m| m).expect("checked by match_flags");
        for h in &mut hits[first..] {
            *h += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / flags.len() as f64).collect()
}

fn average_precision(flags: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &m) in flags.iter().enumerate() {
        if m {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / found as f64
}

fn inverse_negative_penalty(flags: &[bool]) -> f64 {
    let total = flags.iter().filter(|&&m| m).count();
    let hardest = flags.iter().rposition(|&m| m).expect("checked by match_flags");
    total as f64 / (hardest + 1) as f64
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

const NO_IGNORE: &dyn Fn(usize, usize) -> bool = &|_, _| false;

/// `cmc[k - 1]` is the fraction of queries with a true match in the top `k`.
pub fn cmc(dist: ArrayView2<'_, f64>, q_ids: &[usize], g_ids: &[usize]) -> Result<Vec<f64>> {
    let flags = match_flags(dist, q_ids, g_ids, NO_IGNORE)?;
    Ok(cmc_of(&flags, dist.ncols()))
}

pub fn mean_average_precision(dist: ArrayView2<'_, f64>, q_ids: &[usize], g_ids: &[usize]) -> Result<f64> {
    let flags = match_flags(dist, q_ids, g_ids, NO_IGNORE)?;
    Ok(mean(flags.iter().map(|f| average_precision(f))))
}

pub fn mean_inverse_negative_penalty(dist: ArrayView2<'_, f64>, q_ids: &[usize], g_ids: &[usize]) -> Result<f64> {
    let flags = match_flags(dist, q_ids, g_ids, NO_IGNORE)?;
    Ok(mean(flags.iter().map(|f| inverse_negative_penalty(f))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingResult {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub minp: f64,
}

impl RankingResult {
    /// CMC at rank `k` (1-based); ranks beyond the gallery read the last value.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { rank1: self.rank(1), rank10: self.rank(10), rank20: self.rank(20), map: self.map, minp: self.minp }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Metrics {
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub minp: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["rank1", "rank10", "rank20", "mAP", "mINP"];

    pub fn values(&self) -> [f64; 5] {
        [self.rank1, self.rank10, self.rank20, self.map, self.minp]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self { rank1: v[0], rank10: v[1], rank20: v[2], map: v[3], minp: v[4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop gallery items sharing both identity and camera with the query.
    pub camera_filter: bool,
}

/// All three metrics for labelled banks.
pub fn evaluate(
    dist: ArrayView2<'_, f64>,
    query: &EmbeddingBank,
    gallery: &EmbeddingBank,
    opts: &EvalOptions,
) -> Result<RankingResult> {
    let ignore = |qi: usize, gi: usize| {
        opts.camera_filter && query.identity[qi] == gallery.identity[gi] && query.camera[qi] == gallery.camera[gi]
    };
    let flags = match_flags(dist, &query.identity, &gallery.identity, &ignore)?;
    Ok(RankingResult {
        cmc: cmc_of(&flags, dist.ncols()),
        map: mean(flags.iter().map(|f| average_precision(f))),
        minp: mean(flags.iter().map(|f| inverse_negative_penalty(f))),
    })
}

/// Distance stage followed by an optional re-ranking stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Pipeline {
    pub distance: DistanceMode,
    pub rerank: Option<EcnConfig>,
    pub options: EvalOptions,
}

/// Random subsampling applied per repeat. `None` keeps every item, so all
/// repeats see the same split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splitter {
    /// Queries kept per identity.
    pub query_shots: Option<usize>,
    /// Gallery items kept per identity.
    pub gallery_shots: Option<usize>,
}

impl Splitter {
    fn pick(bank: &EmbeddingBank, shots: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let Some(shots) = shots else {
            return (0..bank.len()).collect();
        };
        let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &id) in bank.identity.iter().enumerate() {
            by_id.entry(id).or_default().push(i);
        }
        let mut rows: Vec<usize> = by_id
            .values()
            .flat_map(|members| {
                let take = shots.min(members.len());
                index::sample(rng, members.len(), take).into_iter().map(|j| members[j]).collect::<Vec<_>>()
            })
            .collect();
        rows.sort_unstable();
        rows
    }

    /// Row selections `(query, gallery)` for one repeat.
    pub fn split(&self, query: &EmbeddingBank, gallery: &EmbeddingBank, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
        let g = Self::pick(gallery, self.gallery_shots, rng);
        let q = Self::pick(query, self.query_shots, rng);
        (q, g)
    }
}

/// Queries of one modality against a gallery of the other.
pub fn cross_modal_split(bank: &EmbeddingBank, query: Modality) -> (EmbeddingBank, EmbeddingBank) {
    (bank.select(&bank.rows_of(query)), bank.select(&bank.rows_of(query.other())))
}

fn submatrix(m: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows).select(Axis(1), cols)
}

/// Evaluates pre-computed full distance blocks on one split.
fn evaluate_split(
    full: &FullDistances,
    query: &EmbeddingBank,
    gallery: &EmbeddingBank,
    rows: &(Vec<usize>, Vec<usize>),
    pipeline: &Pipeline,
) -> Result<RankingResult> {
    let (qs, gs) = rows;
    let mut dist = submatrix(&full.qg, qs, gs);
    if let Some(cfg) = &pipeline.rerank {
        let qq = full.qq.as_ref().expect("computed when re-ranking");
        let gg = full.gg.as_ref().expect("computed when re-ranking");
        dist = ecn_rerank(dist.view(), submatrix(qq, qs, qs).view(), submatrix(gg, gs, gs).view(), cfg)?;
    }
    evaluate(dist.view(), &query.select(qs), &gallery.select(gs), &pipeline.options)
}

struct FullDistances {
    qg: Array2<f64>,
    qq: Option<Array2<f64>>,
    gg: Option<Array2<f64>>,
}

/// Distance matrix after the pipeline's distance and re-ranking stages.
pub fn pipeline_distances(query: &EmbeddingBank, gallery: &EmbeddingBank, pipeline: &Pipeline) -> Result<Array2<f64>> {
    let qg = pairwise_distances_with(query, gallery, pipeline.distance)?;
    match &pipeline.rerank {
        None => Ok(qg),
        Some(cfg) => {
            let qq = pairwise_distances_with(query, query, pipeline.distance)?;
            let gg = pairwise_distances_with(gallery, gallery, pipeline.distance)?;
            ecn_rerank(qg.view(), qq.view(), gg.view(), cfg)
        }
    }
}

/// One evaluation of the full banks.
pub fn evaluate_pipeline(query: &EmbeddingBank, gallery: &EmbeddingBank, pipeline: &Pipeline) -> Result<RankingResult> {
    let dist = pipeline_distances(query, gallery, pipeline)?;
    evaluate(dist.view(), query, gallery, &pipeline.options)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolResult {
    pub mean: Metrics,
    pub std: Metrics,
    pub runs: Vec<Metrics>,
}

/// Evaluates `repeats` random splits and reports per-metric mean and
/// population standard deviation.
pub fn protocol_run(
    query: &EmbeddingBank,
    gallery: &EmbeddingBank,
    splitter: &Splitter,
    pipeline: &Pipeline,
    repeats: usize,
    seed: u64,
) -> Result<ProtocolResult> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let full = FullDistances {
        qg: pairwise_distances_with(query, gallery, pipeline.distance)?,
        qq: pipeline.rerank.map(|_| pairwise_distances_with(query, query, pipeline.distance)).transpose()?,
        gg: pipeline.rerank.map(|_| pairwise_distances_with(gallery, gallery, pipeline.distance)).transpose()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let runs = (0..repeats)
        .map(|_| {
            let rows = splitter.split(query, gallery, &mut rng);
            evaluate_split(&full, query, gallery, &rows, pipeline).map(|r| r.metrics())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let mut mean_v = [0.0; 5];
    for r in &runs {
        for (m, v) in mean_v.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    let mean_v = mean_v.map(|s| s / n);
    let mut var_v = [0.0; 5];
    for r in &runs {
        for ((s, v), m) in var_v.iter_mut().zip(r.values()).zip(mean_v) {
            *s += (v - m).powi(2) / n;
        }
    }
    Ok(ProtocolResult {
        mean: Metrics::from_values(mean_v),
        std: Metrics::from_values(var_v.map(f64::sqrt)),
        runs,
    })
}
