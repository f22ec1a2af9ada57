//! Multi-granularity fusion loss and its analytic gradient.
//!
//! Seven terms are summed: identity (cross-entropy) losses on the global,
//! enhanced-global and per-stripe classifier logits, heterogeneous-center
//! triplet losses on the global and enhanced-global embeddings, and a
//! batch-hard part alignment loss on the stripe embeddings.
//!
//! Subgradient convention: min/max ties resolve to the first achiever in
//! index order, a hinge exactly at zero contributes nothing, and the
//! derivative of a zero-length distance is taken as zero.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut2, Axis};

use crate::error::{Error, Result};
use crate::Modality;

pub const DEFAULT_MARGIN: f64 = 0.3;

/// First stripe included in per-stripe sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SumFrom {
    /// All stripes.
    #[default]
    First,
    /// Skip the top stripe.
    Second,
}

impl SumFrom {
    pub fn start(self) -> usize {
        match self {
            SumFrom::First => 0,
            SumFrom::Second => 1,
        }
    }
}

impl std::str::FromStr for SumFrom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(SumFrom::First),
            "2" => Ok(SumFrom::Second),
            other => Err(Error::Config(format!("sum_from must be 1 or 2, got '{other}'"))),
        }
    }
}

impl std::fmt::Display for SumFrom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.start() + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Margin of the center triplet terms.
    pub m_g: f64,
    /// Margin of the part alignment term.
    pub m_l: f64,
    pub sum_from: SumFrom,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { m_g: DEFAULT_MARGIN, m_l: DEFAULT_MARGIN, sum_from: SumFrom::First }
    }
}

/// Network outputs for one `2PK` batch together with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    /// `n x D` global features.
    pub global: Array2<f64>,
    /// `n x D` enhanced global features.
    pub enhanced: Array2<f64>,
    /// `n x parts x D_loc` stripe features.
    pub stripes: Array3<f64>,
    /// `n x N` logits of the global classifier.
    pub logits_global: Array2<f64>,
    /// `n x N` logits of the enhanced-global classifier.
    pub logits_enhanced: Array2<f64>,
    /// `parts x n x N` logits of the per-stripe classifiers.
    pub logits_local: Array3<f64>,
    pub identity: Vec<usize>,
    pub modality: Vec<Modality>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    /// Checks shapes and the PK layout; returns `(P, K)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let n = self.identity.len();
        let classes = self.logits_global.ncols();
        let shape_ok = self.modality.len() == n
            && self.global.nrows() == n
            && self.enhanced.dim() == self.global.dim()
            && self.stripes.dim().0 == n
            && self.logits_global.nrows() == n
            && self.logits_enhanced.dim() == (n, classes)
            && self.logits_local.dim() == (self.stripes.dim().1, n, classes);
        if !shape_ok {
            return Err(Error::ShapeMismatch("labeled batch components disagree".into()));
        }
        let finite = |v: &f64| v.is_finite();
        let all_finite = self.global.iter().all(finite)
            && self.enhanced.iter().all(finite)
            && self.stripes.iter().all(finite)
            && self.logits_global.iter().all(finite)
            && self.logits_enhanced.iter().all(finite)
            && self.logits_local.iter().all(finite);
        if !all_finite {
            return Err(Error::InvalidInput("non-finite value in batch".into()));
        }
        let mut counts: BTreeMap<usize, [usize; 2]> = BTreeMap::new();
        for (&id, &m) in self.identity.iter().zip(&self.modality) {
            counts.entry(id).or_default()[m as usize] += 1;
        }
        let p = counts.len();
        if p < 2 {
            return Err(Error::NeedTwoIdentities(p));
        }
        let k = counts.values().next().map(|c| c[0]).unwrap_or(0);
        if k == 0 || counts.values().any(|c| c[0] != k || c[1] != k) {
            return Err(Error::InvalidInput(
                "every identity needs the same number K >= 1 of visible and thermal rows".into(),
            ));
        }
        Ok((p, k))
    }
}

/// Gradients of a loss with respect to every differentiable batch field.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub global: Array2<f64>,
    pub enhanced: Array2<f64>,
    pub stripes: Array3<f64>,
    pub logits_global: Array2<f64>,
    pub logits_enhanced: Array2<f64>,
    pub logits_local: Array3<f64>,
}

impl LossGradients {
    pub fn zeros_like(b: &LabeledBatch) -> Self {
        Self {
            global: Array2::zeros(b.global.raw_dim()),
            enhanced: Array2::zeros(b.enhanced.raw_dim()),
            stripes: Array3::zeros(b.stripes.raw_dim()),
            logits_global: Array2::zeros(b.logits_global.raw_dim()),
            logits_enhanced: Array2::zeros(b.logits_enhanced.raw_dim()),
            logits_local: Array3::zeros(b.logits_local.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &LossGradients) {
        self.global += &other.global;
        self.enhanced += &other.enhanced;
        self.stripes += &other.stripes;
        self.logits_global += &other.logits_global;
        self.logits_enhanced += &other.logits_enhanced;
        self.logits_local += &other.logits_local;
    }
}

/// Per-component values of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub id_g: f64,
    pub id_eg: f64,
    pub tri_g: f64,
    pub tri_eg: f64,
    pub id_lv: f64,
    pub id_lt: f64,
    pub pa_vt: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 7] {
        [self.id_g, self.id_eg, self.tri_g, self.tri_eg, self.id_lv, self.id_lt, self.pa_vt]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    IdGlobal,
    IdEnhanced,
    TriGlobal,
    TriEnhanced,
    IdLocalVisible,
    IdLocalThermal,
    PartAlign,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::IdGlobal,
        LossTerm::IdEnhanced,
        LossTerm::TriGlobal,
        LossTerm::TriEnhanced,
        LossTerm::IdLocalVisible,
        LossTerm::IdLocalThermal,
        LossTerm::PartAlign,
    ];

    /// Column name used in loss logs.
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::IdGlobal => "id_g",
            LossTerm::IdEnhanced => "id_eg",
            LossTerm::TriGlobal => "tri_g",
            LossTerm::TriEnhanced => "tri_eg",
            LossTerm::IdLocalVisible => "id_lv",
            LossTerm::IdLocalThermal => "id_lt",
            LossTerm::PartAlign => "pa_vt",
        }
    }
}

fn check_labels(rows: usize, classes: usize, identity: &[usize]) -> Result<()> {
    if identity.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{rows} logit rows but {} labels",
            identity.len()
        )));
    }
    if let Some(&label) = identity.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn cross_entropy_impl(
    logits: ArrayView2<'_, f64>,
    identity: &[usize],
    grad: Option<ArrayViewMut2<'_, f64>>,
) -> Result<f64> {
    let (rows, classes) = logits.dim();
    check_labels(rows, classes, identity)?;
    if rows == 0 {
        return Ok(0.0);
    }
    let norm = rows as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    for (r, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[identity[r]];
        if let Some(g) = grad.as_mut() {
            for (c, &x) in row.iter().enumerate() {
                let p = (x - lse).exp();
                let target = if c == identity[r] { 1.0 } else { 0.0 };
                g[[r, c]] += (p - target) / norm;
            }
        }
    }
    Ok(loss / norm)
}

/// Mean softmax cross-entropy of `logits` against `identity`.
pub fn id_loss_global(logits: ArrayView2<'_, f64>, identity: &[usize]) -> Result<f64> {
    cross_entropy_impl(logits, identity, None)
}

fn local_impl(
    logits_local: ArrayView3<'_, f64>,
    identity: &[usize],
    sum_from: SumFrom,
    mut grad: Option<&mut Array3<f64>>,
) -> Result<f64> {
    let mut total = 0.0;
    for j in sum_from.start()..logits_local.dim().0 {
        let g = grad.as_mut().map(|g| g.index_axis_mut(Axis(0), j));
        total += cross_entropy_impl(logits_local.index_axis(Axis(0), j), identity, g)?;
    }
    Ok(total)
}

/// Sum over stripes of the per-stripe identity loss.
pub fn id_loss_local(
    logits_local: ArrayView3<'_, f64>,
    identity: &[usize],
    sum_from: SumFrom,
) -> Result<f64> {
    local_impl(logits_local, identity, sum_from, None)
}

fn l2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Adds `scale * (a - b) / |a - b|` to `out`.
fn add_unit_diff(out: &mut [f64], a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, dist: f64, scale: f64) {
    if dist == 0.0 {
        return;
    }
    for ((o, x), y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
        *o += scale * (x - y) / dist;
    }
}

/// Tracks how close an evaluation came to a non-differentiable point.
#[derive(Debug, Clone, Copy)]
struct KinkProbe {
    margin: f64,
}

impl KinkProbe {
    fn new() -> Self {
        Self { margin: f64::INFINITY }
    }

    fn see(&mut self, gap: f64) {
        self.margin = self.margin.min(gap.abs());
    }

    /// Records the gap between the best and second best candidates.
    fn see_runner_up(&mut self, values: &[f64], best: usize, minimize: bool) {
        for (i, &v) in values.iter().enumerate() {
            if i != best {
                self.see(if minimize { v - values[best] } else { values[best] - v });
            }
        }
    }
}

fn first_argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_pair_labels(n: usize, identity: &[usize], modality: &[Modality]) -> Result<()> {
    if identity.len() != n || modality.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} rows, {} identities, {} modalities",
            identity.len(),
            modality.len()
        )));
    }
    Ok(())
}

fn hetero_center_impl(
    emb: ArrayView2<'_, f64>,
    identity: &[usize],
    modality: &[Modality],
    margin: f64,
    grad: Option<&mut Array2<f64>>,
    probe: &mut KinkProbe,
) -> Result<f64> {
    let (n, dim) = emb.dim();
    check_pair_labels(n, identity, modality)?;
    // members[id][modality] -> row indices
    let mut members: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
    for (r, (&id, &m)) in identity.iter().zip(modality).enumerate() {
        members.entry(id).or_default()[m as usize].push(r);
    }
    if members.len() < 2 {
        return Err(Error::NeedTwoIdentities(members.len()));
    }
    if let Some((id, _)) = members.iter().find(|(_, m)| m[0].is_empty() || m[1].is_empty()) {
        return Err(Error::InvalidInput(format!("identity {id} lacks one modality")));
    }
    let groups: Vec<&[Vec<usize>; 2]> = members.values().collect();
    let p = groups.len();
    // centers[2 * i + k]: identity i, modality k (0 visible, 1 thermal)
    let mut centers = Array2::<f64>::zeros((2 * p, dim));
    for (i, g) in groups.iter().enumerate() {
        for k in 0..2 {
            let mut c = centers.row_mut(2 * i + k);
            for &r in &g[k] {
                c += &emb.row(r);
            }
            c /= g[k].len() as f64;
        }
    }
    let mut center_grad = Array2::<f64>::zeros((2 * p, dim));
    let mut loss = 0.0;
    let mut neg_dists = Vec::with_capacity(2 * p - 2);
    for i in 0..p {
        for k in 0..2 {
            let anchor = 2 * i + k;
            let partner = 2 * i + (1 - k);
            let pos = l2(centers.row(anchor), centers.row(partner));
            neg_dists.clear();
            let mut neg_idx = Vec::with_capacity(2 * p - 2);
            for j in (0..p).filter(|&j| j != i) {
                for kk in 0..2 {
                    neg_idx.push(2 * j + kk);
                    neg_dists.push(l2(centers.row(anchor), centers.row(2 * j + kk)));
                }
            }
            let best = first_argmin(&neg_dists);
            let neg = neg_dists[best];
            let hinge = margin + pos - neg;
            probe.see(hinge);
            probe.see(pos);
            probe.see(neg);
            probe.see_runner_up(&neg_dists, best, true);
            if hinge > 0.0 {
                loss += hinge;
                let neg_center = neg_idx[best];
                let a = centers.row(anchor).to_owned();
                let b = centers.row(partner).to_owned();
                let c = centers.row(neg_center).to_owned();
                let (a, b, c) = (a.view(), b.view(), c.view());
                add_unit_diff(center_grad.row_mut(anchor).as_slice_mut().unwrap(), a, b, pos, 1.0);
                add_unit_diff(center_grad.row_mut(partner).as_slice_mut().unwrap(), a, b, pos, -1.0);
                add_unit_diff(center_grad.row_mut(anchor).as_slice_mut().unwrap(), a, c, neg, -1.0);
                add_unit_diff(center_grad.row_mut(neg_center).as_slice_mut().unwrap(), a, c, neg, 1.0);
            }
        }
    }
    if let Some(g) = grad {
        for (i, grp) in groups.iter().enumerate() {
            for k in 0..2 {
                let share = 1.0 / grp[k].len() as f64;
                for &r in &grp[k] {
                    g.row_mut(r).scaled_add(share, &center_grad.row(2 * i + k));
                }
            }
        }
    }
    Ok(loss)
}

/// Heterogeneous-center triplet loss: for each identity and modality, the
/// modality center is pulled toward the same identity's other-modality center
/// and pushed from the nearest center of any other identity.
pub fn hetero_center_triplet(
    embeddings: ArrayView2<'_, f64>,
    identity: &[usize],
    modality: &[Modality],
    m_g: f64,
) -> Result<f64> {
    hetero_center_impl(embeddings, identity, modality, m_g, None, &mut KinkProbe::new())
}

pub fn hetero_center_triplet_grad(
    embeddings: ArrayView2<'_, f64>,
    identity: &[usize],
    modality: &[Modality],
    m_g: f64,
) -> Result<Array2<f64>> {
    let mut g = Array2::zeros(embeddings.raw_dim());
    hetero_center_impl(embeddings, identity, modality, m_g, Some(&mut g), &mut KinkProbe::new())?;
    Ok(g)
}

fn part_align_impl(
    stripes: ArrayView3<'_, f64>,
    identity: &[usize],
    modality: &[Modality],
    margin: f64,
    sum_from: SumFrom,
    mut grad: Option<&mut Array3<f64>>,
    probe: &mut KinkProbe,
) -> Result<f64> {
    let (n, parts, _) = stripes.dim();
    check_pair_labels(n, identity, modality)?;
    let distinct: std::collections::BTreeSet<_> = identity.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::NeedTwoIdentities(distinct.len()));
    }
    let mut loss = 0.0;
    let mut pos_d = Vec::with_capacity(n);
    let mut pos_i = Vec::with_capacity(n);
    let mut neg_d = Vec::with_capacity(n);
    let mut neg_i = Vec::with_capacity(n);
    for j in sum_from.start()..parts {
        let layer = stripes.index_axis(Axis(1), j);
        for a in 0..n {
            pos_d.clear();
            pos_i.clear();
            neg_d.clear();
            neg_i.clear();
            for b in (0..n).filter(|&b| b != a) {
                let d = l2(layer.row(a), layer.row(b));
                if identity[b] == identity[a] {
                    pos_d.push(d);
                    pos_i.push(b);
                } else {
                    neg_d.push(d);
                    neg_i.push(b);
                }
            }
            if pos_d.is_empty() {
                continue;
            }
            let bp = first_argmax(&pos_d);
            let bn = first_argmin(&neg_d);
            let (pos, neg) = (pos_d[bp], neg_d[bn]);
            let hinge = margin + pos - neg;
            probe.see(hinge);
            probe.see(pos);
            probe.see(neg);
            probe.see_runner_up(&pos_d, bp, false);
            probe.see_runner_up(&neg_d, bn, true);
            if hinge > 0.0 {
                loss += hinge;
                if let Some(g) = grad.as_mut() {
                    let (p_row, n_row) = (pos_i[bp], neg_i[bn]);
                    let ra = layer.row(a);
                    let rp = layer.row(p_row);
                    let rn = layer.row(n_row);
                    let mut ga = vec![0.0; ra.len()];
                    let mut gp = vec![0.0; ra.len()];
                    let mut gn = vec![0.0; ra.len()];
                    add_unit_diff(&mut ga, ra, rp, pos, 1.0);
                    add_unit_diff(&mut gp, ra, rp, pos, -1.0);
                    add_unit_diff(&mut ga, ra, rn, neg, -1.0);
                    add_unit_diff(&mut gn, ra, rn, neg, 1.0);
                    for (row, delta) in [(a, ga), (p_row, gp), (n_row, gn)] {
                        let mut dst = g.slice_mut(s![row, j, ..]);
                        for (d, v) in dst.iter_mut().zip(delta) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    Ok(loss)
}

/// Batch-hard triplet over stripe features: each anchor and stripe uses its
/// farthest same-identity sample and nearest other-identity sample, from
/// either modality.
pub fn part_align_loss(
    stripes: ArrayView3<'_, f64>,
    identity: &[usize],
    modality: &[Modality],
    m_l: f64,
    sum_from: SumFrom,
) -> Result<f64> {
    part_align_impl(stripes, identity, modality, m_l, sum_from, None, &mut KinkProbe::new())
}

fn rows_of(batch: &LabeledBatch, m: Modality) -> Vec<usize> {
    (0..batch.len()).filter(|&r| batch.modality[r] == m).collect()
}

fn local_modality_impl(
    batch: &LabeledBatch,
    m: Modality,
    sum_from: SumFrom,
    grad: Option<&mut Array3<f64>>,
) -> Result<f64> {
    let rows = rows_of(batch, m);
    let sub = batch.logits_local.select(Axis(1), &rows);
    let ids: Vec<usize> = rows.iter().map(|&r| batch.identity[r]).collect();
    match grad {
        None => local_impl(sub.view(), &ids, sum_from, None),
        Some(g) => {
            let mut sub_grad = Array3::zeros(sub.raw_dim());
            let v = local_impl(sub.view(), &ids, sum_from, Some(&mut sub_grad))?;
            for (k, &r) in rows.iter().enumerate() {
                let mut dst = g.slice_mut(s![.., r, ..]);
                dst += &sub_grad.slice(s![.., k, ..]);
            }
            Ok(v)
        }
    }
}

fn term_impl(
    batch: &LabeledBatch,
    cfg: &LossConfig,
    term: LossTerm,
    grads: Option<&mut LossGradients>,
    probe: &mut KinkProbe,
) -> Result<f64> {
    let ids = &batch.identity;
    let mods = &batch.modality;
    match term {
        LossTerm::IdGlobal => cross_entropy_impl(
            batch.logits_global.view(),
            ids,
            grads.map(|g| g.logits_global.view_mut()),
        ),
        LossTerm::IdEnhanced => cross_entropy_impl(
            batch.logits_enhanced.view(),
            ids,
            grads.map(|g| g.logits_enhanced.view_mut()),
        ),
        LossTerm::TriGlobal => hetero_center_impl(
            batch.global.view(),
            ids,
            mods,
            cfg.m_g,
            grads.map(|g| &mut g.global),
            probe,
        ),
        LossTerm::TriEnhanced => hetero_center_impl(
            batch.enhanced.view(),
            ids,
            mods,
            cfg.m_g,
            grads.map(|g| &mut g.enhanced),
            probe,
        ),
        LossTerm::IdLocalVisible => {
            local_modality_impl(batch, Modality::Visible, cfg.sum_from, grads.map(|g| &mut g.logits_local))
        }
        LossTerm::IdLocalThermal => {
            local_modality_impl(batch, Modality::Thermal, cfg.sum_from, grads.map(|g| &mut g.logits_local))
        }
        LossTerm::PartAlign => part_align_impl(
            batch.stripes.view(),
            ids,
            mods,
            cfg.m_l,
            cfg.sum_from,
            grads.map(|g| &mut g.stripes),
            probe,
        ),
    }
}

pub fn term_value(batch: &LabeledBatch, cfg: &LossConfig, term: LossTerm) -> Result<f64> {
    term_impl(batch, cfg, term, None, &mut KinkProbe::new())
}

pub fn term_backward(batch: &LabeledBatch, cfg: &LossConfig, term: LossTerm) -> Result<LossGradients> {
    let mut g = LossGradients::zeros_like(batch);
    term_impl(batch, cfg, term, Some(&mut g), &mut KinkProbe::new())?;
    Ok(g)
}

pub fn total_loss(batch: &LabeledBatch, cfg: &LossConfig) -> Result<LossReport> {
    batch.validate()?;
    let mut v = [0.0; 7];
    for (slot, term) in v.iter_mut().zip(LossTerm::ALL) {
        *slot = term_value(batch, cfg, term)?;
    }
    Ok(LossReport {
        id_g: v[0],
        id_eg: v[1],
        tri_g: v[2],
        tri_eg: v[3],
        id_lv: v[4],
        id_lt: v[5],
        pa_vt: v[6],
        total: v.iter().sum(),
    })
}

/// Analytic gradient of [`total_loss`].
pub fn loss_backward(batch: &LabeledBatch, cfg: &LossConfig) -> Result<LossGradients> {
    batch.validate()?;
    let mut g = LossGradients::zeros_like(batch);
    let mut probe = KinkProbe::new();
    for term in LossTerm::ALL {
        term_impl(batch, cfg, term, Some(&mut g), &mut probe)?;
    }
    Ok(g)
}

/// [`total_loss`] and [`loss_backward`] in one pass.
pub fn loss_and_backward(batch: &LabeledBatch, cfg: &LossConfig) -> Result<(LossReport, LossGradients)> {
    batch.validate()?;
    let mut g = LossGradients::zeros_like(batch);
    let mut probe = KinkProbe::new();
    let mut v = [0.0; 7];
    for (slot, term) in v.iter_mut().zip(LossTerm::ALL) {
        *slot = term_impl(batch, cfg, term, Some(&mut g), &mut probe)?;
    }
    let report = LossReport {
        id_g: v[0],
        id_eg: v[1],
        tri_g: v[2],
        tri_eg: v[3],
        id_lv: v[4],
        id_lt: v[5],
        pa_vt: v[6],
        total: v.iter().sum(),
    };
    Ok((report, g))
}

/// Smallest distance of `term` from a hinge kink, a min/max tie or a
/// zero-length distance. Gradient checks skip points where this is tiny.
pub fn kink_margin(batch: &LabeledBatch, cfg: &LossConfig, term: LossTerm) -> Result<f64> {
    let mut probe = KinkProbe::new();
    term_impl(batch, cfg, term, None, &mut probe)?;
    Ok(probe.margin)
}
