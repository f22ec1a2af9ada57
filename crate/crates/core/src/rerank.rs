//! Expanded cross neighborhood (ECN) re-ranking.
//!
//! Queries and gallery items are pooled into one set of `Q + G` items. Each
//! item's expanded neighborhood is its `top_t` nearest other items plus, for
//! each of those, their own `expand_q` nearest other items (a multiset). The
//! re-ranked query/gallery distance averages the original distances from each
//! side's neighborhood to the other side.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcnConfig {
    pub top_t: usize,
    pub expand_q: usize,
}

impl Default for EcnConfig {
    fn default() -> Self {
        Self { top_t: 3, expand_q: 8 }
    }
}

impl EcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_t == 0 {
            return Err(Error::Config("top_t must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_block(name: &str, m: &ArrayView2<'_, f64>, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!("{name} is {:?}, expected {rows}x{cols}", m.dim())));
    }
    if m.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::InvalidInput(format!("{name} must hold finite non-negative distances")));
    }
    Ok(())
}

/// The `(Q+G) x (Q+G)` matrix `[[qq, qg], [qg^T, gg]]`.
pub fn combined_distances(
    dist_qg: ArrayView2<'_, f64>,
    dist_qq: ArrayView2<'_, f64>,
    dist_gg: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let (q, g) = dist_qg.dim();
    check_block("dist_qg", &dist_qg, q, g)?;
    check_block("dist_qq", &dist_qq, q, q)?;
    check_block("dist_gg", &dist_gg, g, g)?;
    let mut all = Array2::zeros((q + g, q + g));
    all.slice_mut(s![..q, ..q]).assign(&dist_qq);
    all.slice_mut(s![..q, q..]).assign(&dist_qg);
    all.slice_mut(s![q.., ..q]).assign(&dist_qg.t());
    all.slice_mut(s![q.., q..]).assign(&dist_gg);
    Ok(all)
}

/// Indices of the `count` nearest items to `item`, itself excluded, ties
/// broken by index.
fn nearest(all: &Array2<f64>, item: usize, count: usize) -> Vec<usize> {
    let row = all.row(item);
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != item).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Expanded neighborhood multiset of every item.
fn neighborhoods(all: &Array2<f64>, cfg: &EcnConfig) -> Vec<Vec<usize>> {
    let n = all.nrows();
    let t = cfg.top_t.min(n - 1);
    let q = cfg.expand_q.min(n - 1);
    let direct: Vec<Vec<usize>> = (0..n).map(|i| nearest(all, i, t.max(q))).collect();
    (0..n)
        .map(|i| {
            let mut set = direct[i][..t].to_vec();
            for &nb in &direct[i][..t] {
                set.extend_from_slice(&direct[nb][..q]);
            }
            set
        })
        .collect()
}

pub fn ecn_rerank(
    dist_qg: ArrayView2<'_, f64>,
    dist_qq: ArrayView2<'_, f64>,
    dist_gg: ArrayView2<'_, f64>,
    cfg: &EcnConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let all = combined_distances(dist_qg, dist_qq, dist_gg)?;
    let (nq, ng) = dist_qg.dim();
    if nq + ng <= 1 {
        return Err(Error::EmptyNeighborhood);
    }
    let hoods = neighborhoods(&all, cfg);
    let m = hoods[0].len() as f64;
    let mut out = Array2::zeros((nq, ng));
    for p in 0..nq {
        for gi in 0..ng {
            let g = nq + gi;
            let from_p: f64 = hoods[p].iter().map(|&x| all[[x, g]]).sum();
            let from_g: f64 = hoods[g].iter().map(|&y| all[[y, p]]).sum();
            out[[p, gi]] = (from_p + from_g) / (2.0 * m);
        }
    }
    Ok(out)
}
