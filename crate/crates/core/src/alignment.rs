//! Local shortest-path alignment between two images.
//!
//! Each image is cut into horizontal stripes. Stripes are compared pairwise
//! with an L1 distance on min-max scaled vectors, and the image distance is
//! the cheapest monotone path through that matrix from the top-left corner to
//! the bottom-right corner, moving only right or down.
//!
//! Indices here are 0-based; `s[0][0]` is the path start.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::numerics::{horizontal_max_pool, minmax_scale, FeatureMap, StripeSet};

/// Largest `h` accepted by [`brute_force_path`].
pub const BRUTE_FORCE_MAX_H: usize = 12;

/// Stripe-to-stripe distances plus the DP accumulator once computed.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: Array2<f64>,
    s: Option<Array2<f64>>,
}

impl DistanceMatrix {
    pub fn new(d: Array2<f64>) -> Result<Self> {
        let (r, c) = d.dim();
        if r != c || r == 0 {
            return Err(Error::ShapeMismatch(format!(
                "distance matrix must be square and non-empty, got {r}x{c}"
            )));
        }
        if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "distance entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { d, s: None })
    }

    pub fn h(&self) -> usize {
        self.d.nrows()
    }

    pub fn distances(&self) -> &Array2<f64> {
        &self.d
    }

    /// The accumulated path costs, available after [`shortest_path_distance`].
    pub fn accumulator(&self) -> Option<&Array2<f64>> {
        self.s.as_ref()
    }
}

pub fn stripe_distance(f_r: ArrayView1<'_, f64>, f_t: ArrayView1<'_, f64>) -> Result<f64> {
    if f_r.len() != f_t.len() {
        return Err(Error::LengthMismatch { left: f_r.len(), right: f_t.len() });
    }
    if f_r.is_empty() {
        return Err(Error::InvalidInput("stripe vectors must be non-empty".into()));
    }
    let a = minmax_scale(f_r);
    let b = minmax_scale(f_t);
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum())
}

pub fn build_distance_matrix(a: &StripeSet, b: &StripeSet) -> Result<DistanceMatrix> {
    if a.parts() != b.parts() || a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "stripe sets {}x{} and {}x{}",
            a.parts(),
            a.dim(),
            b.parts(),
            b.dim()
        )));
    }
    let h = a.parts();
    let scaled_a: Vec<_> = (0..h).map(|i| minmax_scale(a.stripe(i))).collect();
    let scaled_b: Vec<_> = (0..h).map(|j| minmax_scale(b.stripe(j))).collect();
    let d = Array2::from_shape_fn((h, h), |(i, j)| {
        scaled_a[i].iter().zip(scaled_b[j].iter()).map(|(x, y)| (x - y).abs()).sum()
    });
    DistanceMatrix::new(d)
}

/// Fills the accumulator and returns the cost of the cheapest right/down path.
pub fn shortest_path_distance(m: &mut DistanceMatrix) -> f64 {
    let h = m.h();
    let d = &m.d;
    let mut s = Array2::<f64>::zeros((h, h));
    for i in 0..h {
        for j in 0..h {
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => s[[0, j - 1]],
                (_, 0) => s[[i - 1, 0]],
                _ => s[[i, j - 1]].min(s[[i - 1, j]]),
            };
            s[[i, j]] = prev + d[[i, j]];
        }
    }
    let total = s[[h - 1, h - 1]];
    m.s = Some(s);
    total
}

/// Exhaustive minimum over every monotone lattice path. Test oracle only.
pub fn brute_force_path(m: &DistanceMatrix) -> Result<f64> {
    let h = m.h();
    if h > BRUTE_FORCE_MAX_H {
        return Err(Error::TooLarge { h, max: BRUTE_FORCE_MAX_H });
    }
    let steps = 2 * (h - 1);
    let mut best = f64::INFINITY;
    // each path is a bitmask of `steps` moves with exactly h-1 "down" bits
    for mask in 0u32..(1u32 << steps) {
        if mask.count_ones() as usize != h - 1 {
            continue;
        }
        let (mut i, mut j) = (0, 0);
        let mut cost = m.d[[0, 0]];
        for step in 0..steps {
            if mask & (1 << step) != 0 {
                i += 1;
            } else {
                j += 1;
            }
            cost += m.d[[i, j]];
        }
        best = best.min(cost);
    }
    Ok(best)
}

/// Shortest-path distance between two already pooled stripe sets.
pub fn align_stripes(a: &StripeSet, b: &StripeSet) -> Result<f64> {
    let mut m = build_distance_matrix(a, b)?;
    Ok(shortest_path_distance(&mut m))
}

pub fn align_distance(map_a: &FeatureMap, map_b: &FeatureMap, parts: usize) -> Result<f64> {
    if map_a.channels() != map_b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "channel counts {} and {}",
            map_a.channels(),
            map_b.channels()
        )));
    }
    let a = horizontal_max_pool(map_a, parts)?;
    let b = horizontal_max_pool(map_b, parts)?;
    align_stripes(&a, &b)
}

/// All-pairs alignment distances between two lists of stripe sets.
pub fn pairwise_align(queries: &[StripeSet], gallery: &[StripeSet]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((queries.len(), gallery.len()));
    for (qi, q) in queries.iter().enumerate() {
        for (gi, g) in gallery.iter().enumerate() {
            out[[qi, gi]] = align_stripes(q, g)?;
        }
    }
    Ok(out)
}
