//! Dense feature-map primitives: global average pooling, banded horizontal
//! max pooling and min-max scaling of stripe vectors.

use std::ops::Range;

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::error::{Error, Result};

/// A `C x H x W` activation tensor for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidFeatureMap(format!(
                "dimensions must be positive, got {c}x{h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatureMap("non-finite value".into()));
        }
        Ok(Self { data })
    }

    /// Builds a map from a row-major `C x H x W` buffer.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::InvalidFeatureMap(format!(
                "buffer has {} values, expected {expected}",
                data.len()
            )));
        }
        let arr = Array3::from_shape_vec((channels, height, width), data)
            .map_err(|e| Error::InvalidFeatureMap(e.to_string()))?;
        Self::new(arr)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}

/// Ordered per-stripe local features, top band first.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeSet {
    stripes: Array2<f64>,
}

impl StripeSet {
    pub fn new(stripes: Array2<f64>) -> Result<Self> {
        let (parts, dim) = stripes.dim();
        if parts == 0 || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "stripe set must be non-empty, got {parts}x{dim}"
            )));
        }
        if stripes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite stripe value".into()));
        }
        Ok(Self { stripes })
    }

    /// Splits a flat `parts * dim` vector into consecutive stripes.
    pub fn from_flat(flat: &[f64], parts: usize) -> Result<Self> {
        if parts == 0 || flat.len() % parts != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot split {} values into {parts} stripes",
                flat.len()
            )));
        }
        let dim = flat.len() / parts;
        let arr = Array2::from_shape_vec((parts, dim), flat.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(arr)
    }

    pub fn parts(&self) -> usize {
        self.stripes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.stripes.ncols()
    }

    pub fn stripe(&self, i: usize) -> ArrayView1<'_, f64> {
        self.stripes.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.stripes
    }
}

/// Per-channel mean over all spatial positions.
pub fn adaptive_avg_pool(map: &FeatureMap) -> Array1<f64> {
    let (c, h, w) = map.shape();
    let norm = (h * w) as f64;
    Array1::from_iter((0..c).map(|ch| map.data.index_axis(ndarray::Axis(0), ch).sum() / norm))
}

/// Contiguous row bands for `parts` stripes. Band sizes differ by at most one;
/// the larger bands come first.
pub fn band_ranges(height: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 || parts > height {
        return Err(Error::PartsExceedHeight { parts, height });
    }
    let base = height / parts;
    let extra = height % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Position of the maximum inside one band for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArgMax {
    pub row: usize,
    pub col: usize,
}

/// Horizontal max pooling that also records where each maximum came from.
/// Ties resolve to the first position in row-major order.
pub fn horizontal_max_pool_indexed(
    map: &FeatureMap,
    parts: usize,
) -> Result<(StripeSet, Vec<Vec<ArgMax>>)> {
    let (c, h, w) = map.shape();
    let bands = band_ranges(h, parts)?;
    let mut stripes = Array2::zeros((parts, c));
    let mut arg = Vec::with_capacity(parts);
    for (p, band) in bands.iter().enumerate() {
        let mut band_arg = Vec::with_capacity(c);
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut at = ArgMax { row: band.start, col: 0 };
            for row in band.clone() {
                for col in 0..w {
                    let v = map.data[[ch, row, col]];
                    if v > best {
                        best = v;
                        at = ArgMax { row, col };
                    }
                }
            }
            stripes[[p, ch]] = best;
            band_arg.push(at);
        }
        arg.push(band_arg);
    }
    Ok((StripeSet { stripes }, arg))
}

/// Splits the map into `parts` horizontal bands and takes the per-channel max
/// of each band.
pub fn horizontal_max_pool(map: &FeatureMap, parts: usize) -> Result<StripeSet> {
    horizontal_max_pool_indexed(map, parts).map(|(s, _)| s)
}

/// `(v - mean(v)) / (max(v) - min(v))`; a constant vector maps to zeros.
pub fn minmax_scale(v: ArrayView1<'_, f64>) -> Array1<f64> {
    if v.is_empty() {
        return Array1::zeros(0);
    }
    let mean = v.sum() / v.len() as f64;
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range == 0.0 {
        return Array1::zeros(v.len());
    }
    v.mapv(|x| (x - mean) / range)
}
