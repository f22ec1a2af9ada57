//! Batch-normalized global feature enhancement.
//!
//! The fused feature map is batch-normalized, each channel is weighted by its
//! share of the BN scale factors, and the average-pooled result is added to
//! the plain global feature.

use ndarray::{Array1, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adaptive_avg_pool, FeatureMap};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// How the per-channel weight factors are derived from `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnWeightMode {
    /// `|gamma_j| / sum |gamma_k|`
    #[default]
    Abs,
    /// `gamma_j / sum gamma_k`
    Signed,
}

impl std::str::FromStr for BnWeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(Self::Abs),
            "signed" => Ok(Self::Signed),
            other => Err(Error::Config(format!("unknown bn_weight_mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for BnWeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Abs => "abs",
            Self::Signed => "signed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

impl BnParams {
    pub fn new(gamma: Array1<f64>, beta: Array1<f64>, eps: f64) -> Result<Self> {
        if gamma.len() != beta.len() || gamma.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "gamma has {} entries, beta has {}",
                gamma.len(),
                beta.len()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { gamma, beta, eps })
    }

    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self { gamma: Array1::ones(channels), beta: Array1::zeros(channels), eps }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchStats {
    pub fn new(mean: Array1<f64>, var: Array1<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::ShapeMismatch("mean/var lengths differ".into()));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("variance must be non-negative".into()));
        }
        Ok(Self { mean, var })
    }

    /// Starting point for running statistics: zero mean, unit variance.
    pub fn unit(channels: usize) -> Self {
        Self { mean: Array1::zeros(channels), var: Array1::ones(channels) }
    }

    /// Exponential moving update used for inference-time statistics. `batch`
    /// variance is the biased estimate over `count` elements; the running
    /// variance stores the unbiased one.
    pub fn update_running(&mut self, batch: &BatchStats, count: usize, momentum: f64) {
        let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        Zip::from(&mut self.mean).and(&batch.mean).for_each(|m, &b| {
            *m = (1.0 - momentum) * *m + momentum * b;
        });
        Zip::from(&mut self.var).and(&batch.var).for_each(|v, &b| {
            *v = (1.0 - momentum) * *v + momentum * b * correction;
        });
    }
}

fn check_batch(batch: &[FeatureMap]) -> Result<(usize, usize, usize)> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let shape = first.shape();
    if let Some(bad) = batch.iter().find(|m| m.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "batch mixes shapes {:?} and {:?}",
            shape,
            bad.shape()
        )));
    }
    Ok(shape)
}

/// Per-channel mean and biased variance over every batch and spatial element.
pub fn batch_stats(batch: &[FeatureMap]) -> Result<BatchStats> {
    let (c, h, w) = check_batch(batch)?;
    let count = (batch.len() * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    for m in batch {
        mean += &m.data().sum_axis(Axis(2)).sum_axis(Axis(1));
    }
    mean /= count;
    let mut var = Array1::<f64>::zeros(c);
    for m in batch {
        for (ch, plane) in m.data().axis_iter(Axis(0)).enumerate() {
            var[ch] += plane.iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var /= count;
    Ok(BatchStats { mean, var })
}

/// Applies `gamma * (x - mean) / sqrt(var + eps) + beta` with given statistics.
pub fn normalize_with(map: &FeatureMap, p: &BnParams, stats: &BatchStats) -> Result<FeatureMap> {
    let c = map.channels();
    if p.channels() != c || stats.mean.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "map has {c} channels, BN has {} and stats {}",
            p.channels(),
            stats.mean.len()
        )));
    }
    let mut out: Array3<f64> = map.data().clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let scale = p.gamma[ch] / (stats.var[ch] + p.eps).sqrt();
        let shift = p.beta[ch];
        let mu = stats.mean[ch];
        plane.mapv_inplace(|x| scale * (x - mu) + shift);
    }
    FeatureMap::new(out)
}

/// Training-mode batch normalization; returns the outputs and the statistics used.
pub fn batch_norm_forward(
    batch: &[FeatureMap],
    p: &BnParams,
) -> Result<(Vec<FeatureMap>, BatchStats)> {
    let stats = batch_stats(batch)?;
    let out = batch
        .iter()
        .map(|m| normalize_with(m, p, &stats))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

pub fn bn_weight_vector(p: &BnParams, mode: BnWeightMode) -> Result<Array1<f64>> {
    let lambda = match mode {
        BnWeightMode::Abs => p.gamma.mapv(f64::abs),
        BnWeightMode::Signed => p.gamma.clone(),
    };
    let total = lambda.sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::DegenerateGamma);
    }
    Ok(lambda / total)
}

/// Chain rule through [`bn_weight_vector`]: maps `dL/dv` to `dL/dgamma`.
pub fn bn_weight_vector_backward(
    gamma: &Array1<f64>,
    mode: BnWeightMode,
    grad_v: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (lambda, sign) = match mode {
        BnWeightMode::Abs => (gamma.mapv(f64::abs), gamma.mapv(|g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 })),
        BnWeightMode::Signed => (gamma.clone(), Array1::ones(gamma.len())),
    };
    let total = lambda.sum();
    if total == 0.0 {
        return Err(Error::DegenerateGamma);
    }
    // dv_c/dlambda_k = delta_ck / S - lambda_c / S^2
    let weighted = grad_v.dot(&lambda) / (total * total);
    Ok(Zip::from(grad_v).and(&sign).map_collect(|&g, &s| s * (g / total - weighted)))
}

/// `f_glo + avg(v_bn * BN(f_d))`, with BN statistics taken over `batch`.
pub fn enhance_global(
    f_glo: &Array1<f64>,
    f_d: &FeatureMap,
    batch: &[FeatureMap],
    p: &BnParams,
    mode: BnWeightMode,
) -> Result<Array1<f64>> {
    let stats = batch_stats(batch)?;
    enhance_global_with(f_glo, f_d, p, &stats, mode)
}

/// [`enhance_global`] with explicit (e.g. running) statistics.
pub fn enhance_global_with(
    f_glo: &Array1<f64>,
    f_d: &FeatureMap,
    p: &BnParams,
    stats: &BatchStats,
    mode: BnWeightMode,
) -> Result<Array1<f64>> {
    if f_glo.len() != f_d.channels() {
        return Err(Error::LengthMismatch { left: f_glo.len(), right: f_d.channels() });
    }
    let v = bn_weight_vector(p, mode)?;
    let normalized = normalize_with(f_d, p, stats)?;
    let mut weighted = normalized.into_inner();
    for (ch, mut plane) in weighted.axis_iter_mut(Axis(0)).enumerate() {
        plane *= v[ch];
    }
    Ok(f_glo + &adaptive_avg_pool(&FeatureMap::new(weighted)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Vec<FeatureMap> {
        (0..n)
            .map(|_| {
                FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5 + 0.3).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = random_batch(&mut rng, 3, 2, 2, 2);
        for m in &mut batch {
            let mut d = m.data().clone();
            d.index_axis_mut(Axis(0), 1).fill(4.0);
            *m = FeatureMap::new(d).unwrap();
        }
        let p = BnParams::new(array![1.5, 2.0], array![0.0, 0.0], DEFAULT_EPS).unwrap();
        let (out, stats) = batch_norm_forward(&batch, &p).unwrap();
        assert_eq!(stats.var[1], 0.0);
        for m in &out {
            assert!(m.data().index_axis(Axis(0), 1).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn standard_normal_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<FeatureMap> = (0..64)
            .map(|_| FeatureMap::from_vec(3, 4, 4, (0..48).map(|_| rng.sample(StandardNormal)).collect()).unwrap())
            .collect();
        let p = BnParams::identity(3, DEFAULT_EPS);
        let (out, _) = batch_norm_forward(&batch, &p).unwrap();
        let stats = batch_stats(&out).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 0.05);
            assert!((stats.var[c] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 4, 2, 3, 2);
        let p = BnParams::new(array![0.0, 0.0], array![0.7, -1.25], DEFAULT_EPS).unwrap();
        let (out, _) = batch_norm_forward(&batch, &p).unwrap();
        for m in &out {
            assert!(m.data().index_axis(Axis(0), 0).iter().all(|&x| x == 0.7));
            assert!(m.data().index_axis(Axis(0), 1).iter().all(|&x| x == -1.25));
        }
    }

    #[test]
    fn output_moments_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 10, 3, 3, 3);
        let p = BnParams::new(array![2.0, -0.5, 1.0], array![0.1, 0.2, -3.0], DEFAULT_EPS).unwrap();
        let (out, stats) = batch_norm_forward(&batch, &p).unwrap();
        let got = batch_stats(&out).unwrap();
        for c in 0..3 {
            let want_std = p.gamma[c].abs() * stats.var[c].sqrt() / (stats.var[c] + p.eps).sqrt();
            assert!((got.mean[c] - p.beta[c]).abs() < 1e-9);
            assert!((got.var[c].sqrt() - want_std).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_errors() {
        let p = BnParams::identity(2, DEFAULT_EPS);
        assert!(matches!(batch_norm_forward(&[], &p), Err(Error::EmptyBatch)));
        let a = FeatureMap::from_vec(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let b = FeatureMap::from_vec(2, 2, 1, vec![1.0; 4]).unwrap();
        assert!(matches!(batch_norm_forward(&[a, b], &p), Err(Error::ShapeMismatch(_))));
        assert!(BnParams::new(array![1.0], array![0.0], 0.0).is_err());
    }

    #[test]
    fn weight_vector_cases() {
        let v = |g: Array1<f64>| bn_weight_vector(&BnParams::new(g.clone(), Array1::zeros(g.len()), 1e-5).unwrap(), BnWeightMode::Abs).unwrap();
        assert_eq!(v(array![1.0, 1.0, 1.0, 1.0]).to_vec(), vec![0.25; 4]);
        assert_eq!(v(array![3.0, 1.0]).to_vec(), vec![0.75, 0.25]);
        assert_eq!(v(array![-2.0, 2.0]).to_vec(), vec![0.5, 0.5]);
        let zero = BnParams::new(array![0.0, 0.0], array![0.0, 0.0], 1e-5).unwrap();
        assert!(matches!(bn_weight_vector(&zero, BnWeightMode::Abs), Err(Error::DegenerateGamma)));
        let cancel = BnParams::new(array![-2.0, 2.0], array![0.0, 0.0], 1e-5).unwrap();
        assert!(matches!(bn_weight_vector(&cancel, BnWeightMode::Signed), Err(Error::DegenerateGamma)));
    }

    #[test]
    fn weight_vector_is_probability_and_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = Array1::from_iter((0..7).map(|_| rng.random_range(-3.0..3.0)));
            let p = BnParams::new(g.clone(), Array1::zeros(7), 1e-5).unwrap();
            let v = bn_weight_vector(&p, BnWeightMode::Abs).unwrap();
            assert!(v.iter().all(|&x| x >= 0.0));
            assert!((v.sum() - 1.0).abs() < 1e-12);
            let s = rng.random_range(0.1..10.0);
            let p2 = BnParams::new(g * s, Array1::zeros(7), 1e-5).unwrap();
            let v2 = bn_weight_vector(&p2, BnWeightMode::Abs).unwrap();
            for (a, b) in v.iter().zip(v2.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_vector_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in [BnWeightMode::Abs, BnWeightMode::Signed] {
            let g = Array1::from_iter((0..5).map(|_| rng.random_range(0.2..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }));
            let up = Array1::from_iter((0..5).map(|_| rng.random_range(-1.0..1.0)));
            let f = |gamma: &Array1<f64>| {
                let p = BnParams::new(gamma.clone(), Array1::zeros(5), 1e-5).unwrap();
                bn_weight_vector(&p, mode).unwrap().dot(&up)
            };
            let analytic = bn_weight_vector_backward(&g, mode, &up).unwrap();
            for k in 0..5 {
                let mut plus = g.clone();
                let mut minus = g.clone();
                plus[k] += 1e-6;
                minus[k] -= 1e-6;
                let numeric = (f(&plus) - f(&minus)) / 2e-6;
                assert!((numeric - analytic[k]).abs() < 1e-6, "{mode}: {numeric} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn enhancement_identity_and_shift() {
        // every channel constant across the batch: BN output is beta
        let batch: Vec<FeatureMap> = (0..3)
            .map(|_| FeatureMap::from_vec(2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]).unwrap())
            .collect();
        let f_glo = array![0.3, -0.7];
        let zero_beta = BnParams::new(array![1.0, 3.0], array![0.0, 0.0], DEFAULT_EPS).unwrap();
        let e = enhance_global(&f_glo, &batch[0], &batch, &zero_beta, BnWeightMode::Abs).unwrap();
        assert_eq!(e, f_glo);

        let p = BnParams::new(array![1.0, 3.0], array![2.0, -4.0], DEFAULT_EPS).unwrap();
        let e = enhance_global(&f_glo, &batch[1], &batch, &p, BnWeightMode::Abs).unwrap();
        // v = [0.25, 0.75]
        assert!((e[0] - (0.3 + 0.25 * 2.0)).abs() < 1e-12);
        assert!((e[1] - (-0.7 + 0.75 * -4.0)).abs() < 1e-12);
    }

    #[test]
    fn enhancement_matches_step_by_step_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = random_batch(&mut rng, 5, 3, 2, 3);
        let p = BnParams::new(array![0.5, -1.5, 2.0], array![0.1, 0.0, -0.2], DEFAULT_EPS).unwrap();
        let target = &batch[2];
        let f_glo = adaptive_avg_pool(target);

        // hand composition over flat buffers
        let n = 5.0 * 6.0;
        let mut want = f_glo.clone();
        let gsum: f64 = p.gamma.iter().map(|g| g.abs()).sum();
        for c in 0..3 {
            let vals: Vec<f64> = batch.iter().flat_map(|m| m.data().index_axis(Axis(0), c).iter().copied().collect::<Vec<_>>()).collect();
            let mu = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let own: Vec<f64> = target.data().index_axis(Axis(0), c).iter().copied().collect();
            let bn_mean = own.iter().map(|x| p.gamma[c] * (x - mu) / (var + p.eps).sqrt() + p.beta[c]).sum::<f64>() / 6.0;
            want[c] += p.gamma[c].abs() / gsum * bn_mean;
        }
        let got = enhance_global(&f_glo, target, &batch, &p, BnWeightMode::Abs).unwrap();
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update() {
        let mut running = BatchStats::unit(2);
        let batch = BatchStats::new(array![1.0, 2.0], array![4.0, 0.0]).unwrap();
        running.update_running(&batch, 5, 0.1);
        assert!((running.mean[0] - 0.1).abs() < 1e-15);
        assert!((running.mean[1] - 0.2).abs() < 1e-15);
        assert!((running.var[0] - (0.9 + 0.1 * 4.0 * 1.25)).abs() < 1e-15);
        assert!((running.var[1] - 0.9).abs() < 1e-15);
    }
}
