//! Synthetic bimodal "images" and PK batch sampling.
//!
//! Every identity owns a prototype tensor made of a few horizontal regions
//! (think head / torso / legs), each with its own channel colour plus a
//! per-pixel texture. A visible sample applies the visible channel-mixing
//! transform to the prototype, a thermal sample applies a different one, and
//! both add pixel noise and a per-sample channel offset standing in for
//! augmentation jitter.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;
use crate::Modality;

const VISIBLE_CAMERAS: [u32; 4] = [1, 2, 4, 5];
const THERMAL_CAMERAS: [u32; 2] = [3, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: FeatureMap,
    pub identity: usize,
    pub modality: Modality,
    pub camera: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_ids: usize,
    /// Samples per identity per modality.
    pub per_id: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Number of horizontal colour regions per prototype.
    pub regions: usize,
    /// Scale of the region colours.
    pub separation: f64,
    /// Scale of the per-pixel prototype texture.
    pub texture: f64,
    /// Per-element sample noise.
    pub noise: f64,
    /// Per-sample, per-channel additive offset.
    pub jitter: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(num_ids: usize, per_id: usize, seed: u64) -> Self {
        Self {
            num_ids,
            per_id,
            channels: 6,
            height: 12,
            width: 2,
            regions: 3,
            separation: 1.0,
            texture: 0.3,
            noise: 0.25,
            jitter: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::NeedTwoIdentities(self.num_ids));
        }
        if self.per_id < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 samples per identity and modality, got {}",
                self.per_id
            )));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if self.regions == 0 || self.regions > self.height {
            return Err(Error::InvalidInput(format!(
                "regions must be in 1..={}, got {}",
                self.height, self.regions
            )));
        }
        Ok(())
    }
}

/// A labelled bimodal dataset of same-shape images.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub shape: (usize, usize, usize),
    pub samples: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn new(shape: (usize, usize, usize), samples: Vec<SynthSample>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| s.image.shape() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "sample shape {:?} differs from dataset shape {shape:?}",
                bad.image.shape()
            )));
        }
        Ok(Self { shape, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Splits into samples whose identity is among the first `count` sorted
    /// identities and the rest.
    pub fn split_identities(&self, count: usize) -> (SynthDataset, SynthDataset) {
        let ids = self.identities();
        let cut = ids.get(count).copied().unwrap_or(usize::MAX);
        let (a, b): (Vec<_>, Vec<_>) = self.samples.iter().cloned().partition(|s| s.identity < cut);
        (
            SynthDataset { shape: self.shape, samples: a },
            SynthDataset { shape: self.shape, samples: b },
        )
    }

    pub fn of_modality(&self, m: Modality) -> SynthDataset {
        SynthDataset {
            shape: self.shape,
            samples: self.samples.iter().filter(|s| s.modality == m).cloned().collect(),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Channel-mixing transform applied per pixel for one modality.
struct ModalityTransform {
    mix: Array2<f64>,
    bias: Array1<f64>,
}

impl ModalityTransform {
    fn random(rng: &mut ChaCha8Rng, channels: usize, identity_weight: f64, spread: f64) -> Self {
        let scale = spread / (channels as f64).sqrt();
        let mix = Array2::from_shape_fn((channels, channels), |(i, j)| {
            let eye = if i == j { identity_weight } else { 0.0 };
            eye + scale * normal(rng)
        });
        let bias = Array1::from_shape_fn(channels, |_| 0.5 * normal(rng));
        Self { mix, bias }
    }
}

/// Generates `num_ids * per_id` samples per modality with default image
/// settings; identical seeds give identical datasets.
pub fn synth_dataset(num_ids: usize, per_id: usize, seed: u64) -> Result<SynthDataset> {
    synth_with(&SynthConfig::new(num_ids, per_id, seed))
}

pub fn synth_with(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let visible = ModalityTransform::random(&mut rng, c, 1.0, 0.4);
    let thermal = ModalityTransform::random(&mut rng, c, 0.0, 1.2);
    let region_of = |row: usize| row * cfg.regions / h;

    let mut samples = Vec::with_capacity(2 * cfg.num_ids * cfg.per_id);
    for identity in 0..cfg.num_ids {
        let colours = Array2::from_shape_fn((cfg.regions, c), |_| cfg.separation * normal(&mut rng));
        let prototype = Array3::from_shape_fn((c, h, w), |(ch, row, _)| {
            colours[[region_of(row), ch]] + cfg.texture * normal(&mut rng)
        });
        for (modality, transform, cams) in [
            (Modality::Visible, &visible, &VISIBLE_CAMERAS[..]),
            (Modality::Thermal, &thermal, &THERMAL_CAMERAS[..]),
        ] {
            for s in 0..cfg.per_id {
                let offset = Array1::from_shape_fn(c, |_| cfg.jitter * normal(&mut rng));
                let mut img = Array3::<f64>::zeros((c, h, w));
                for row in 0..h {
                    for col in 0..w {
                        for out in 0..c {
                            let mut acc = transform.bias[out] + offset[out];
                            for inp in 0..c {
                                acc += transform.mix[[out, inp]] * prototype[[inp, row, col]];
                            }
                            img[[out, row, col]] = acc + cfg.noise * normal(&mut rng);
                        }
                    }
                }
                samples.push(SynthSample {
                    image: FeatureMap::new(img)?,
                    identity,
                    modality,
                    camera: cams[s % cams.len()],
                });
            }
        }
    }
    SynthDataset::new((c, h, w), samples)
}

/// Per-identity, per-modality sample index used for PK sampling.
#[derive(Debug, Clone)]
pub struct PkSampler {
    cells: BTreeMap<usize, [Vec<usize>; 2]>,
}

impl PkSampler {
    pub fn new(samples: &[SynthSample]) -> Self {
        let mut cells: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            cells.entry(s.identity).or_default()[s.modality as usize].push(i);
        }
        Self { cells }
    }

    pub fn num_identities(&self) -> usize {
        self.cells.len()
    }

    /// Returns `2PK` dataset indices: for each of `p` distinct identities,
    /// `k` visible then `k` thermal samples, drawn without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        for (&identity, cell) in &self.cells {
            for (m, members) in cell.iter().enumerate() {
                if members.len() < k {
                    return Err(Error::InsufficientSamples {
                        identity,
                        modality: if m == 0 { "visible" } else { "thermal" },
                        available: members.len(),
                        needed: k,
                    });
                }
            }
        }
        if p > self.cells.len() {
            return Err(Error::InvalidInput(format!(
                "P = {p} exceeds the {} identities available",
                self.cells.len()
            )));
        }
        let ids: Vec<&[Vec<usize>; 2]> = self.cells.values().collect();
        let mut out = Vec::with_capacity(2 * p * k);
        for pick in index::sample(rng, ids.len(), p) {
            for members in ids[pick] {
                out.extend(index::sample(rng, members.len(), k).into_iter().map(|i| members[i]));
            }
        }
        Ok(out)
    }
}

pub fn pk_sample<R: Rng + ?Sized>(
    dataset: &SynthDataset,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    PkSampler::new(&dataset.samples).sample(p, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_dataset(4, 3, 9).unwrap();
        let b = synth_dataset(4, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(4, 3, 10).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), 24);
        assert_eq!(a.of_modality(Modality::Thermal).len(), 12);
    }

    #[test]
    fn zero_noise_cells_are_identical() {
        let mut cfg = SynthConfig::new(3, 4, 1);
        cfg.noise = 0.0;
        cfg.jitter = 0.0;
        let d = synth_with(&cfg).unwrap();
        for id in 0..3 {
            for m in [Modality::Visible, Modality::Thermal] {
                let cell: Vec<_> = d.samples.iter().filter(|s| s.identity == id && s.modality == m).collect();
                assert_eq!(cell.len(), 4);
                assert!(cell.iter().all(|s| s.image == cell[0].image));
            }
        }
    }

    #[test]
    fn nearest_centroid_separates_identities() {
        let mut cfg = SynthConfig::new(10, 8, 2);
        cfg.noise = 0.05;
        cfg.jitter = 0.02;
        let d = synth_with(&cfg).unwrap();
        // centroid per (identity, modality) cell
        let mut sums: BTreeMap<(usize, Modality), (Array3<f64>, usize)> = BTreeMap::new();
        for s in &d.samples {
            let e = sums.entry((s.identity, s.modality)).or_insert((Array3::zeros(d.shape), 0));
            e.0 += s.image.data();
            e.1 += 1;
        }
        let centroids: Vec<((usize, Modality), Array3<f64>)> =
            sums.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect();
        let mut correct = 0;
        for s in &d.samples {
            let best = centroids
                .iter()
                .filter(|((_, m), _)| *m == s.modality)
                .min_by(|a, b| {
                    let da = (&a.1 - s.image.data()).mapv(|x| x * x).sum();
                    let db = (&b.1 - s.image.data()).mapv(|x| x * x).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best.0 .0 == s.identity {
                correct += 1;
            }
        }
        assert!(correct as f64 / d.len() as f64 >= 0.99);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(synth_dataset(1, 5, 0).is_err());
        assert!(synth_dataset(3, 1, 0).is_err());
    }

    #[test]
    fn pk_batch_layout() {
        let d = synth_dataset(5, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = pk_sample(&d, 2, 2, &mut rng).unwrap();
        assert_eq!(idx.len(), 8);
        let ids: BTreeSet<usize> = idx.iter().map(|&i| d.samples[i].identity).collect();
        assert_eq!(ids.len(), 2);
        for &id in &ids {
            for m in [Modality::Visible, Modality::Thermal] {
                let cell: BTreeSet<usize> =
                    idx.iter().copied().filter(|&i| d.samples[i].identity == id && d.samples[i].modality == m).collect();
                assert_eq!(cell.len(), 2);
            }
        }
        // K equal to the cell size returns the whole cell
        let idx = pk_sample(&d, 5, 3, &mut rng).unwrap();
        let uniq: BTreeSet<usize> = idx.iter().copied().collect();
        assert_eq!(uniq.len(), d.len());
        assert!(matches!(pk_sample(&d, 2, 4, &mut rng), Err(Error::InsufficientSamples { .. })));
        assert!(pk_sample(&d, 6, 1, &mut rng).is_err());
    }

    #[test]
    fn identity_frequency_is_binomial() {
        let d = synth_dataset(10, 2, 5).unwrap();
        let sampler = PkSampler::new(&d.samples);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 10_000;
        let (p, n) = (3usize, 10usize);
        let mut hits = [0usize; 10];
        for _ in 0..draws {
            let idx = sampler.sample(p, 1, &mut rng).unwrap();
            let ids: BTreeSet<usize> = idx.iter().map(|&i| d.samples[i].identity).collect();
            for id in ids {
                hits[id] += 1;
            }
        }
        let q = p as f64 / n as f64;
        let mean = draws as f64 * q;
        let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() <= 3.0 * sigma, "{h} vs {mean} +- {sigma}");
        }
    }

    #[test]
    fn split_by_identity() {
        let d = synth_dataset(6, 2, 3).unwrap();
        let (a, b) = d.split_identities(4);
        assert_eq!(a.identities(), vec![0, 1, 2, 3]);
        assert_eq!(b.identities(), vec![4, 5]);
    }
}
