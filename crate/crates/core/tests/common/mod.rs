#![allow(dead_code)]

use cmreid::losses::{kink_margin, term_backward, term_value, LabeledBatch, LossConfig, LossGradients, LossTerm};
use cmreid::Modality;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn pk_labels(p: usize, k: usize) -> (Vec<usize>, Vec<Modality>) {
    let mut ids = Vec::new();
    let mut mods = Vec::new();
    for i in 0..p {
        for m in [Modality::Visible, Modality::Thermal] {
            for _ in 0..k {
                ids.push(i);
                mods.push(m);
            }
        }
    }
    (ids, mods)
}

pub struct BatchDims {
    pub p: usize,
    pub k: usize,
    pub d: usize,
    pub parts: usize,
    pub dl: usize,
    pub classes: usize,
}

pub fn random_batch(rng: &mut ChaCha8Rng, dims: &BatchDims, scale: f64) -> LabeledBatch {
    let (identity, modality) = pk_labels(dims.p, dims.k);
    let n = identity.len();
    let mut draw = || scale * rng.random_range(-1.0..1.0);
    LabeledBatch {
        global: Array2::from_shape_simple_fn((n, dims.d), &mut draw),
        enhanced: Array2::from_shape_simple_fn((n, dims.d), &mut draw),
        stripes: Array3::from_shape_simple_fn((n, dims.parts, dims.dl), &mut draw),
        logits_global: Array2::from_shape_simple_fn((n, dims.classes), &mut draw),
        logits_enhanced: Array2::from_shape_simple_fn((n, dims.classes), &mut draw),
        logits_local: Array3::from_shape_simple_fn((dims.parts, n, dims.classes), &mut draw),
        identity,
        modality,
    }
}

/// Mutable views of every differentiable batch field, in a fixed order.
fn fields(b: &mut LabeledBatch) -> [&mut [f64]; 6] {
    [
        b.global.as_slice_mut().unwrap(),
        b.enhanced.as_slice_mut().unwrap(),
        b.stripes.as_slice_mut().unwrap(),
        b.logits_global.as_slice_mut().unwrap(),
        b.logits_enhanced.as_slice_mut().unwrap(),
        b.logits_local.as_slice_mut().unwrap(),
    ]
}

pub fn flatten(g: &LossGradients) -> Vec<f64> {
    [
        g.global.as_slice().unwrap(),
        g.enhanced.as_slice().unwrap(),
        g.stripes.as_slice().unwrap(),
        g.logits_global.as_slice().unwrap(),
        g.logits_enhanced.as_slice().unwrap(),
        g.logits_local.as_slice().unwrap(),
    ]
    .concat()
}

/// Central differences of one term with respect to every batch value.
pub fn numeric_gradient(batch: &LabeledBatch, cfg: &LossConfig, term: LossTerm, h: f64) -> Vec<f64> {
    let mut work = batch.clone();
    let lens: Vec<usize> = fields(&mut work).iter().map(|f| f.len()).collect();
    let mut out = Vec::new();
    for (f, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let orig = fields(&mut work)[f][i];
            fields(&mut work)[f][i] = orig + h;
            let plus = term_value(&work, cfg, term).unwrap();
            fields(&mut work)[f][i] = orig - h;
            let minus = term_value(&work, cfg, term).unwrap();
            fields(&mut work)[f][i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

/// `|a - n| / max(|a|, |n|)` over the whole gradient vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Draws random batches until `points` non-degenerate ones have been
/// compared: far from every kink (margin at least `min_margin`) and with a
/// non-zero analytic gradient.
pub fn gradcheck_term(
    rng: &mut ChaCha8Rng,
    dims: &BatchDims,
    cfg: &LossConfig,
    term: LossTerm,
    points: usize,
    h: f64,
    min_margin: f64,
) -> GradCheck {
    let mut report = GradCheck { checked: 0, skipped: 0, worst: 0.0 };
    while report.checked < points {
        assert!(report.skipped < 50 * points, "{term:?}: too many degenerate draws");
        let batch = random_batch(rng, dims, 1.0);
        let analytic = flatten(&term_backward(&batch, cfg, term).unwrap());
        if kink_margin(&batch, cfg, term).unwrap() < min_margin || analytic.iter().all(|&g| g == 0.0) {
            report.skipped += 1;
            continue;
        }
        let numeric = numeric_gradient(&batch, cfg, term, h);
        report.worst = report.worst.max(relative_error(&analytic, &numeric));
        report.checked += 1;
    }
    report
}
