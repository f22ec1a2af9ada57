//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use cmreid::alignment::{align_distance, brute_force_path, shortest_path_distance, DistanceMatrix};
use cmreid::evalkit::{
    cmc, cross_modal_split, evaluate_pipeline, mean_average_precision, mean_inverse_negative_penalty, protocol_run,
    DistanceMode, EmbeddingBank, Pipeline, Splitter,
};
use cmreid::formats::{
    decode_bank, encode_bank, flatten_stripes, format_metrics_table, write_loss_log, Checkpoint, TableRow,
};
use cmreid::losses::{LossConfig, LossTerm};
use cmreid::rerank::{ecn_rerank, EcnConfig};
use cmreid::toytrain::{init_model, synth_dataset, train, Mode, SynthDataset, ToyModel, TrainConfig};
use cmreid::Modality;
use common::{gradcheck_term, BatchDims};
use ndarray::{array, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1_shortest_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h = rng.random_range(2..=7);
        let d = Array2::from_shape_simple_fn((h, h), || rng.random_range(0.0..10.0));
        let mut m = DistanceMatrix::new(d).unwrap();
        let brute = brute_force_path(&m).unwrap();
        let dp = shortest_path_distance(&mut m);
        worst = worst.max((dp - brute).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(5),
        format!("1000 matrices, max |dp - brute| = {worst:.2e}, {elapsed:.2?}"),
    )
}

fn criterion_2_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = BatchDims { p: 3, k: 2, d: 6, parts: 3, dl: 4, classes: 5 };
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for term in LossTerm::ALL {
        let r = gradcheck_term(&mut rng, &dims, &cfg, term, 20, 1e-5, 1e-4);
        worst = worst.max(r.worst);
        lines.push(format!("{} {:.1e} ({} skipped)", term.name(), r.worst, r.skipped));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("20 points per term, worst relative error {worst:.2e}, {elapsed:.2?}; {}", lines.join(", ")),
    )
}

fn criterion_3_metrics() -> Outcome {
    let ap = mean_average_precision(array![[0.0, 1.0, 2.0, 3.0]].view(), &[1], &[1, 0, 1, 0]).unwrap();
    let inp = mean_inverse_negative_penalty(array![[0.0, 1.0, 2.0, 3.0, 4.0]].view(), &[1], &[1, 0, 2, 1, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut monotone = true;
    for _ in 0..100 {
        let g = rng.random_range(2..30);
        let q = rng.random_range(1..6);
        let d = Array2::from_shape_simple_fn((q, g), || rng.random::<f64>());
        let g_ids: Vec<usize> = (0..g).map(|_| rng.random_range(0..4)).collect();
        let q_ids: Vec<usize> = (0..q).map(|i| g_ids[i % g]).collect();
        let c = cmc(d.view(), &q_ids, &g_ids).unwrap();
        monotone &= c.windows(2).all(|w| w[0] <= w[1]) && c.iter().all(|v| (0.0..=1.0).contains(v));
    }
    let pass = (ap - 5.0 / 6.0).abs() <= 1e-12 && (inp - 0.5).abs() <= 1e-12 && monotone;
    outcome(pass, format!("AP = {ap:.12} (5/6), INP = {inp:.12} (0.5), cmc monotone on 100 rankings: {monotone}"))
}

fn end_to_end_config(seed: u64) -> TrainConfig {
    TrainConfig { lr_backbone: 0.002, lr_head: 0.02, lr_decay_every: 40, epochs: 50, seed, ..TrainConfig::default() }
}

/// 30 identities: the first 20 train, the last 10 are held out.
fn held_out_split(seed: u64) -> (SynthDataset, SynthDataset) {
    synth_dataset(30, 10, seed).unwrap().split_identities(20)
}

fn embed_bank(model: &ToyModel, data: &SynthDataset, enhanced: bool) -> EmbeddingBank {
    let images: Vec<_> = data.samples.iter().map(|s| &s.image).collect();
    let modality: Vec<_> = data.samples.iter().map(|s| s.modality).collect();
    let e = model.embed(&images, &modality).unwrap();
    EmbeddingBank::new(
        if enhanced { e.enhanced } else { e.global },
        data.samples.iter().map(|s| s.identity).collect(),
        modality,
        data.samples.iter().map(|s| s.camera).collect(),
    )
    .unwrap()
}

fn criterion_4_training(model_out: &mut Option<(ToyModel, SynthDataset)>) -> Outcome {
    let start = Instant::now();
    let (train_set, test_set) = held_out_split(1);
    let cfg = end_to_end_config(1);
    let (model, log) = train(init_model(&train_set, &cfg).unwrap(), &train_set, &cfg).unwrap();
    let bank = embed_bank(&model, &test_set, true);
    let (query, gallery) = cross_modal_split(&bank, Modality::Thermal);
    let r = evaluate_pipeline(&query, &gallery, &Pipeline::default()).unwrap();
    let means = log.epoch_means();
    let ratio = means[means.len() - 1] / means[0];
    let elapsed = start.elapsed();
    *model_out = Some((model, test_set));
    outcome(
        r.rank(1) >= 0.9 && r.map >= 0.8 && ratio <= 0.5 && elapsed < Duration::from_secs(120),
        format!(
            "held-out thermal->visible rank-1 {:.3}, mAP {:.3}, mINP {:.3}; final/first epoch loss {:.3} ({:.2} -> {:.2}), {elapsed:.2?}",
            r.rank(1),
            r.map,
            r.minp,
            ratio,
            means[0],
            means[means.len() - 1]
        ),
    )
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

fn criterion_5_alignment(model: &ToyModel, test_set: &SynthDataset) -> Outcome {
    let images: Vec<_> = test_set.samples.iter().map(|s| &s.image).collect();
    let modality: Vec<_> = test_set.samples.iter().map(|s| s.modality).collect();
    let cache = model.forward(&images, &modality, Mode::Eval).unwrap();
    let maps: Vec<_> = (0..images.len()).map(|i| cache.feature_map(i).unwrap()).collect();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for (i, a) in test_set.samples.iter().enumerate() {
        for (j, b) in test_set.samples.iter().enumerate() {
            if a.modality == Modality::Thermal && b.modality == Modality::Visible {
                let d = align_distance(&maps[i], &maps[j], 3).unwrap();
                if a.identity == b.identity {
                    same.push(d);
                } else {
                    cross.push(d);
                }
            }
        }
    }
    let (m_same, s_same) = mean_std(&same);
    let (m_cross, _) = mean_std(&cross);
    let gap = m_cross - m_same;

    // Table-3-shaped report on aligned stripe features
    let stripes = EmbeddingBank::new(
        flatten_stripes(&cache.outputs.stripes),
        test_set.samples.iter().map(|s| s.identity).collect(),
        modality.clone(),
        test_set.samples.iter().map(|s| s.camera).collect(),
    )
    .unwrap();
    let (query, gallery) = cross_modal_split(&stripes, Modality::Thermal);
    let mut rows = Vec::new();
    for parts in [1usize, 3] {
        let bank_for = |b: &EmbeddingBank| {
            if parts == 3 {
                b.clone()
            } else {
                // one stripe: the element-wise max over the three stripes
                let d = b.dim() / 3;
                let v = Array2::from_shape_fn((b.len(), d), |(r, c)| {
                    (0..3).map(|p| b.vectors[[r, p * d + c]]).fold(f64::NEG_INFINITY, f64::max)
                });
                EmbeddingBank::new(v, b.identity.clone(), b.modality.clone(), b.camera.clone()).unwrap()
            }
        };
        let pipeline = Pipeline { distance: DistanceMode::Aligned { parts }, ..Pipeline::default() };
        let p = protocol_run(&bank_for(&query), &bank_for(&gallery), &Splitter::default(), &pipeline, 1, 0).unwrap();
        rows.push(TableRow { label: parts.to_string(), mean: p.mean, std: p.std });
    }
    let populated = rows.len() == 2 && rows.iter().all(|r| r.mean.values().iter().all(|v| v.is_finite()));
    print!("{}", format_metrics_table("parts", &rows));
    outcome(
        gap >= 2.0 * s_same && populated,
        format!(
            "parts=3 same-id {m_same:.3} ± {s_same:.3}, cross-id {m_cross:.3}, gap = {:.2} x std; table rows {}",
            gap / s_same,
            rows.len()
        ),
    )
}

/// Mean distance between class centroids over mean distance of samples to
/// their own centroid.
fn separation_ratio(v: &Array2<f64>, ids: &[usize]) -> f64 {
    let mut classes = ids.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let centroids: Vec<_> = classes
        .iter()
        .map(|&c| {
            let rows: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == c).collect();
            v.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap()
        })
        .collect();
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let mut inter = Vec::new();
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter.push(dist(centroids[i].view(), centroids[j].view()));
        }
    }
    let intra: Vec<f64> = ids
        .iter()
        .enumerate()
        .map(|(i, c)| dist(v.row(i), centroids[classes.binary_search(c).unwrap()].view()))
        .collect();
    mean_std(&inter).0 / mean_std(&intra).0
}

fn criterion_6_enhancement(first: &(ToyModel, SynthDataset)) -> Outcome {
    let mut ratios = Vec::new();
    for seed in 1..=10u64 {
        let trained;
        let (model, test_set) = if seed == 1 {
            (&first.0, &first.1)
        } else {
            let (train_set, test_set) = held_out_split(seed);
            let cfg = end_to_end_config(seed);
            trained = (train(init_model(&train_set, &cfg).unwrap(), &train_set, &cfg).unwrap().0, test_set);
            (&trained.0, &trained.1)
        };
        let ids: Vec<usize> = test_set.samples.iter().map(|s| s.identity).collect();
        let glo = separation_ratio(&embed_bank(model, test_set, false).vectors, &ids);
        let eglo = separation_ratio(&embed_bank(model, test_set, true).vectors, &ids);
        ratios.push(eglo / glo);
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[4] + sorted[5]) / 2.0;
    outcome(
        median >= 0.95,
        format!(
            "median enhanced/global separation ratio {median:.4} over 10 seeds (>= 1.0: {}; range {:.4}..{:.4})",
            median >= 1.0,
            sorted[0],
            sorted[9]
        ),
    )
}

fn noisy_bank(rng: &mut ChaCha8Rng, centers: &Array2<f64>, per_id: usize, sigma: f64, m: Modality) -> EmbeddingBank {
    let (ids, dim) = centers.dim();
    let n = ids * per_id;
    let v = Array2::from_shape_fn((n, dim), |(i, k)| {
        centers[[i / per_id, k]] + sigma * rng.sample::<f64, _>(StandardNormal)
    });
    EmbeddingBank::new(v, (0..n).map(|i| i / per_id).collect(), vec![m; n], vec![0; n]).unwrap()
}

fn criterion_7_rerank() -> Outcome {
    let mut wins = 0;
    let mut gains = Vec::new();
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + trial);
        let centers = Array2::from_shape_simple_fn((10, 16), || rng.sample::<f64, _>(StandardNormal));
        let gallery = noisy_bank(&mut rng, &centers, 8, 1.0, Modality::Visible);
        let query = noisy_bank(&mut rng, &centers, 4, 1.0, Modality::Thermal);
        let plain = evaluate_pipeline(&query, &gallery, &Pipeline::default()).unwrap().map;
        let reranked = Pipeline { rerank: Some(EcnConfig::default()), ..Pipeline::default() };
        let ecn = evaluate_pipeline(&query, &gallery, &reranked).unwrap().map;
        if ecn >= plain {
            wins += 1;
        }
        gains.push(ecn - plain);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pts = Array2::from_shape_simple_fn((15, 4), || rng.sample::<f64, _>(StandardNormal));
    let bank = EmbeddingBank::new(pts, (0..15).map(|i| i % 5).collect(), vec![Modality::Visible; 15], vec![0; 15]).unwrap();
    let q = bank.select(&(0..5).collect::<Vec<_>>());
    let g = bank.select(&(5..15).collect::<Vec<_>>());
    let perm = [3usize, 9, 0, 7, 1, 8, 2, 6, 4, 5];
    let g_p = g.select(&perm);
    let dist = |a: &EmbeddingBank, b: &EmbeddingBank| cmreid::evalkit::pairwise_distances(a, b).unwrap();
    let cfg = EcnConfig::default();
    let base = ecn_rerank(dist(&q, &g).view(), dist(&q, &q).view(), dist(&g, &g).view(), &cfg).unwrap();
    let moved = ecn_rerank(dist(&q, &g_p).view(), dist(&q, &q).view(), dist(&g_p, &g_p).view(), &cfg).unwrap();
    let equivariant = (0..5).all(|i| (0..10).all(|j| moved[[i, j]] == base[[i, perm[j]]]));
    let (mean_gain, _) = mean_std(&gains);
    outcome(
        wins >= 8 && equivariant,
        format!("ECN mAP >= plain in {wins}/10 trials (mean gain {mean_gain:+.4}); gallery permutation equivariance exact: {equivariant}"),
    )
}

fn criterion_8_determinism() -> Outcome {
    let data = synth_dataset(4, 3, 8).unwrap();
    let cfg = TrainConfig { p: 2, embed_dim: 16, local_dim: 8, epochs: 3, lr_backbone: 0.002, lr_head: 0.02, seed: 5, ..TrainConfig::default() };
    let run = || {
        let (model, log) = train(init_model(&data, &cfg).unwrap(), &data, &cfg).unwrap();
        let mut csv = Vec::new();
        write_loss_log(&mut csv, &log).unwrap();
        let ckpt = serde_json::to_vec(&Checkpoint::from_model(&model)).unwrap();
        (csv, ckpt)
    };
    let (log_a, ckpt_a) = run();
    let (log_b, ckpt_b) = run();
    let same = log_a == log_b && ckpt_a == ckpt_b;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = Array2::from_shape_simple_fn((37, 11), || f32::from_bits(rng.random::<u32>() & 0xbfff_ffff) as f64);
    let bytes = encode_bank(&m).unwrap();
    let back = decode_bank(&bytes).unwrap();
    let exact = back.dim() == m.dim() && m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    let again = encode_bank(&back).unwrap() == bytes;
    outcome(
        same && exact && again,
        format!("identical logs and checkpoints: {same}; feature bank round trip bit-exact: {}", exact && again),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        // the raw handle bypasses the harness capture so the summary always shows
        let line = format!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        let _ = writeln!(std::io::stderr(), "{line}");
        results.push((n, o));
    };
    report(1, criterion_1_shortest_path());
    report(2, criterion_2_gradients());
    report(3, criterion_3_metrics());
    let mut trained = None;
    report(4, criterion_4_training(&mut trained));
    let trained = trained.expect("criterion 4 trains the shared model");
    report(5, criterion_5_alignment(&trained.0, &trained.1));
    report(6, criterion_6_enhancement(&trained));
    report(7, criterion_7_rerank());
    report(8, criterion_8_determinism());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
