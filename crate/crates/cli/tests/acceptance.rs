//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use protoret::descriptor::{apply_whitening, embed_pooled, fit_whitening, l2_normalize, DEFAULT_WHITEN_EPS};
use protoret::eval::{average_precision, evaluate, match_detections, nms, pr_curve, recall_at_k, Labeled, PrPoint};
use protoret::pipeline::{
    dataset_samples, ground_truth_proposals, logo_samples, prototypes_from_logos, run_pipeline, Embedder,
    FeaturizerBackend, PipelineConfig, ToyFeaturizer, DEFAULT_THRESHOLD, TOY_CHANNELS,
};
use protoret::synth::{assets, generate_dataset, resolve, SynthConfig};
use protoret::train::{hinge_argument, is_active, loss_and_grad, train_head, triplet_loss, Mining, TrainConfig, TrainingSample};
use protoret::{AffineHead, BBox, Descriptor, Detection, Exec, GroundTruth, Pooling, Prototype, PrototypeIndex};

/// Outcome of one criterion: pass flag and a one-line measurement summary.
type Outcome = (bool, String);

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// Criterion 1

fn triplet_bounds() -> Outcome {
    const MARGINS: [f64; 5] = [-3.9, 0.2, 0.6, 0.8, 4.0];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut triplets: Vec<[Vec<f64>; 3]> = (0..10_000)
        .map(|_| [unit(&mut rng, 16), unit(&mut rng, 16), unit(&mut rng, 16)])
        .collect();
    let q = unit(&mut rng, 16);
    let neg: Vec<f64> = q.iter().map(|x| -x).collect();
    triplets.push([q.clone(), q.clone(), neg.clone()]);
    triplets.push([q.clone(), neg, q]);

    let mut violations = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for [a, p, n] in &triplets {
        let diff = sq(a, p) - sq(a, n);
        lo = lo.min(diff);
        hi = hi.max(diff);
        if !(-4.0 - 1e-12..=4.0 + 1e-12).contains(&diff) {
            violations += 1;
        }
        let mut was_active = false;
        for m in MARGINS {
            let l = triplet_loss(a, p, n, m).unwrap();
            let arg = hinge_argument(a, p, n, m).unwrap();
            if l < 0.0 || l > m + 4.0 + 1e-12 || (arg - m - diff).abs() > 1e-12 {
                violations += 1;
            }
            let active = is_active(a, p, n, m).unwrap();
            if was_active && !active {
                violations += 1;
            }
            was_active = active;
        }
    }
    let elapsed = start.elapsed();
    (
        violations == 0 && elapsed < Duration::from_secs(5),
        format!(
            "{} triplets x 5 margins, {violations} violations, difference range [{lo:.4}, {hi:.4}], {elapsed:.2?} (limit 5 s)",
            triplets.len()
        ),
    )
}

// Criterion 2

fn random_head(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> AffineHead {
    let s = 1.0 / (in_dim as f64).sqrt();
    let w = (0..in_dim * out_dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
    let b = (0..out_dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    AffineHead::new(in_dim, out_dim, w, b).unwrap()
}

fn head_loss(head: &AffineHead, q: &[f64], p: &[f64], n: &[f64], m: f64) -> f64 {
    let e = |v: &[f64]| embed_pooled(head, &Descriptor::new(v.to_vec())).unwrap().into_inner();
    triplet_loss(&e(q), &e(p), &e(n), m).unwrap()
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-6;
    const MARGIN: f64 = 0.6;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 200 {
        let in_dim = [8, 32][checked % 2];
        let out_dim = [8, 32][(checked / 2) % 2];
        let mut head = random_head(&mut rng, in_dim, out_dim);
        let (q, p, n) = (unit(&mut rng, in_dim), unit(&mut rng, in_dim), unit(&mut rng, in_dim));
        let (loss, grad) = loss_and_grad(&head, &q, &p, &n, MARGIN).unwrap();
        // Off the hinge.
        if loss < 1e-3 {
            continue;
        }
        let analytic: Vec<f64> = grad.weights().iter().chain(grad.bias()).copied().collect();
        let params = head.params();
        let mut numeric = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut shifted = params.clone();
            shifted[i] = params[i] + H;
            head.set_params(&shifted).unwrap();
            let up = head_loss(&head, &q, &p, &n, MARGIN);
            shifted[i] = params[i] - H;
            head.set_params(&shifted).unwrap();
            let down = head_loss(&head, &q, &p, &n, MARGIN);
            numeric.push((up - down) / (2.0 * H));
        }
        head.set_params(&params).unwrap();
        let err = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(1e-12, f64::max);
        worst = worst.max(err / scale);
        checked += 1;
    }
    let elapsed = start.elapsed();
    (
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{checked} active triplets, dims {{8,32}}x{{8,32}}, max relative error {worst:.2e} (limit 1e-4, relative to the largest gradient component), {elapsed:.2?} (limit 30 s)"
        ),
    )
}

// Criterion 3

fn whitening() -> Outcome {
    const D: usize = 16;
    const N: usize = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mix: Vec<f64> = (0..D * D).map(|_| rng.sample(StandardNormal)).collect();
    let scales: Vec<f64> = (0..D).map(|i| 0.1 * 30f64.powf(i as f64 / (D - 1) as f64)).collect();
    let offset: Vec<f64> = (0..D).map(|_| rng.random_range(-2.0..2.0)).collect();
    let samples: Vec<Descriptor> = (0..N)
        .map(|_| {
            let z: Vec<f64> = (0..D).map(|j| scales[j] * rng.sample::<f64, _>(StandardNormal)).collect();
            Descriptor::new(
                (0..D)
                    .map(|i| offset[i] + (0..D).map(|j| mix[i * D + j] * z[j]).sum::<f64>())
                    .collect(),
            )
        })
        .collect();
    let t = fit_whitening(&samples, DEFAULT_WHITEN_EPS).unwrap();
    let white: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| apply_whitening(&t, s).unwrap().into_inner())
        .collect();
    let k = t.out_dim();
    let mean: Vec<f64> = (0..k).map(|i| white.iter().map(|w| w[i]).sum::<f64>() / N as f64).collect();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let c = white.iter().map(|w| (w[i] - mean[i]) * (w[j] - mean[j])).sum::<f64>() / (N - 1) as f64;
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((c - target).abs());
        }
    }
    (
        k == D && worst < 1e-6,
        format!("d = {D}, n = {N}, kept {k} dims, max |cov - I| = {worst:.2e} (limit 1e-6)"),
    )
}

// Criterion 4

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.width() * a.height() + b.width() * b.height() - inter)
}

fn oracle_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap()
            .then(da.bbox.to_array().partial_cmp(&db.bbox.to_array()).unwrap())
            .then(a.cmp(&b))
    });
    order
}

fn oracle_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in oracle_order(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.image_id == d.image_id && k.class_id == d.class_id && oracle_iou(&k.bbox, &d.bbox) >= thr
        });
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

fn oracle_match(dets: &[Detection], truths: &[GroundTruth], thr: f64) -> Vec<Labeled> {
    let mut used = vec![false; truths.len()];
    oracle_order(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, t) in truths.iter().enumerate() {
                if used[g] || t.image_id != d.image_id || t.class_id != d.class_id {
                    continue;
                }
                let o = oracle_iou(&d.bbox, &t.bbox);
                if o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            Labeled {
                index: i,
                score: d.score,
                true_positive: best.is_some(),
            }
        })
        .collect()
}

/// Each true positive adds `1/P` times the best precision at or after it.
fn oracle_ap(tp: &[bool], positives: usize) -> f64 {
    let precision: Vec<f64> = tp
        .iter()
        .scan(0usize, |hits, &t| {
            *hits += t as usize;
            Some(*hits as f64)
        })
        .enumerate()
        .map(|(i, h)| h / (i + 1) as f64)
        .collect();
    tp.iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(i, _)| precision[i..].iter().copied().fold(0.0, f64::max) / positives as f64)
        .sum()
}

fn grid_box(rng: &mut impl Rng) -> BBox {
    let x = rng.random_range(0..6) as f64;
    let y = rng.random_range(0..6) as f64;
    let w = rng.random_range(1..5) as f64;
    let h = rng.random_range(1..5) as f64;
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn grid_detections(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            image_id: ["a", "b"][rng.random_range(0..2)].into(),
            bbox: grid_box(rng),
            class_id: ["x", "y"][rng.random_range(0..2)].into(),
            score: rng.random_range(1..6) as f64 / 10.0,
            objectness: None,
        })
        .collect()
}

/// Dimension-8 unit vectors with four `±0.5` entries: every dot product is
/// a multiple of 0.25 and exact in f32, so ties are exact.
fn lattice_unit(rng: &mut impl Rng) -> Vec<f64> {
    let mut v = vec![0.0; 8];
    let mut placed = 0;
    while placed < 4 {
        let i = rng.random_range(0..8);
        if v[i] == 0.0 {
            v[i] = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
            placed += 1;
        }
    }
    v
}

fn index_instance(rng: &mut impl Rng) -> usize {
    let mut index = PrototypeIndex::new();
    let mut model: Vec<(String, String, Vec<f64>)> = Vec::new();
    let mut mismatches = 0;
    for _ in 0..60 {
        match rng.random_range(0..10) {
            0..=5 => {
                let class = format!("c{}", rng.random_range(0..8));
                let variant = format!("v{}", rng.random_range(0..3));
                let v = lattice_unit(rng);
                index.add(Prototype::new(&class, &variant, Descriptor::new(v.clone()))).unwrap();
                match model.iter_mut().find(|(c, w, _)| *c == class && *w == variant) {
                    Some(slot) => slot.2 = v,
                    None => model.push((class, variant, v)),
                }
            }
            6 => {
                let class = format!("c{}", rng.random_range(0..8));
                let variant = rng.random_bool(0.5).then(|| format!("v{}", rng.random_range(0..3)));
                let before = model.len();
                model.retain(|(c, w, _)| !(*c == class && variant.as_ref().is_none_or(|v| v == w)));
                if index.remove(&class, variant.as_deref()) != before - model.len() {
                    mismatches += 1;
                }
            }
            _ => {
                if model.is_empty() {
                    continue;
                }
                let q = lattice_unit(rng);
                let k = rng.random_range(1..8);
                let thr = [-1.0, 0.0, 0.25, 0.5][rng.random_range(0..4)];
                let mut expected: Vec<(String, String, f64)> = model
                    .iter()
                    .map(|(c, w, v)| (c.clone(), w.clone(), v.iter().zip(&q).map(|(a, b)| a * b).sum()))
                    .filter(|(_, _, s)| *s >= thr)
                    .collect();
                expected.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
                expected.truncate(k);
                let got: Vec<(String, String, f64)> = index
                    .query(&Descriptor::new(q), k, thr)
                    .unwrap()
                    .into_iter()
                    .map(|r| (r.class_id, r.variant_id, r.similarity))
                    .collect();
                if got != expected {
                    mismatches += 1;
                }
            }
        }
    }
    mismatches
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut nms_bad, mut match_bad, mut ap_bad, mut index_bad) = (0, 0, 0, 0);
    for _ in 0..100 {
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let n = rng.random_range(0..25);
        let dets = grid_detections(&mut rng, n);
        if nms(&dets, thr) != oracle_nms(&dets, thr) {
            nms_bad += 1;
        }

        let n = rng.random_range(1..12);
        let truths: Vec<GroundTruth> = grid_detections(&mut rng, n)
            .into_iter()
            .map(|d| GroundTruth {
                image_id: d.image_id,
                bbox: d.bbox,
                class_id: d.class_id,
            })
            .collect();
        if match_detections(&dets, &truths, thr) != oracle_match(&dets, &truths, thr) {
            match_bad += 1;
        }

        let tp: Vec<bool> = (0..rng.random_range(0..30)).map(|_| rng.random_bool(0.5)).collect();
        let positives = tp.iter().filter(|&&t| t).count() + rng.random_range(0..5);
        if positives > 0 {
            let labeled: Vec<Labeled> = tp
                .iter()
                .enumerate()
                .map(|(i, &t)| Labeled {
                    index: i,
                    score: 1.0,
                    true_positive: t,
                })
                .collect();
            let points: Vec<PrPoint> = pr_curve(&labeled, positives).unwrap();
            if (average_precision(&points) - oracle_ap(&tp, positives)).abs() > 1e-12 {
                ap_bad += 1;
            }
        }

        index_bad += index_instance(&mut rng);
    }
    (
        nms_bad + match_bad + ap_bad + index_bad == 0,
        format!(
            "100 randomized instances each with exact ties; mismatches: nms {nms_bad}, match {match_bad}, AP {ap_bad} (tol 1e-12), index query {index_bad}"
        ),
    )
}

// Criterion 5 and 6

const SYNTH_CLASSES: usize = 10;
const STAMPS_PER_CLASS: usize = 30;
const TRAIN_STAMPS: u64 = 20;

struct DeskRun {
    recall: [f64; 3],
    exact_recall: f64,
    exact_min_similarity: f64,
    map: f64,
    elapsed: Duration,
    six: Outcome,
}

fn embedder(head: AffineHead) -> Embedder {
    let mut e = Embedder::new(FeaturizerBackend::Toy(ToyFeaturizer::default()), head);
    e.pooling = Pooling::Rmac;
    e
}

fn build_index(logos: &Path, e: &Embedder) -> PrototypeIndex {
    let mut index = PrototypeIndex::new();
    for p in prototypes_from_logos(logos, e, Exec::Parallel).unwrap() {
        index.add(p).unwrap();
    }
    index
}

fn recall_at_1(index: &PrototypeIndex, e: &Embedder, test: &[TrainingSample]) -> f64 {
    let rankings: Vec<Vec<String>> = test
        .iter()
        .map(|s| {
            let q = e.embed_input(&s.input).unwrap();
            index.query(&q, 1, -1.0).unwrap().into_iter().map(|r| r.class_id).collect()
        })
        .collect();
    let truth: Vec<String> = test.iter().map(|s| s.class_id.clone()).collect();
    recall_at_k(&rankings, &truth, 1).unwrap()
}

fn desk_run(dir: &Path) -> DeskRun {
    let start = Instant::now();
    let (logos, backgrounds) = assets::write_demo_assets(&dir.join("assets"), SYNTH_CLASSES, 1, 20, 0).unwrap();
    let data = dir.join("data");
    let config = SynthConfig {
        seed: 2,
        per_class: STAMPS_PER_CLASS,
        ..SynthConfig::default()
    };
    let (records, _) = generate_dataset(&backgrounds, &logos, &config, &data).unwrap();

    let identity = embedder(AffineHead::identity(TOY_CHANNELS));
    let samples = dataset_samples(&data, &records, &identity, Exec::Parallel).unwrap();
    let (train, test): (Vec<_>, Vec<_>) = records
        .iter()
        .zip(samples)
        .partition(|(r, _)| r.sample % (STAMPS_PER_CLASS as u64) < TRAIN_STAMPS);
    let train: Vec<TrainingSample> = train
        .into_iter()
        .map(|(_, s)| s)
        .chain(logo_samples(&logos, &identity, Exec::Parallel).unwrap())
        .collect();
    let test: Vec<TrainingSample> = test.into_iter().map(|(_, s)| s).collect();

    let baseline = recall_at_1(&build_index(&logos, &identity), &identity, &test);
    let mut trained = Vec::new();
    for margin in [0.2, 0.6] {
        let config = TrainConfig {
            margin,
            learning_rate: 1e-3,
            epochs: 300,
            mining: Mining::Random,
            seed: 3,
            ..TrainConfig::default()
        };
        let (head, _) = train_head(&train, &config).unwrap();
        let e = embedder(head);
        let index = build_index(&logos, &e);
        trained.push((recall_at_1(&index, &e, &test), e, index));
    }
    let (_, e, mut index) = trained.pop().unwrap();
    let recall_06 = recall_at_1(&index, &e, &test);
    let recall_02 = trained[0].0;

    let mut exact_hits = 0usize;
    let mut exact_min_similarity = f64::INFINITY;
    let prototypes: Vec<Prototype> = index.iter().collect();
    for p in &prototypes {
        let path = resolve(logos.parent().unwrap(), &p.metadata["path"]);
        let img = protoret::synth::load_png(&path).unwrap();
        let full = BBox::new(0.0, 0.0, img.width() as f64, img.height() as f64).unwrap();
        let q = e.describe("logo", Some(&img), &full).unwrap();
        let best = &index.query(&q, 1, -1.0).unwrap()[0];
        exact_hits += (best.class_id == p.class_id) as usize;
        exact_min_similarity = exact_min_similarity.min(best.similarity);
    }

    let proposals = ground_truth_proposals(&records);
    let pipeline = PipelineConfig {
        top_n: None,
        threshold: DEFAULT_THRESHOLD,
        exec: Exec::Parallel,
    };
    let (before, _) = run_pipeline(&data, &proposals, &e, &index, &pipeline).unwrap();
    let truths: Vec<GroundTruth> = records
        .iter()
        .map(|r| GroundTruth {
            image_id: r.image.clone(),
            bbox: r.bbox,
            class_id: r.class.clone(),
        })
        .collect();
    let map = evaluate(&before, &truths, 0.5, false).unwrap().map;
    let elapsed = start.elapsed();

    let target = prototypes
        .iter()
        .map(|p| &p.class_id)
        .max_by_key(|c| before.iter().filter(|d| &d.class_id == *c).count())
        .unwrap()
        .clone();
    let had = before.iter().filter(|d| d.class_id == target).count();
    let saved: Vec<Prototype> = prototypes.iter().filter(|p| p.class_id == target).cloned().collect();
    index.remove(&target, None);
    let (removed, _) = run_pipeline(&data, &proposals, &e, &index, &pipeline).unwrap();
    let left = removed.iter().filter(|d| d.class_id == target).count();
    for p in saved {
        index.add(p).unwrap();
    }
    let (restored, _) = run_pipeline(&data, &proposals, &e, &index, &pipeline).unwrap();
    let bit_exact = serde_json::to_string(&restored).unwrap() == serde_json::to_string(&before).unwrap();
    let six = (
        had > 0 && left == 0 && bit_exact,
        format!(
            "{target}: {had} detections before removal, {left} after, restored list bit-exact: {bit_exact} ({} detections)",
            restored.len()
        ),
    );

    DeskRun {
        recall: [baseline, recall_02, recall_06],
        exact_recall: exact_hits as f64 / prototypes.len() as f64,
        exact_min_similarity,
        map,
        elapsed,
        six,
    }
}

fn desk_outcome(run: &DeskRun) -> Outcome {
    let [baseline, r02, r06] = run.recall;
    let pass = r06 >= baseline
        && run.exact_recall == 1.0
        && (run.exact_min_similarity - 1.0).abs() <= 1e-6
        && r06 >= r02 - 0.02
        && run.elapsed < Duration::from_secs(600);
    (
        pass,
        format!(
            "held-out Recall@1 identity {baseline:.3}, m=0.2 {r02:.3}, m=0.6 {r06:.3} (need m=0.6 >= identity and >= m=0.2 - 0.02); exact prototypes Recall@1 {:.3}, min similarity {:.7} (tol 1e-6); pipeline mAP {:.3}; {:.1?} (limit 10 min)",
            run.exact_recall, run.exact_min_similarity, run.map, run.elapsed
        ),
    )
}

// Criterion 7

fn nine_k() -> Outcome {
    const N: usize = 9_000;
    const DIM: usize = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut index = PrototypeIndex::new();
    for i in 0..N {
        let d = l2_normalize(&Descriptor::new(unit(&mut rng, DIM))).unwrap();
        index.add(Prototype::new(format!("brand_{i:04}"), "v0", d)).unwrap();
    }
    let queries: Vec<Descriptor> = (0..1000).map(|_| Descriptor::new(unit(&mut rng, DIM))).collect();
    let start = Instant::now();
    let results = index.query_batch(&queries, 5, -1.0, Exec::Sequential).unwrap();
    let elapsed = start.elapsed();
    let answered = results.iter().filter(|r| r.len() == 5).count();
    let consistent = queries
        .iter()
        .zip(&results)
        .take(50)
        .all(|(q, r)| index.query(q, 5, -1.0).unwrap() == *r);
    let bytes = index.to_bytes();
    let reloaded = PrototypeIndex::from_bytes(&bytes).unwrap().to_bytes();
    let identical = bytes == reloaded;
    (
        answered == 1000 && consistent && elapsed < Duration::from_secs(2) && identical,
        format!(
            "{N} x {DIM} index, 1000 single-threaded k=5 queries in {elapsed:.2?} (limit 2 s), batch equals per-query search: {consistent}, save/load byte-identical: {identical}"
        ),
    )
}

// Criterion 8

/// The README quickstart, as (arguments, outputs kept for comparison).
const QUICKSTART: &[&[&str]] = &[
    &["demo-assets", "--out", "assets", "--classes", "10", "--backgrounds", "20", "--seed", "7"],
    &["synth", "--backgrounds", "assets/backgrounds", "--logos", "assets/logos.jsonl", "--out", "data", "--seed", "1", "--per-class", "30"],
    &["train", "--dataset", "data", "--logos", "assets/logos.jsonl", "--pooling", "rmac", "--lr", "1e-3", "--epochs", "300", "--margin", "0.6", "--seed", "0", "--out", "head.bin"],
    &["index", "build", "--logos", "assets/logos.jsonl", "--head", "head.bin", "--pooling", "rmac", "--out", "index.pidx"],
    &["gt-proposals", "--dataset", "data", "--out", "proposals.jsonl"],
    &["run", "--images", "data", "--proposals", "proposals.jsonl", "--index", "index.pidx", "--head", "head.bin", "--pooling", "rmac", "--out", "detections.jsonl"],
    &["eval", "--detections", "detections.jsonl", "--truth", "data/manifest.jsonl", "--out", "report.json"],
];

const COMPARED: &[&str] = &["data/manifest.jsonl", "head.bin", "index.pidx", "detections.jsonl", "report.json"];

fn quickstart(dir: &Path) {
    for args in QUICKSTART {
        let status = Command::new(env!("CARGO_BIN_EXE_protoret"))
            .args(*args)
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "protoret {} failed: {status}", args.join(" "));
    }
}

fn determinism(root: &Path) -> Outcome {
    let (a, b) = (root.join("first"), root.join("second"));
    for d in [&a, &b] {
        std::fs::create_dir_all(d).unwrap();
        quickstart(d);
    }
    let differing: Vec<&str> = COMPARED
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    (
        differing.is_empty(),
        format!(
            "quickstart run twice; compared {}; differing: {}",
            COMPARED.join(", "),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    // `cargo test -- --list`
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = tempfile::tempdir().unwrap();
    let desk = catch_unwind(AssertUnwindSafe(|| desk_run(&root.path().join("desk"))));
    let (five, six) = match &desk {
        Ok(run) => (guarded(|| desk_outcome(run)), run.six.clone()),
        Err(_) => {
            let failed = (false, "desk-scale run panicked".to_string());
            (failed.clone(), failed)
        }
    };
    let results = [
        ("triplet-loss bounds", guarded(triplet_bounds)),
        ("gradient check", guarded(gradient_check)),
        ("whitening", guarded(whitening)),
        ("metric oracles", guarded(metric_oracles)),
        ("desk-scale two-layer run", five),
        ("dynamic update", six),
        ("9k-scale smoke", guarded(nine_k)),
        ("determinism", guarded(|| determinism(&root.path().join("quickstart")))),
    ];
    let mut failed = 0;
    for (i, (name, (pass, detail))) in results.iter().enumerate() {
        println!("criterion {} {name}: {} | {detail}", i + 1, if *pass { "PASS" } else { "FAIL" });
        failed += !pass as usize;
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
