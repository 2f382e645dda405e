//! Acceptance criteria 1-9. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fail.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ditm::corpus::{
    build_pool, normalize_scores, raw_descriptiveness, score_corpus, score_out_of_pool,
    DocumentPool, LogBase, Split, TokenSequence,
};
use ditm::datagen::{gen_corpus, gen_features, write_synth, SynthSpec};
use ditm::eval::{
    cross_modal_recalls, d_corr, evaluate, evaluate_hierarchy, hierarchical_traverse,
    read_level_means, recall_at_k, rsum, write_report, Direction, RecallTable, RelevanceMap,
};
use ditm::geometry::{euclid_dist, l2_normalize, sim_matrix, EmbeddingMatrix, FeatureSet};
use ditm::gradcheck::{self, GradCheckConfig};
use ditm::losses::{
    adaptive_triplet_loss, hardest_negatives, ordering_loss, overall_loss, triplet_loss, Batch,
    LossConfig, Objective,
};
use ditm::trainer::{train, Dataset, TrainConfig, Trainer};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Outcome line detail; `Err` marks a failed criterion.
type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gaussian_unit(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&EmbeddingMatrix::new(rows, dim, data).unwrap()).unwrap()
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<TokenSequence> {
    let vocab: Vec<String> = (0..rng.random_range(1..=50)).map(|i| format!("w{i}")).collect();
    (0..rng.random_range(1..=100))
        .map(|_| {
            (0..rng.random_range(1..=12))
                .map(|_| vocab.choose(rng).unwrap().clone())
                .collect()
        })
        .collect()
}

/// Direct double loop over the definition: for each distinct word of the
/// sentence, count its occurrences and the pool documents containing it.
fn oracle_raw(sentence: &[String], pool: &[Vec<String>]) -> f64 {
    let n = sentence.len() as f64;
    let m = pool.len() as f64;
    let mut seen: Vec<&String> = Vec::new();
    let mut total = 0.0;
    for w in sentence {
        if seen.contains(&w) {
            continue;
        }
        seen.push(w);
        let mut n_w = 0.0;
        for x in sentence {
            if x == w {
                n_w += 1.0;
            }
        }
        let mut m_w = 0.0;
        for doc in pool {
            let mut present = false;
            for x in doc {
                if x == w {
                    present = true;
                }
            }
            if present {
                m_w += 1.0;
            }
        }
        let m_w = if m_w == 0.0 { 1.0 } else { m_w };
        total += n_w / n * (m / m_w).ln();
    }
    total
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut sentences = 0;
    for _ in 0..50 {
        let corpus = random_corpus(&mut rng);
        let pool = build_pool(&corpus);
        let plain: Vec<Vec<String>> = corpus.iter().map(|s| s.tokens().to_vec()).collect();
        for (seq, toks) in corpus.iter().zip(&plain) {
            let got = raw_descriptiveness(seq, &pool).map_err(|e| e.to_string())?;
            worst = worst.max((got - oracle_raw(toks, &plain)).abs());
            sentences += 1;
        }
    }
    let elapsed = secs(start.elapsed());
    check(
        worst <= 1e-9 && elapsed < 5.0,
        format!(
            "TF-IDF oracle: 50 corpora / {sentences} sentences, max |diff| {worst:.2e} (tol 1e-9), {elapsed:.2} s (limit 5 s)"
        ),
    )
}

fn normalized(corpus: &[TokenSequence], pool: &DocumentPool) -> BTreeMap<String, f64> {
    let raw: BTreeMap<String, f64> = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("s{i:03}"), raw_descriptiveness(s, pool).unwrap()))
        .collect();
    let table = normalize_scores(&raw).unwrap();
    table.iter().map(|(k, v)| (k.to_owned(), v.delta)).collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut base_diff: f64 = 0.0;
    let mut bad = Vec::new();
    let mut out_of_pool = 0;
    for c in 0..50 {
        let corpus = random_corpus(&mut rng);
        let pool = build_pool(&corpus);
        let raw: BTreeMap<String, f64> = corpus
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("s{i:03}"), raw_descriptiveness(s, &pool).unwrap()))
            .collect();
        let table = normalize_scores(&raw).unwrap();
        let degenerate = table.raw_max == table.raw_min;
        let deltas: Vec<f64> = table.iter().map(|(_, e)| e.delta).collect();
        if deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            bad.push(format!("corpus {c}: delta outside [0,1]"));
        }
        if !degenerate {
            for (_, e) in table.iter() {
                if e.raw == table.raw_min && e.delta != 0.0 {
                    bad.push(format!("corpus {c}: min maps to {}", e.delta));
                }
                if e.raw == table.raw_max && e.delta != 1.0 {
                    bad.push(format!("corpus {c}: max maps to {}", e.delta));
                }
            }
        }
        // Unseen and pool-wide words push raw scores past both ends.
        let probes: Vec<TokenSequence> = vec![
            ["neverseen"].into_iter().map(String::from).collect(),
            corpus[0].clone(),
            corpus[0]
                .tokens()
                .iter()
                .cloned()
                .chain(["zzunseen".to_owned()])
                .collect(),
        ];
        for p in &probes {
            let d = score_out_of_pool(p, &pool, &table).unwrap();
            let want = if degenerate {
                0.5
            } else {
                let r = raw_descriptiveness(p, &pool).unwrap();
                ((r - table.raw_min) / (table.raw_max - table.raw_min)).clamp(0.0, 1.0)
            };
            if !(0.0..=1.0).contains(&d) || (d - want).abs() > 1e-12 {
                bad.push(format!("corpus {c}: out-of-pool {d} vs {want}"));
            }
            out_of_pool += 1;
        }
        let ten = build_pool(&corpus).with_log_base(LogBase::Base(10.0));
        let (a, b) = (normalized(&corpus, &pool), normalized(&corpus, &ten));
        for (k, v) in &a {
            base_diff = base_diff.max((v - b[k]).abs());
        }
    }
    check(
        bad.is_empty() && base_diff <= 1e-9,
        format!(
            "normalization: 50 pools in [0,1] with exact min->0/max->1, {out_of_pool} out-of-pool scores clamped, \
             log-base-10 max |diff| {base_diff:.2e} (tol 1e-9){}",
            if bad.is_empty() { String::new() } else { format!("; violations: {bad:?}") }
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        seed: 303,
        trials: 20,
        images: 8,
        captions_per_image: 2,
        dim: 16,
        step: 1e-5,
        tolerance: 1e-4,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run(&cfg).map_err(|e| e.to_string())?;
    let elapsed = secs(start.elapsed());
    let redraws: usize = report
        .results
        .iter()
        .filter(|r| r.hardest_mining)
        .map(|r| r.redraws)
        .sum::<usize>()
        / 5;
    let detail = format!(
        "gradients: {} batches x (triplet, adaptive, ordering, overall, end-to-end) x mining on/off = {} checks, \
         max rel err {:.2e} (tol 1e-4, h 1e-5, B=8 images x 2 captions, D=16), {redraws} kink-adjacent draws excluded, \
         {elapsed:.1} s (limit 30 s)",
        cfg.trials,
        report.results.len(),
        report.max_relative_error
    );
    check(report.passed && elapsed < 30.0, detail)
}

fn random_batch(rng: &mut ChaCha8Rng, images: usize, per: usize, dim: usize) -> Batch {
    let n = images * per;
    Batch::new(
        gaussian_unit(rng, images, dim),
        gaussian_unit(rng, n, dim),
        (0..n).map(|t| t / per).collect(),
        (0..n).map(|_| rng.random_range(0.05..=1.0)).collect(),
    )
    .unwrap()
}

fn max_abs_diff(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut eq5_vs_eq3: f64 = 0.0;
    let mut lambda0: f64 = 0.0;
    let mut swap_rel: f64 = 0.0;
    let mut zero_max: f64 = 0.0;
    for _ in 0..50 {
        let b = random_batch(&mut rng, 6, 3, 8);
        for (c, tau) in [(0.5, 5.0), (0.3, 3.0), (0.9, 6.0), (0.05, 1.0)] {
            let cb = b.with_deltas(vec![c; b.num_texts()]).unwrap();
            for mining in [true, false] {
                let cfg = LossConfig {
                    tau,
                    alpha: (c + c) / tau,
                    use_hardest_mining: mining,
                    ..LossConfig::default()
                };
                let t = triplet_loss(&cb, &cfg).unwrap();
                let a = adaptive_triplet_loss(&cb, &cfg).unwrap();
                eq5_vs_eq3 = eq5_vs_eq3
                    .max((t.value - a.value).abs())
                    .max(max_abs_diff(&t.grad_images, &a.grad_images))
                    .max(max_abs_diff(&t.grad_texts, &a.grad_texts));
            }
        }
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let o = overall_loss(&b, &cfg).unwrap();
        let a = adaptive_triplet_loss(&b, &cfg).unwrap();
        lambda0 = lambda0
            .max((o.value - a.value).abs())
            .max(max_abs_diff(&o.grad_images, &a.grad_images))
            .max(max_abs_diff(&o.grad_texts, &a.grad_texts));

        // Two captions per image with deltas (d_tp/4, d_t/4): the ratios
        // agree bit for bit, so every residual is exactly zero.
        let pb = random_batch(&mut rng, 5, 2, 6);
        let d: Vec<f64> = (0..pb.num_texts())
            .map(|t| euclid_dist(pb.images().row(t / 2), pb.texts().row(t)).unwrap())
            .collect();
        let matched: Vec<f64> = (0..pb.num_texts()).map(|t| d[t ^ 1] / 4.0).collect();
        let zb = pb.with_deltas(matched).unwrap();
        let z = ordering_loss(&zb, &LossConfig::default()).unwrap();
        zero_max = zero_max.max(z.value.abs());

        // Swap the roles of t and t+ by reversing caption order per image.
        let perm: Vec<usize> = (0..pb.num_texts()).map(|t| t ^ 1).collect();
        let swapped = Batch::new(
            pb.images().clone(),
            pb.texts().select_rows(&perm),
            pb.image_of_text().to_vec(),
            perm.iter().map(|&t| pb.deltas()[t]).collect(),
        )
        .unwrap();
        let x = ordering_loss(&pb, &LossConfig::default()).unwrap().value;
        let y = ordering_loss(&swapped, &LossConfig::default()).unwrap().value;
        swap_rel = swap_rel.max((x - y).abs() / x.abs().max(1e-300));
    }
    check(
        eq5_vs_eq3 <= 1e-12 && lambda0 <= 1e-12 && zero_max == 0.0 && swap_rel <= 1e-12,
        format!(
            "loss identities over 50 batches: adaptive vs fixed margin under constant delta max diff {eq5_vs_eq3:.1e} (tol 1e-12); \
             ordering on ratio-matched fixtures max {zero_max:.1e} (must be 0); swap rel diff {swap_rel:.1e} (tol 1e-12); \
             lambda=0 overall vs adaptive max diff {lambda0:.1e} (tol 1e-12)"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = 0;
    let mut pairs = 0;
    for b in 0..200 {
        let images = rng.random_range(2..=8);
        let per = rng.random_range(1..=3);
        let dim = rng.random_range(2..=6);
        let batch = random_batch(&mut rng, images, per, dim);
        // Quantize similarities on some batches to force ties.
        let sims = sim_matrix(batch.images(), batch.texts()).unwrap();
        let sims = if b % 4 == 0 {
            sims.map(|s| (s * 4.0).round() / 4.0)
        } else {
            sims
        };
        let owner = batch.image_of_text().to_vec();
        let mined = hardest_negatives(&sims, &owner).unwrap();
        for t in 0..owner.len() {
            let v = owner[t];
            let mut best_t = None;
            let mut best_s = f64::NEG_INFINITY;
            for t2 in 0..owner.len() {
                if owner[t2] != v && sims.get(v, t2) > best_s {
                    best_s = sims.get(v, t2);
                    best_t = Some(t2);
                }
            }
            let mut best_v = None;
            let mut best_s = f64::NEG_INFINITY;
            for v2 in 0..images {
                if v2 != v && sims.get(v2, t) > best_s {
                    best_s = sims.get(v2, t);
                    best_v = Some(v2);
                }
            }
            if Some(mined.text[t]) != best_t || Some(mined.image[t]) != best_v {
                mismatches += 1;
            }
            pairs += 1;
        }
    }
    check(
        mismatches == 0,
        format!(
            "mining: 200 random multi-caption batches, {pairs} pairs, {mismatches} mismatches vs exhaustive scan \
             (same-image captions excluded, lowest-index ties)"
        ),
    )
}

/// Full sort by (score desc, index asc); hit when a relevant item sits in
/// the first K places.
fn oracle_recall(sims: &[Vec<f64>], relevant: &[BTreeSet<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (q, row) in sims.iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order[..k].iter().any(|g| relevant[q].contains(g)) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / sims.len() as f64
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn oracle_nearest(p: &[f64], c: &EmbeddingMatrix) -> usize {
    let mut idx: Vec<usize> = (0..c.rows()).collect();
    idx.sort_by(|&a, &b| {
        dist2(p, c.row(a))
            .partial_cmp(&dist2(p, c.row(b)))
            .unwrap()
            .then(a.cmp(&b))
    });
    idx[0]
}

fn oracle_traverse(image: &[f64], c: &EmbeddingMatrix, root: &[f64], steps: usize) -> BTreeSet<usize> {
    let start = c.row(oracle_nearest(image, c)).to_vec();
    (0..steps)
        .map(|s| {
            let w = s as f64 / (steps - 1) as f64;
            let p: Vec<f64> = start.iter().zip(root).map(|(a, b)| a + w * (b - a)).collect();
            oracle_nearest(&p, c)
        })
        .collect()
}

/// Spearman via O(n^2) rank counting and Pearson on the ranks.
fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let eq = v.iter().filter(|&&b| b == a).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut bad = Vec::new();
    let mut d_corr_diff: f64 = 0.0;
    let fixtures = 40;
    for f in 0..fixtures {
        let n_img = rng.random_range(10..=12);
        let levels = 4;
        let dim = rng.random_range(3..=6);
        let images = gaussian_unit(&mut rng, n_img, dim);
        let texts = gaussian_unit(&mut rng, n_img * levels, dim);
        let texts = if f % 3 == 0 {
            // Coarse grid to create score ties.
            let q: Vec<f64> = texts.as_slice().iter().map(|x| (x * 2.0).round() / 2.0 + 0.01).collect();
            l2_normalize(&EmbeddingMatrix::new(n_img * levels, dim, q).unwrap()).unwrap()
        } else {
            texts
        };
        let owner: Vec<usize> = (0..n_img * levels).map(|t| t / levels).collect();
        let lv: Vec<u8> = (0..n_img * levels).map(|t| (t % levels) as u8 + 1).collect();

        // Recall in both directions.
        let s: Vec<Vec<f64>> = images
            .iter_rows()
            .map(|v| texts.iter_rows().map(|t| v.iter().zip(t).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let st: Vec<Vec<f64>> = (0..texts.rows()).map(|t| s.iter().map(|r| r[t]).collect()).collect();
        let rel_i: Vec<BTreeSet<usize>> = (0..n_img)
            .map(|v| (0..owner.len()).filter(|&t| owner[t] == v).collect())
            .collect();
        let rel_t: Vec<BTreeSet<usize>> = owner.iter().map(|&v| BTreeSet::from([v])).collect();
        let table = cross_modal_recalls(&images, &texts, &owner, &[1, 5, 10]).unwrap();
        let mut oracle_i2t = 0.0;
        let mut oracle_t2i = 0.0;
        for k in [1, 5, 10] {
            let (oi, ot) = (oracle_recall(&s, &rel_i, k), oracle_recall(&st, &rel_t, k));
            oracle_i2t += oi;
            oracle_t2i += ot;
            if table.get(Direction::I2T, k) != Some(oi) || table.get(Direction::T2I, k) != Some(ot) {
                bad.push(format!("fixture {f}: recall@{k}"));
            }
        }
        // Summed I2T first, then T2I, ascending K.
        let oracle_sum = [1, 5, 10]
            .iter()
            .map(|&k| oracle_recall(&s, &rel_i, k))
            .chain([1, 5, 10].iter().map(|&k| oracle_recall(&st, &rel_t, k)))
            .fold(0.0, |a, x| a + x);
        if (oracle_i2t + oracle_t2i - oracle_sum).abs() > 1e-9 || rsum(&table).unwrap() != oracle_sum {
            bad.push(format!("fixture {f}: rsum"));
        }
        let sims = sim_matrix(&images, &texts).unwrap();
        let rel = RelevanceMap::image_to_text(&owner, n_img).unwrap();
        if recall_at_k(&sims, &rel, 3).unwrap() != oracle_recall(&s, &rel_i, 3) {
            bad.push(format!("fixture {f}: recall@3"));
        }

        // Hierarchy: traversal P/R, per-level recall, d_corr.
        let root = gaussian_unit(&mut rng, 1, dim).row(0).to_vec();
        let h = evaluate_hierarchy(&images, &texts, &owner, &lv, &root, 50).unwrap();
        let (mut p_sum, mut r_sum, mut dc_sum) = (0.0, 0.0, 0.0);
        let mut lvl_hits = [0usize; 4];
        for v in 0..n_img {
            let got = oracle_traverse(images.row(v), &texts, &root, 50);
            let api: BTreeSet<usize> = hierarchical_traverse(images.row(v), &texts, &root, 50)
                .unwrap()
                .into_iter()
                .collect();
            if api != got {
                bad.push(format!("fixture {f}: traversal of image {v}"));
            }
            let gt = &rel_i[v];
            let correct = got.iter().filter(|t| gt.contains(t)).count() as f64;
            p_sum += 100.0 * correct / got.len() as f64;
            r_sum += 100.0 * correct / gt.len() as f64;
            for &t in gt {
                if got.contains(&t) {
                    lvl_hits[lv[t] as usize - 1] += 1;
                }
            }
            let idx: Vec<usize> = gt.iter().copied().collect();
            let neg: Vec<f64> = idx
                .iter()
                .map(|&t| -dist2(images.row(v), texts.row(t)).sqrt())
                .collect();
            let levels_f: Vec<f64> = idx.iter().map(|&t| lv[t] as f64).collect();
            let oracle = 100.0 * oracle_spearman(&levels_f, &neg);
            let api = d_corr(
                images.row(v),
                &texts.select_rows(&idx),
                &idx.iter().map(|&t| lv[t]).collect::<Vec<_>>(),
            )
            .unwrap();
            d_corr_diff = d_corr_diff.max((api - oracle).abs());
            dc_sum += oracle;
        }
        let n = n_img as f64;
        if h.precision != p_sum / n || h.recall != r_sum / n {
            bad.push(format!("fixture {f}: precision/recall"));
        }
        for (l, hits) in lvl_hits.iter().enumerate() {
            if h.per_level_recall[&(l as u8 + 1)] != 100.0 * *hits as f64 / n {
                bad.push(format!("fixture {f}: per-level recall {}", l + 1));
            }
        }
        d_corr_diff = d_corr_diff.max((h.d_corr - dc_sum / n).abs());
    }

    let printed = [83.7, 97.4, 99.2, 70.1, 92.8, 97.1];
    let mut t = RecallTable::default();
    for (i, &(dir, k)) in [
        (Direction::I2T, 1),
        (Direction::I2T, 5),
        (Direction::I2T, 10),
        (Direction::T2I, 1),
        (Direction::T2I, 5),
        (Direction::T2I, 10),
    ]
    .iter()
    .enumerate()
    {
        t.insert(dir, k, printed[i]);
    }
    let tab1 = rsum(&t).unwrap();
    check(
        bad.is_empty() && d_corr_diff <= 1e-9 && (tab1 - 540.3).abs() < 1e-9,
        format!(
            "metric oracles: {fixtures} fixtures (<=48 texts): recall/RSUM/traversal P-R/per-level recall exact, \
             d_corr max |diff| {d_corr_diff:.1e} (tol 1e-9); RSUM of published recalls = {tab1:.1} (expect 540.3){}",
            if bad.is_empty() { String::new() } else { format!("; mismatches: {bad:?}") }
        ),
    )
}

struct Split3 {
    train: Dataset,
    test: Dataset,
}

fn scenario(seed: u64) -> Split3 {
    let spec = SynthSpec::ablation_scenario(seed);
    let recs = gen_corpus(&spec).unwrap();
    let table = score_corpus(&recs, Split::Train).unwrap();
    let (img, txt) = gen_features(&recs, &spec).unwrap();
    Split3 {
        train: Dataset::assemble(&recs, Split::Train, Some(&table), &img, &txt).unwrap(),
        test: Dataset::assemble(&recs, Split::Test, Some(&table), &img, &txt).unwrap(),
    }
}

fn test_eval(model: &ditm::trainer::ProjectionModel, ds: &Dataset) -> ditm::eval::EvalOutput {
    let (ei, et) = model.forward(&ds.image_feats, &ds.text_feats).unwrap();
    evaluate(&ei, &et, &ds.image_of_text, ds.levels.as_deref(), None).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7() -> Outcome {
    let seeds = 0..5u64;
    let objectives = [Objective::Triplet, Objective::AdaptiveTriplet, Objective::Overall];
    let mut scores = vec![Vec::new(); 3];
    let mut slowest: f64 = 0.0;
    for seed in seeds {
        let start = Instant::now();
        let data = scenario(seed);
        for (k, objective) in objectives.into_iter().enumerate() {
            let cfg = TrainConfig {
                seed,
                objective,
                ..TrainConfig::quick_start()
            };
            let (model, _) = train(&data.train, None, cfg).map_err(|e| e.to_string())?;
            scores[k].push(test_eval(&model, &data.test).report.d_corr.unwrap());
        }
        slowest = slowest.max(secs(start.elapsed()));
    }
    let [b, a, f] = [0, 1, 2].map(|k| median(scores[k].clone()));
    check(
        b <= a && a <= f && f >= b + 5.0 && slowest < 120.0,
        format!(
            "ablation trend (200 images x 4 levels, D=32, 10 epochs, seeds 0-4, test-split d_corr medians): \
             triplet {b:.1} <= adaptive {a:.1} <= full {f:.1}, full - triplet = {:.1} (need >= 5); \
             slowest seed {slowest:.1} s (limit 120 s)",
            f - b
        ),
    )
}

fn criterion_8() -> Outcome {
    let data = scenario(0);
    let cfg = TrainConfig {
        seed: 0,
        ..TrainConfig::quick_start()
    };
    let (model, _) = train(&data.train, None, cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &test_eval(&model, &data.test)).map_err(|e| e.to_string())?;
    let means = read_level_means(&dir.path().join("distance_by_level.csv")).map_err(|e| e.to_string())?;
    let m: Vec<(u8, f64)> = means.into_iter().collect();
    let decreasing = m.len() == 4 && m.windows(2).all(|w| w[0].1 > w[1].1);
    check(
        decreasing,
        format!(
            "distance by level from emitted CSV (full model, seed 0): {} (must be strictly decreasing)",
            m.iter()
                .map(|(l, d)| format!("L{l} {d:.4}"))
                .collect::<Vec<_>>()
                .join(" > ")
        ),
    )
}

fn pipeline(dir: &Path) -> ditm::Result<()> {
    let spec = SynthSpec {
        n_images: 60,
        ..SynthSpec::ablation_scenario(9)
    };
    let paths = write_synth(&spec, &dir.join("data"))?;
    let recs = ditm::corpus::read_corpus(&paths.corpus)?;
    let table = score_corpus(&recs, Split::Train)?;
    table.write_jsonl(&dir.join("table.jsonl"))?;
    let table = ditm::corpus::DescriptivenessTable::read_jsonl(&dir.join("table.jsonl"))?;
    let img = FeatureSet::read(&paths.image_features)?;
    let txt = FeatureSet::read(&paths.text_features)?;
    let tr = Dataset::assemble(&recs, Split::Train, Some(&table), &img, &txt)?;
    let te = Dataset::assemble(&recs, Split::Test, None, &img, &txt)?;
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        seed: 9,
        ..TrainConfig::quick_start()
    };
    let mut trainer = Trainer::new(&tr, cfg)?;
    let log = trainer.run(|_, _| Ok(()))?;
    log.write_jsonl(&dir.join("train_log.jsonl"))?;
    trainer.checkpoint().save(&dir.join("checkpoint.bin"))?;
    let report_dir = dir.join("report");
    std::fs::create_dir_all(&report_dir).unwrap();
    write_report(&report_dir, &test_eval(trainer.model(), &te))
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path()).map_err(|e| e.to_string())?;
    pipeline(b.path()).map_err(|e| e.to_string())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<&String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .collect();
    check(
        differing.is_empty() && fa.len() >= 10,
        format!(
            "reproducibility: two identical-seed runs produced {} files (corpus, features, table, log, checkpoint, report CSV/JSON), \
             {} differ{}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
        ),
    )
}

fn main() {
    // `cargo test -- --list` and similar harness probes expect no work.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(u8, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let t = secs(start.elapsed());
        match outcome {
            Ok(d) => println!("criterion {n}: PASS  {d}  [{t:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL  {d}  [{t:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
