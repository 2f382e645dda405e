//! Retrieval and hierarchy metrics.
//!
//! Rankings sort by descending similarity (ascending distance) with ties
//! broken by ascending gallery index. All percentages are in `[0, 100]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euclid_dist, norm, sim_matrix, EmbeddingMatrix, ScoreMatrix};

pub const DEFAULT_TRAVERSAL_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2T,
    T2I,
    I2I,
    T2T,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
            Direction::I2I => "i2i",
            Direction::T2T => "t2t",
        })
    }
}

/// Relevant gallery items for every query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceMap {
    relevant: Vec<BTreeSet<usize>>,
    gallery_size: usize,
}

impl RelevanceMap {
    pub fn new(relevant: Vec<BTreeSet<usize>>, gallery_size: usize) -> Result<Self> {
        for set in &relevant {
            if let Some(&bad) = set.iter().find(|&&g| g >= gallery_size) {
                return Err(Error::UnknownId(format!(
                    "gallery item {bad} (gallery size {gallery_size})"
                )));
            }
        }
        Ok(RelevanceMap {
            relevant,
            gallery_size,
        })
    }

    /// Image queries against a text gallery: every owned caption is relevant.
    pub fn image_to_text(image_of_text: &[usize], num_images: usize) -> Result<Self> {
        let mut relevant = vec![BTreeSet::new(); num_images];
        for (t, &v) in image_of_text.iter().enumerate() {
            relevant
                .get_mut(v)
                .ok_or_else(|| Error::UnknownId(format!("image {v}")))?
                .insert(t);
        }
        RelevanceMap::new(relevant, image_of_text.len())
    }

    /// Text queries against an image gallery: the owning image is relevant.
    pub fn text_to_image(image_of_text: &[usize], num_images: usize) -> Result<Self> {
        RelevanceMap::new(
            image_of_text.iter().map(|&v| BTreeSet::from([v])).collect(),
            num_images,
        )
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_size
    }

    pub fn relevant(&self, query: usize) -> &BTreeSet<usize> {
        &self.relevant[query]
    }
}

/// Position of `item` in the query's ranking (0 = top).
fn rank_of(scores: &[f64], item: usize) -> usize {
    let s = scores[item];
    scores
        .iter()
        .enumerate()
        .filter(|&(k, &x)| x > s || (x == s && k < item))
        .count()
}

/// Percentage of queries with at least one relevant item in the top K.
pub fn recall_at_k(sims: &ScoreMatrix, relevance: &RelevanceMap, k: usize) -> Result<f64> {
    let gallery = sims.cols();
    if gallery == 0 {
        return Err(Error::EmptyGallery);
    }
    if k == 0 || k > gallery {
        return Err(Error::InvalidK { k, gallery });
    }
    if sims.rows() != relevance.num_queries() || relevance.gallery_size() != gallery {
        return Err(Error::DimensionMismatch {
            expected: relevance.num_queries(),
            got: sims.rows(),
        });
    }
    if sims.rows() == 0 {
        return Ok(0.0);
    }
    let hits = (0..sims.rows())
        .filter(|&q| {
            let row = sims.row(q);
            relevance.relevant(q).iter().any(|&g| rank_of(row, g) < k)
        })
        .count();
    Ok(100.0 * hits as f64 / sims.rows() as f64)
}

/// Recall percentages keyed by direction and K.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecallTable(pub BTreeMap<(Direction, usize), f64>);

impl RecallTable {
    pub fn get(&self, dir: Direction, k: usize) -> Option<f64> {
        self.0.get(&(dir, k)).copied()
    }

    pub fn insert(&mut self, dir: Direction, k: usize, value: f64) {
        self.0.insert((dir, k), value);
    }

    /// `"i2t@1"`-style keys.
    pub fn to_named(&self) -> BTreeMap<String, f64> {
        self.0
            .iter()
            .map(|((d, k), v)| (format!("{d}@{k}"), *v))
            .collect()
    }
}

/// Sum of R@{1,5,10} in both cross-modal directions.
pub fn rsum(recalls: &RecallTable) -> Result<f64> {
    let mut total = 0.0;
    for dir in [Direction::I2T, Direction::T2I] {
        for k in [1, 5, 10] {
            total += recalls
                .get(dir, k)
                .ok_or_else(|| Error::MissingRecall(format!("{dir}@{k}")))?;
        }
    }
    Ok(total)
}

/// I2T and T2I recall at each K for one gallery.
pub fn cross_modal_recalls(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    image_of_text: &[usize],
    ks: &[usize],
) -> Result<RecallTable> {
    let sims = sim_matrix(images, texts)?;
    let i2t = RelevanceMap::image_to_text(image_of_text, images.rows())?;
    let t2i = RelevanceMap::text_to_image(image_of_text, images.rows())?;
    let sims_t = sims.transpose();
    let mut table = RecallTable::default();
    for &k in ks {
        table.insert(Direction::I2T, k, recall_at_k(&sims, &i2t, k)?);
        table.insert(Direction::T2I, k, recall_at_k(&sims_t, &t2i, k)?);
    }
    Ok(table)
}

/// Similarities within one modality with self-matches pushed to the bottom,
/// for I2I / T2T retrieval.
pub fn intra_modal_sims(embs: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    let mut sims = sim_matrix(embs, embs)?;
    for i in 0..embs.rows() {
        *sims.get_mut(i, i) = f64::NEG_INFINITY;
    }
    Ok(sims)
}

/// Split images into `folds` contiguous chunks, evaluate each chunk against
/// its own captions, and average.
pub fn fold_averaged_recalls(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    image_of_text: &[usize],
    folds: usize,
    ks: &[usize],
) -> Result<RecallTable> {
    let n = images.rows();
    if folds == 0 || folds > n {
        return Err(Error::InvalidConfig(format!("cannot split {n} images into {folds} folds")));
    }
    let size = n.div_ceil(folds);
    let mut sum: BTreeMap<(Direction, usize), f64> = BTreeMap::new();
    let mut used = 0;
    for start in (0..n).step_by(size) {
        let end = (start + size).min(n);
        let img_idx: Vec<usize> = (start..end).collect();
        let txt_idx: Vec<usize> = (0..image_of_text.len())
            .filter(|&t| (start..end).contains(&image_of_text[t]))
            .collect();
        let owner: Vec<usize> = txt_idx.iter().map(|&t| image_of_text[t] - start).collect();
        let table = cross_modal_recalls(
            &images.select_rows(&img_idx),
            &texts.select_rows(&txt_idx),
            &owner,
            ks,
        )?;
        for (key, v) in table.0 {
            *sum.entry(key).or_insert(0.0) += v;
        }
        used += 1;
    }
    Ok(RecallTable(
        sum.into_iter().map(|(k, v)| (k, v / used as f64)).collect(),
    ))
}

fn nearest(point: &[f64], candidates: &EmbeddingMatrix) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, row) in candidates.iter_rows().enumerate() {
        let d: f64 = point.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Walk from the candidate closest to the image toward the root, retrieving
/// the nearest candidate at each of `steps` equally spaced points (both ends
/// included). Returns candidate indices in first-encounter order.
pub fn hierarchical_traverse(
    image: &[f64],
    candidates: &EmbeddingMatrix,
    root: &[f64],
    steps: usize,
) -> Result<Vec<usize>> {
    if candidates.rows() == 0 {
        return Err(Error::EmptyCandidates);
    }
    if steps < 2 {
        return Err(Error::InvalidConfig(format!("traversal needs >= 2 steps, got {steps}")));
    }
    for v in [image, root] {
        if v.len() != candidates.dim() {
            return Err(Error::DimensionMismatch {
                expected: candidates.dim(),
                got: v.len(),
            });
        }
    }
    let start = nearest(image, candidates);
    let e0 = candidates.row(start);
    let mut seen = BTreeSet::new();
    let mut order = Vec::new();
    let mut point = vec![0.0; e0.len()];
    for s in 0..steps {
        let w = s as f64 / (steps - 1) as f64;
        for (p, (a, b)) in point.iter_mut().zip(e0.iter().zip(root)) {
            *p = a + w * (b - a);
        }
        let hit = nearest(&point, candidates);
        if seen.insert(hit) {
            order.push(hit);
        }
    }
    Ok(order)
}

/// `(precision, recall)` as percentages.
pub fn set_precision_recall(
    retrieved: &BTreeSet<usize>,
    ground_truth: &BTreeSet<usize>,
) -> Result<(f64, f64)> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let correct = retrieved.intersection(ground_truth).count() as f64;
    let precision = if retrieved.is_empty() {
        0.0
    } else {
        100.0 * correct / retrieved.len() as f64
    };
    Ok((precision, 100.0 * correct / ground_truth.len() as f64))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation as the Pearson correlation of average ranks.
/// Zero when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Rank correlation (x100) between hierarchy level and negative distance to
/// the image: 100 when deeper levels are strictly closer.
pub fn d_corr(image: &[f64], hierarchy: &EmbeddingMatrix, levels: &[u8]) -> Result<f64> {
    if hierarchy.rows() != levels.len() {
        return Err(Error::DimensionMismatch {
            expected: hierarchy.rows(),
            got: levels.len(),
        });
    }
    if levels.len() < 2 {
        return Err(Error::TooFewLevels(levels.len()));
    }
    let neg_dist: Vec<f64> = hierarchy
        .iter_rows()
        .map(|t| euclid_dist(image, t).map(|d| -d))
        .collect::<Result<_>>()?;
    let lv: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
    Ok(100.0 * spearman(&lv, &neg_dist))
}

/// Fraction (x100) of ground-truth texts at each level that appear in their
/// image's retrieved set. `ground_truth[i]` lists `(text, level)` for image i.
pub fn per_level_recall(
    retrieved: &[BTreeSet<usize>],
    ground_truth: &[Vec<(usize, u8)>],
) -> BTreeMap<u8, f64> {
    let mut hit: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (got, gt) in retrieved.iter().zip(ground_truth) {
        for &(t, level) in gt {
            let e = hit.entry(level).or_insert((0, 0));
            e.1 += 1;
            if got.contains(&t) {
                e.0 += 1;
            }
        }
    }
    hit.into_iter()
        .map(|(l, (h, n))| (l, 100.0 * h as f64 / n as f64))
        .collect()
}

/// L2-normalized mean of the rows, used as the generic endpoint of traversal
/// when no explicit root embedding is available.
pub fn centroid_root(texts: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; texts.dim()];
    for row in texts.iter_rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = norm(&mean);
    if !(n > 1e-12) {
        return Err(Error::ZeroNorm { row: 0, norm: n });
    }
    Ok(mean.into_iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub image: usize,
    pub text: usize,
    pub level: u8,
    pub distance: f64,
}

/// Hierarchy-aware results over every image that owns leveled texts.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyEval {
    pub precision: f64,
    pub recall: f64,
    pub d_corr: f64,
    pub per_level_recall: BTreeMap<u8, f64>,
    pub distances: Vec<DistanceRow>,
}

/// Traversal precision/recall, per-level recall and d_corr for a gallery of
/// leveled texts. Candidates for every image are all texts in the gallery.
pub fn evaluate_hierarchy(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    image_of_text: &[usize],
    levels: &[u8],
    root: &[f64],
    steps: usize,
) -> Result<HierarchyEval> {
    if levels.len() != texts.rows() || image_of_text.len() != texts.rows() {
        return Err(Error::DimensionMismatch {
            expected: texts.rows(),
            got: levels.len(),
        });
    }
    let mut groups: Vec<Vec<(usize, u8)>> = vec![Vec::new(); images.rows()];
    for (t, (&v, &l)) in image_of_text.iter().zip(levels).enumerate() {
        groups[v].push((t, l));
    }

    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut corr_sum = 0.0;
    let mut corr_n = 0usize;
    let mut evaluated = 0usize;
    let mut retrieved_sets = Vec::new();
    let mut gts = Vec::new();
    let mut distances = Vec::new();

    for (v, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let img = images.row(v);
        let order = hierarchical_traverse(img, texts, root, steps)?;
        let got: BTreeSet<usize> = order.into_iter().collect();
        let gt: BTreeSet<usize> = group.iter().map(|&(t, _)| t).collect();
        let (p, r) = set_precision_recall(&got, &gt)?;
        precision += p;
        recall += r;
        evaluated += 1;

        for &(t, level) in group {
            distances.push(DistanceRow {
                image: v,
                text: t,
                level,
                distance: euclid_dist(img, texts.row(t))?,
            });
        }
        if group.len() >= 2 {
            let idx: Vec<usize> = group.iter().map(|&(t, _)| t).collect();
            let lv: Vec<u8> = group.iter().map(|&(_, l)| l).collect();
            corr_sum += d_corr(img, &texts.select_rows(&idx), &lv)?;
            corr_n += 1;
        }
        retrieved_sets.push(got);
        gts.push(group.clone());
    }
    if evaluated == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    if corr_n == 0 {
        return Err(Error::TooFewLevels(1));
    }
    Ok(HierarchyEval {
        precision: precision / evaluated as f64,
        recall: recall / evaluated as f64,
        d_corr: corr_sum / corr_n as f64,
        per_level_recall: per_level_recall(&retrieved_sets, &gts),
        distances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recalls: BTreeMap<String, f64>,
    pub rsum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_corr: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_level_recall: BTreeMap<String, f64>,
}

/// Everything `write_report` emits.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: RetrievalReport,
    pub distances: Vec<DistanceRow>,
}

/// Full metric suite on one gallery. Hierarchy metrics are computed only
/// when `levels` is given.
pub fn evaluate(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    image_of_text: &[usize],
    levels: Option<&[u8]>,
    root: Option<&[f64]>,
) -> Result<EvalOutput> {
    let recalls = cross_modal_recalls(images, texts, image_of_text, &[1, 5, 10])?;
    let mut report = RetrievalReport {
        rsum: rsum(&recalls)?,
        recalls: recalls.to_named(),
        precision: None,
        recall: None,
        d_corr: None,
        per_level_recall: BTreeMap::new(),
    };
    let mut distances = Vec::new();
    if let Some(levels) = levels {
        let root = match root {
            Some(r) => r.to_vec(),
            None => centroid_root(texts)?,
        };
        let h = evaluate_hierarchy(
            images,
            texts,
            image_of_text,
            levels,
            &root,
            DEFAULT_TRAVERSAL_STEPS,
        )?;
        report.precision = Some(h.precision);
        report.recall = Some(h.recall);
        report.d_corr = Some(h.d_corr);
        report.per_level_recall = h
            .per_level_recall
            .iter()
            .map(|(l, v)| (l.to_string(), *v))
            .collect();
        distances = h.distances;
    }
    Ok(EvalOutput { report, distances })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Write `report.json`, `metrics.csv`, and when hierarchy metrics exist
/// `per_level_recall.csv` and `distance_by_level.csv` into `dir`.
pub fn write_report(dir: &Path, out: &EvalOutput) -> Result<()> {
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&out.report).expect("report serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join("metrics.csv");
    let mut w = create(&path)?;
    let mut rows: Vec<(String, f64)> = out.report.recalls.clone().into_iter().collect();
    rows.push(("rsum".into(), out.report.rsum));
    for (name, v) in [
        ("precision", out.report.precision),
        ("recall", out.report.recall),
        ("d_corr", out.report.d_corr),
    ] {
        if let Some(v) = v {
            rows.push((name.into(), v));
        }
    }
    let io = |e| Error::io(&path, e);
    writeln!(w, "metric,value").map_err(io)?;
    for (name, v) in rows {
        writeln!(w, "{name},{v}").map_err(io)?;
    }
    w.flush().map_err(io)?;

    if !out.report.per_level_recall.is_empty() {
        let path = dir.join("per_level_recall.csv");
        let mut w = create(&path)?;
        let io = |e| Error::io(&path, e);
        writeln!(w, "level,recall").map_err(io)?;
        for (l, v) in &out.report.per_level_recall {
            writeln!(w, "{l},{v}").map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    if !out.distances.is_empty() {
        let path = dir.join("distance_by_level.csv");
        let mut w = create(&path)?;
        let io = |e| Error::io(&path, e);
        writeln!(w, "image,text,level,distance").map_err(io)?;
        for r in &out.distances {
            writeln!(w, "{},{},{},{}", r.image, r.text, r.level, r.distance).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

/// Mean distance per level from a `distance_by_level.csv` file.
pub fn read_level_means(path: &Path) -> Result<BTreeMap<u8, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut acc: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parsed = (cols.len() == 4)
            .then(|| Some((cols[2].parse::<u8>().ok()?, cols[3].parse::<f64>().ok()?)))
            .flatten();
        let (level, d) =
            parsed.ok_or_else(|| Error::format(path, format!("line {}: bad row", i + 1)))?;
        let e = acc.entry(level).or_insert((0.0, 0));
        e.0 += d;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}
