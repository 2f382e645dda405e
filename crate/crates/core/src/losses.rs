//! Ranking and ordering objectives over a batch of image and text embeddings.
//!
//! Every loss returns its value together with exact (sub)gradients with
//! respect to both embedding matrices. Similarities are dot products of the
//! batch embeddings and distances are Euclidean; gradients are taken with
//! respect to the embeddings as given, so callers that normalize upstream
//! must chain through the normalization themselves (see `trainer`).
//!
//! Descriptiveness values are constants: they shape margins and targets but
//! never receive gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euclid_dist, sim_matrix, EmbeddingMatrix, ScoreMatrix};

/// Images, texts, text ownership and per-text descriptiveness.
///
/// Every text is a positive for exactly one image; an image may own any
/// number of texts (including none).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    images: EmbeddingMatrix,
    texts: EmbeddingMatrix,
    image_of_text: Vec<usize>,
    deltas: Vec<f64>,
}

impl Batch {
    pub fn new(
        images: EmbeddingMatrix,
        texts: EmbeddingMatrix,
        image_of_text: Vec<usize>,
        deltas: Vec<f64>,
    ) -> Result<Self> {
        if images.dim() != texts.dim() {
            return Err(Error::DimensionMismatch {
                expected: images.dim(),
                got: texts.dim(),
            });
        }
        if image_of_text.len() != texts.rows() || deltas.len() != texts.rows() {
            return Err(Error::InvalidBatch(format!(
                "{} texts but {} owners and {} deltas",
                texts.rows(),
                image_of_text.len(),
                deltas.len()
            )));
        }
        if let Some(&bad) = image_of_text.iter().find(|&&v| v >= images.rows()) {
            return Err(Error::InvalidBatch(format!(
                "owner index {bad} out of range for {} images",
                images.rows()
            )));
        }
        if let Some(d) = deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::InvalidBatch(format!("delta {d} outside [0, 1]")));
        }
        Ok(Batch {
            images,
            texts,
            image_of_text,
            deltas,
        })
    }

    pub fn images(&self) -> &EmbeddingMatrix {
        &self.images
    }

    pub fn texts(&self) -> &EmbeddingMatrix {
        &self.texts
    }

    pub fn image_of_text(&self) -> &[usize] {
        &self.image_of_text
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn num_images(&self) -> usize {
        self.images.rows()
    }

    pub fn num_texts(&self) -> usize {
        self.texts.rows()
    }

    /// Positive `(image, text)` pairs, one per text, in text order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.image_of_text.iter().enumerate().map(|(t, &v)| (v, t))
    }

    /// Texts owned by each image, ascending.
    pub fn texts_by_image(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_images()];
        for (v, t) in self.pairs() {
            groups[v].push(t);
        }
        groups
    }

    /// Same structure with replaced embeddings.
    pub fn with_embeddings(&self, images: EmbeddingMatrix, texts: EmbeddingMatrix) -> Result<Self> {
        Batch::new(images, texts, self.image_of_text.clone(), self.deltas.clone())
    }

    /// Same structure and embeddings with replaced descriptiveness values.
    pub fn with_deltas(&self, deltas: Vec<f64>) -> Result<Self> {
        Batch::new(
            self.images.clone(),
            self.texts.clone(),
            self.image_of_text.clone(),
            deltas,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Fixed margin of the conventional triplet loss.
    pub alpha: f64,
    /// Divisor applied to descriptiveness sums to form adaptive margins.
    pub tau: f64,
    /// Weight of the ordering term in the overall loss.
    pub lambda: f64,
    pub eps_delta: f64,
    pub eps_dist: f64,
    /// Off during warm-up: hinge terms are averaged over all admissible
    /// negatives instead of taking the hardest one.
    pub use_hardest_mining: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            tau: 6.0,
            lambda: 0.07,
            eps_delta: 1e-4,
            eps_dist: 1e-4,
            use_hardest_mining: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.eps_delta > 0.0 && self.eps_dist > 0.0) {
            return Err(Error::InvalidConfig("eps_delta and eps_dist must be > 0".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossDiagnostics {
    /// Ranking term (conventional or adaptive), unweighted.
    pub triplet: f64,
    /// Ordering term, unweighted.
    pub ordering: f64,
    pub active_hinges: usize,
    pub hardest_mining: bool,
    /// Smallest |hinge argument| seen; finite-difference checks avoid
    /// batches where this is within a few steps of zero.
    pub min_hinge_margin: f64,
    /// Smallest gap between the mined negative and the runner-up.
    pub min_mining_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_images: EmbeddingMatrix,
    pub grad_texts: EmbeddingMatrix,
    pub diagnostics: LossDiagnostics,
}

/// Hardest negatives for every positive pair, indexed by text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedNegatives {
    /// Most similar text to the pair's image among texts owned by other images.
    pub text: Vec<usize>,
    /// Most similar other image to the pair's text.
    pub image: Vec<usize>,
}

fn argmax_with_gap(candidates: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut runner_up = f64::NEG_INFINITY;
    for (i, s) in candidates {
        match best {
            Some((_, b)) if s > b => {
                runner_up = b;
                best = Some((i, s));
            }
            Some(_) => runner_up = runner_up.max(s),
            None => best = Some((i, s)),
        }
    }
    best.map(|(i, b)| (i, b - runner_up))
}

fn mine(sims: &ScoreMatrix, image_of_text: &[usize]) -> Result<(MinedNegatives, f64)> {
    let (n_img, n_txt) = (sims.rows(), sims.cols());
    if image_of_text.len() != n_txt {
        return Err(Error::InvalidBatch(format!(
            "{} owners for {n_txt} texts",
            image_of_text.len()
        )));
    }
    let mut text = Vec::with_capacity(n_txt);
    let mut image = Vec::with_capacity(n_txt);
    let mut min_gap = f64::INFINITY;
    for (t, &v) in image_of_text.iter().enumerate() {
        let (tn, gap) = argmax_with_gap(
            (0..n_txt)
                .filter(|&j| image_of_text[j] != v)
                .map(|j| (j, sims.get(v, j))),
        )
        .ok_or(Error::NoNegative { pair: t, side: "text" })?;
        min_gap = min_gap.min(gap);
        let (vn, gap) = argmax_with_gap((0..n_img).filter(|&i| i != v).map(|i| (i, sims.get(i, t))))
            .ok_or(Error::NoNegative { pair: t, side: "image" })?;
        min_gap = min_gap.min(gap);
        text.push(tn);
        image.push(vn);
    }
    Ok((MinedNegatives { text, image }, min_gap))
}

/// Online hardest-negative mining over an `images x texts` similarity matrix.
///
/// Texts owned by the anchor image are never candidates. Ties go to the
/// lowest index.
pub fn hardest_negatives(sims: &ScoreMatrix, image_of_text: &[usize]) -> Result<MinedNegatives> {
    mine(sims, image_of_text).map(|(m, _)| m)
}

/// `(alpha_i2t, alpha_i2i)` for a positive text and its mined negative text.
pub fn adaptive_margins(delta_t: f64, delta_tneg: f64, tau: f64) -> (f64, f64) {
    ((delta_t + delta_tneg) / tau, (delta_t + delta_t) / tau)
}

#[derive(Clone, Copy)]
enum Margin {
    Fixed(f64),
    Adaptive(f64),
}

impl Margin {
    fn i2t(self, deltas: &[f64], t: usize, tn: usize) -> f64 {
        match self {
            Margin::Fixed(a) => a,
            Margin::Adaptive(tau) => adaptive_margins(deltas[t], deltas[tn], tau).0,
        }
    }

    fn i2i(self, deltas: &[f64], t: usize) -> f64 {
        match self {
            Margin::Fixed(a) => a,
            Margin::Adaptive(tau) => adaptive_margins(deltas[t], deltas[t], tau).1,
        }
    }
}

/// Accumulates hinge terms and `dL/dS`.
struct HingeAcc {
    value: f64,
    dsim: ScoreMatrix,
    active: usize,
    min_margin: f64,
}

impl HingeAcc {
    fn add(&mut self, arg: f64, weight: f64, pos: (usize, usize), neg: (usize, usize)) {
        self.min_margin = self.min_margin.min(arg.abs());
        if arg > 0.0 {
            self.value += weight * arg;
            self.active += 1;
            self.bump(pos, -weight);
            self.bump(neg, weight);
        }
    }

    fn bump(&mut self, (i, j): (usize, usize), w: f64) {
        *self.dsim.get_mut(i, j) += w;
    }
}

fn ranking_loss(batch: &Batch, config: &LossConfig, margin: Margin) -> Result<LossOutput> {
    config.validate()?;
    let sims = sim_matrix(&batch.images, &batch.texts)?;
    let (n_img, n_txt) = (batch.num_images(), batch.num_texts());
    let deltas = &batch.deltas;
    let owner = &batch.image_of_text;
    let mut acc = HingeAcc {
        value: 0.0,
        dsim: ScoreMatrix::new(n_img, n_txt, vec![0.0; n_img * n_txt])?,
        active: 0,
        min_margin: f64::INFINITY,
    };
    let mut min_gap = f64::INFINITY;

    if config.use_hardest_mining {
        let (mined, gap) = mine(&sims, owner)?;
        min_gap = gap;
        for (v, t) in batch.pairs() {
            let pos = sims.get(v, t);
            let (tn, vn) = (mined.text[t], mined.image[t]);
            let a = margin.i2t(deltas, t, tn) - pos + sims.get(v, tn);
            acc.add(a, 1.0, (v, t), (v, tn));
            let b = margin.i2i(deltas, t) - pos + sims.get(vn, t);
            acc.add(b, 1.0, (v, t), (vn, t));
        }
    } else {
        for (v, t) in batch.pairs() {
            let pos = sims.get(v, t);
            let neg_texts: Vec<usize> = (0..n_txt).filter(|&j| owner[j] != v).collect();
            if neg_texts.is_empty() {
                return Err(Error::NoNegative { pair: t, side: "text" });
            }
            if n_img < 2 {
                return Err(Error::NoNegative { pair: t, side: "image" });
            }
            let w = 1.0 / neg_texts.len() as f64;
            for &tn in &neg_texts {
                let a = margin.i2t(deltas, t, tn) - pos + sims.get(v, tn);
                acc.add(a, w, (v, t), (v, tn));
            }
            let w = 1.0 / (n_img - 1) as f64;
            let a_i2i = margin.i2i(deltas, t);
            for vn in (0..n_img).filter(|&i| i != v) {
                let b = a_i2i - pos + sims.get(vn, t);
                acc.add(b, w, (v, t), (vn, t));
            }
        }
    }

    let (grad_images, grad_texts) = sim_grads(&acc.dsim, &batch.images, &batch.texts);
    Ok(LossOutput {
        value: acc.value,
        grad_images,
        grad_texts,
        diagnostics: LossDiagnostics {
            triplet: acc.value,
            ordering: 0.0,
            active_hinges: acc.active,
            hardest_mining: config.use_hardest_mining,
            min_hinge_margin: acc.min_margin,
            min_mining_gap: min_gap,
        },
    })
}

/// Chain `dL/dS` through `S = images * texts^T`.
fn sim_grads(
    dsim: &ScoreMatrix,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let dim = images.dim();
    let mut gi = EmbeddingMatrix::zeros(images.rows(), dim);
    let mut gt = EmbeddingMatrix::zeros(texts.rows(), dim);
    for v in 0..images.rows() {
        for t in 0..texts.rows() {
            let g = dsim.get(v, t);
            if g == 0.0 {
                continue;
            }
            let (iv, tt) = (images.row(v), texts.row(t));
            for (o, x) in gi.row_mut(v).iter_mut().zip(tt) {
                *o += g * x;
            }
            for (o, x) in gt.row_mut(t).iter_mut().zip(iv) {
                *o += g * x;
            }
        }
    }
    (gi, gt)
}

/// Conventional hinge triplet loss with a fixed margin, summed over pairs.
pub fn triplet_loss(batch: &Batch, config: &LossConfig) -> Result<LossOutput> {
    ranking_loss(batch, config, Margin::Fixed(config.alpha))
}

/// Triplet loss with per-pair margins derived from descriptiveness.
pub fn adaptive_triplet_loss(batch: &Batch, config: &LossConfig) -> Result<LossOutput> {
    ranking_loss(batch, config, Margin::Adaptive(config.tau))
}

/// Squared log-ratio penalty between image-text distance ratios and inverse
/// descriptiveness ratios, over every unordered pair of texts sharing an
/// image.
pub fn ordering_loss(batch: &Batch, config: &LossConfig) -> Result<LossOutput> {
    config.validate()?;
    let dim = batch.images.dim();
    let mut gi = EmbeddingMatrix::zeros(batch.num_images(), dim);
    let mut gt = EmbeddingMatrix::zeros(batch.num_texts(), dim);
    let mut value = 0.0;

    for (v, group) in batch.texts_by_image().into_iter().enumerate() {
        if group.len() < 2 {
            continue;
        }
        let img = batch.images.row(v);
        let dists: Vec<f64> = group
            .iter()
            .map(|&t| euclid_dist(img, batch.texts.row(t)))
            .collect::<Result<_>>()?;
        for a in 0..group.len() {
            for b in a + 1..group.len() {
                let (t, tp) = (group[a], group[b]);
                let (d_t, d_tp) = (dists[a], dists[b]);
                let delta_t = batch.deltas[t].max(config.eps_delta);
                let delta_tp = batch.deltas[tp].max(config.eps_delta);
                let r = (d_t.max(config.eps_dist) / d_tp.max(config.eps_dist)).ln()
                    - (delta_tp / delta_t).ln();
                value += r * r;
                // d/dd of r^2 is +-2r/d; the clamp is flat below eps_dist.
                for (text, d, sign) in [(t, d_t, 1.0), (tp, d_tp, -1.0)] {
                    if d <= config.eps_dist {
                        continue;
                    }
                    let coef = sign * 2.0 * r / (d * d);
                    let tv = batch.texts.row(text).to_vec();
                    for (k, o) in gi.row_mut(v).iter_mut().enumerate() {
                        *o += coef * (img[k] - tv[k]);
                    }
                    for (k, o) in gt.row_mut(text).iter_mut().enumerate() {
                        *o -= coef * (img[k] - tv[k]);
                    }
                }
            }
        }
    }

    Ok(LossOutput {
        value,
        grad_images: gi,
        grad_texts: gt,
        diagnostics: LossDiagnostics {
            triplet: 0.0,
            ordering: value,
            active_hinges: 0,
            hardest_mining: false,
            min_hinge_margin: f64::INFINITY,
            min_mining_gap: f64::INFINITY,
        },
    })
}

/// Adaptive triplet loss plus `lambda` times the ordering loss.
pub fn overall_loss(batch: &Batch, config: &LossConfig) -> Result<LossOutput> {
    let mut out = adaptive_triplet_loss(batch, config)?;
    let ord = ordering_loss(batch, config)?;
    out.value += config.lambda * ord.value;
    out.grad_images.add_scaled(&ord.grad_images, config.lambda);
    out.grad_texts.add_scaled(&ord.grad_texts, config.lambda);
    out.diagnostics.ordering = ord.value;
    Ok(out)
}

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Fixed-margin triplet loss.
    Triplet,
    /// Descriptiveness-adaptive margins.
    AdaptiveTriplet,
    /// Adaptive triplet plus weighted ordering term.
    #[default]
    Overall,
}

impl Objective {
    pub fn evaluate(self, batch: &Batch, config: &LossConfig) -> Result<LossOutput> {
        match self {
            Objective::Triplet => triplet_loss(batch, config),
            Objective::AdaptiveTriplet => adaptive_triplet_loss(batch, config),
            Objective::Overall => overall_loss(batch, config),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(Objective::Triplet),
            "adaptive_triplet" | "adaptive" => Ok(Objective::AdaptiveTriplet),
            "overall" => Ok(Objective::Overall),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

/// Central differences of `loss` with respect to every coordinate of both
/// embedding matrices. Embeddings are perturbed in place, without
/// re-normalization.
pub fn finite_diff_grad<F>(
    loss: F,
    batch: &Batch,
    h: f64,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)>
where
    F: Fn(&Batch) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be > 0, got {h}")));
    }
    let mut work = batch.clone();
    let mut grads = [
        EmbeddingMatrix::zeros(batch.num_images(), batch.images.dim()),
        EmbeddingMatrix::zeros(batch.num_texts(), batch.texts.dim()),
    ];
    for (which, grad) in grads.iter_mut().enumerate() {
        let n = grad.as_slice().len();
        for k in 0..n {
            let orig = target(&mut work, which)[k];
            target(&mut work, which)[k] = orig + h;
            let plus = loss(&work)?;
            target(&mut work, which)[k] = orig - h;
            let minus = loss(&work)?;
            target(&mut work, which)[k] = orig;
            grad.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
        }
    }
    let [gi, gt] = grads;
    Ok((gi, gt))
}

fn target(batch: &mut Batch, which: usize) -> &mut [f64] {
    if which == 0 {
        batch.images.as_mut_slice()
    } else {
        batch.texts.as_mut_slice()
    }
}

/// `||a - n|| / max(||a||, ||n||)` over the concatenation of all matrices;
/// zero when both sides vanish.
pub fn relative_error(analytic: &[&EmbeddingMatrix], numeric: &[&EmbeddingMatrix]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.as_slice().iter().zip(n.as_slice()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    let scale = na.max(nn).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
