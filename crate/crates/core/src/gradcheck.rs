//! Finite-difference verification of the analytic loss gradients on random
//! batches, both at the embedding level and end to end through the
//! projection model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{l2_normalize, EmbeddingMatrix};
use crate::losses::{
    adaptive_triplet_loss, finite_diff_grad, ordering_loss, overall_loss, relative_error,
    triplet_loss, Batch, LossConfig, LossOutput,
};
use crate::trainer::ProjectionModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub images: usize,
    pub captions_per_image: usize,
    pub dim: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Batches whose nearest hinge or mining tie lies within this many steps
    /// are redrawn.
    pub kink_guard: f64,
    pub max_redraws: usize,
    pub loss: LossConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            trials: 20,
            images: 8,
            captions_per_image: 2,
            dim: 16,
            step: 1e-5,
            tolerance: 1e-4,
            kink_guard: 10.0,
            max_redraws: 1000,
            loss: LossConfig::default(),
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if self.images < 2 || self.captions_per_image < 2 || self.dim == 0 {
            return Err(Error::InvalidConfig(
                "need images >= 2, captions_per_image >= 2, dim >= 1".into(),
            ));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) || !(self.kink_guard >= 0.0) {
            return Err(Error::InvalidConfig(
                "step and tolerance must be > 0, kink_guard >= 0".into(),
            ));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckTarget {
    Triplet,
    AdaptiveTriplet,
    Ordering,
    Overall,
    /// Overall loss differentiated with respect to projection parameters.
    EndToEnd,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 5] = [
        CheckTarget::Triplet,
        CheckTarget::AdaptiveTriplet,
        CheckTarget::Ordering,
        CheckTarget::Overall,
        CheckTarget::EndToEnd,
    ];

    fn loss_fn(self) -> fn(&Batch, &LossConfig) -> Result<LossOutput> {
        match self {
            CheckTarget::Triplet => triplet_loss,
            CheckTarget::AdaptiveTriplet => adaptive_triplet_loss,
            CheckTarget::Ordering => ordering_loss,
            CheckTarget::Overall | CheckTarget::EndToEnd => overall_loss,
        }
    }
}

/// Coordinate with the largest absolute disagreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub target: CheckTarget,
    pub hardest_mining: bool,
    pub relative_error: f64,
    pub passed: bool,
    pub worst: Coordinate,
    /// Batches discarded before this one for lying near a kink.
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub passed: bool,
    pub max_relative_error: f64,
    pub results: Vec<TrialResult>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TrialResult> {
        self.results
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    EmbeddingMatrix::new(rows, dim, data).expect("shape")
}

fn owners(cfg: &GradCheckConfig) -> Vec<usize> {
    (0..cfg.images * cfg.captions_per_image)
        .map(|t| t / cfg.captions_per_image)
        .collect()
}

fn deltas(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..cfg.images * cfg.captions_per_image)
        .map(|_| rng.random_range(0.05..=1.0))
        .collect()
}

fn near_kink(batch: &Batch, cfg: &GradCheckConfig) -> Result<bool> {
    let guard = cfg.kink_guard * cfg.step;
    for mining in [true, false] {
        let lc = LossConfig {
            use_hardest_mining: mining,
            ..cfg.loss
        };
        for f in [triplet_loss, adaptive_triplet_loss] {
            let d = f(batch, &lc)?.diagnostics;
            if d.min_hinge_margin < guard || (mining && d.min_mining_gap < guard) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

fn worst_coordinate(
    names: &[(&str, usize)],
    analytic: &[f64],
    numeric: &[f64],
) -> Coordinate {
    let (k, _) = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .enumerate()
        .fold((0, -1.0), |best, (k, d)| if d > best.1 { (k, d) } else { best });
    let mut offset = 0;
    for &(name, len) in names {
        if k < offset + len {
            return Coordinate {
                tensor: name.to_owned(),
                index: k - offset,
                analytic: analytic[k],
                numeric: numeric[k],
            };
        }
        offset += len;
    }
    unreachable!("index within layout")
}

fn flatten(m: &[&EmbeddingMatrix]) -> Vec<f64> {
    m.iter().flat_map(|x| x.as_slice().iter().copied()).collect()
}

fn check_embedding_level(
    target: CheckTarget,
    batch: &Batch,
    lc: &LossConfig,
    h: f64,
) -> Result<(f64, Coordinate)> {
    let f = target.loss_fn();
    let out = f(batch, lc)?;
    let (ni, nt) = finite_diff_grad(|b| f(b, lc).map(|o| o.value), batch, h)?;
    let err = relative_error(&[&out.grad_images, &out.grad_texts], &[&ni, &nt]);
    let names = [
        ("images", out.grad_images.as_slice().len()),
        ("texts", out.grad_texts.as_slice().len()),
    ];
    let worst = worst_coordinate(
        &names,
        &flatten(&[&out.grad_images, &out.grad_texts]),
        &flatten(&[&ni, &nt]),
    );
    Ok((err, worst))
}

struct EndToEnd {
    model: ProjectionModel,
    image_feats: EmbeddingMatrix,
    text_feats: EmbeddingMatrix,
    owner: Vec<usize>,
    deltas: Vec<f64>,
}

impl EndToEnd {
    fn batch(&self, model: &ProjectionModel) -> Result<Batch> {
        let (ei, et) = model.forward(&self.image_feats, &self.text_feats)?;
        Batch::new(ei, et, self.owner.clone(), self.deltas.clone())
    }

    fn check(&self, lc: &LossConfig, h: f64) -> Result<(f64, Coordinate)> {
        let batch = self.batch(&self.model)?;
        let out = overall_loss(&batch, lc)?;
        let grads = self.model.backward(
            &self.image_feats,
            &self.text_feats,
            &out.grad_images,
            &out.grad_texts,
        )?;
        let analytic = grads.flat_params();
        let base = self.model.flat_params();
        let mut work = self.model.clone();
        let mut numeric = vec![0.0; base.len()];
        let mut p = base.clone();
        for k in 0..base.len() {
            p[k] = base[k] + h;
            work.set_flat_params(&p)?;
            let plus = overall_loss(&self.batch(&work)?, lc)?.value;
            p[k] = base[k] - h;
            work.set_flat_params(&p)?;
            let minus = overall_loss(&self.batch(&work)?, lc)?.value;
            p[k] = base[k];
            numeric[k] = (plus - minus) / (2.0 * h);
        }
        let as_row = |v: &[f64]| EmbeddingMatrix::new(1, v.len(), v.to_vec()).expect("shape");
        let err = relative_error(&[&as_row(&analytic)], &[&as_row(&numeric)]);
        let worst = worst_coordinate(&self.model.param_layout(), &analytic, &numeric);
        Ok((err, worst))
    }
}

/// Run every target with mining on and off for each trial. Each trial draws
/// a fresh embedding batch and a fresh model/feature set, redrawing either
/// while it sits within `kink_guard` steps of a hinge or mining tie.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_txt = cfg.images * cfg.captions_per_image;
    let mut results = Vec::new();
    for trial in 0..cfg.trials {
        let mut redraws = 0;
        let batch = loop {
            let b = Batch::new(
                l2_normalize(&gaussian_matrix(&mut rng, cfg.images, cfg.dim))?,
                l2_normalize(&gaussian_matrix(&mut rng, n_txt, cfg.dim))?,
                owners(cfg),
                deltas(cfg, &mut rng),
            )?;
            if !near_kink(&b, cfg)? {
                break b;
            }
            redraws += 1;
            if redraws > cfg.max_redraws {
                return Err(Error::InvalidConfig(format!(
                    "no kink-free batch after {redraws} draws"
                )));
            }
        };
        let mut e2e_redraws = 0;
        let e2e = loop {
            let model = ProjectionModel::init(cfg.dim, cfg.dim, cfg.dim, &mut rng);
            let e = EndToEnd {
                image_feats: gaussian_matrix(&mut rng, cfg.images, cfg.dim),
                text_feats: gaussian_matrix(&mut rng, n_txt, cfg.dim),
                owner: owners(cfg),
                deltas: deltas(cfg, &mut rng),
                model,
            };
            if !near_kink(&e.batch(&e.model)?, cfg)? {
                break e;
            }
            e2e_redraws += 1;
            if e2e_redraws > cfg.max_redraws {
                return Err(Error::InvalidConfig(format!(
                    "no kink-free model after {e2e_redraws} draws"
                )));
            }
        };
        for target in CheckTarget::ALL {
            for mining in [true, false] {
                let lc = LossConfig {
                    use_hardest_mining: mining,
                    ..cfg.loss
                };
                let (err, worst) = match target {
                    CheckTarget::EndToEnd => e2e.check(&lc, cfg.step)?,
                    _ => check_embedding_level(target, &batch, &lc, cfg.step)?,
                };
                results.push(TrialResult {
                    trial,
                    target,
                    hardest_mining: mining,
                    relative_error: err,
                    passed: err < cfg.tolerance,
                    worst,
                    redraws: if target == CheckTarget::EndToEnd {
                        e2e_redraws
                    } else {
                        redraws
                    },
                });
            }
        }
    }
    let max = results
        .iter()
        .map(|r| r.relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        config: cfg.clone(),
        passed: results.iter().all(|r| r.passed),
        max_relative_error: max,
        results,
    })
}
