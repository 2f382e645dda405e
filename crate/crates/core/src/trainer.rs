//! Shared-embedding training over fixed input features.
//!
//! Each modality is mapped by its own affine projection and L2-normalized.
//! Batches hold every caption of each sampled image so the ordering term has
//! same-image text pairs to work with. Hardest-negative mining is switched off
//! for the first `warmup_epochs` epochs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CaptionRecord, DescriptivenessTable, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::{dot, norm, EmbeddingMatrix, FeatureSet};
use crate::losses::{ordering_loss, Batch, LossConfig, LossOutput, Objective};

/// One modality's `x W + b` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `d_in x d_out`, row-major.
    pub weight: EmbeddingMatrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let bias = (0..d_out).map(|_| rng.random_range(-bound..=bound)).collect();
        Affine {
            weight: EmbeddingMatrix::new(d_in, d_out, weight).expect("shape"),
            bias,
        }
    }

    fn zeros_like(&self) -> Self {
        Affine {
            weight: EmbeddingMatrix::zeros(self.weight.rows(), self.weight.dim()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn d_in(&self) -> usize {
        self.weight.rows()
    }

    /// Unnormalized outputs.
    fn apply(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if x.dim() != self.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.d_in(),
                got: x.dim(),
            });
        }
        let d_out = self.bias.len();
        let mut out = EmbeddingMatrix::zeros(x.rows(), d_out);
        for (i, xr) in x.iter_rows().enumerate() {
            let yr = out.row_mut(i);
            yr.copy_from_slice(&self.bias);
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                for (y, w) in yr.iter_mut().zip(self.weight.row(k)) {
                    *y += xk * w;
                }
            }
        }
        Ok(out)
    }

    /// Normalized outputs and pre-normalization norms.
    fn forward(&self, x: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, Vec<f64>)> {
        let mut y = self.apply(x)?;
        let mut norms = Vec::with_capacity(y.rows());
        for i in 0..y.rows() {
            let n = norm(y.row(i));
            if !(n >= 1e-12) {
                return Err(Error::ZeroNorm { row: i, norm: n });
            }
            y.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok((y.assume_normalized()?, norms))
    }

    /// Accumulate parameter gradients given `dL/de` for normalized outputs
    /// `e = y / |y|`: `dL/dy = (g - e (e.g)) / |y|`.
    fn backward(
        &self,
        x: &EmbeddingMatrix,
        emb: &EmbeddingMatrix,
        norms: &[f64],
        grad_emb: &EmbeddingMatrix,
        out: &mut Affine,
    ) {
        let d_out = self.bias.len();
        let mut gy = vec![0.0; d_out];
        for i in 0..x.rows() {
            let (e, g) = (emb.row(i), grad_emb.row(i));
            let eg = dot(e, g);
            for k in 0..d_out {
                gy[k] = (g[k] - e[k] * eg) / norms[i];
            }
            for (b, v) in out.bias.iter_mut().zip(&gy) {
                *b += v;
            }
            for (k, &xk) in x.row(i).iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                for (w, v) in out.weight.row_mut(k).iter_mut().zip(&gy) {
                    *w += xk * v;
                }
            }
        }
    }
}

/// Affine image and text projections into a shared unit-sphere space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    pub image: Affine,
    pub text: Affine,
}

/// Gradients with the same layout as the model.
pub type ModelGrads = ProjectionModel;

impl ProjectionModel {
    /// Uniform in `[-1/sqrt(d_in), 1/sqrt(d_in)]` for weights and biases.
    pub fn init(d_in_image: usize, d_in_text: usize, dim: usize, rng: &mut impl Rng) -> Self {
        ProjectionModel {
            image: Affine::init(d_in_image, dim, rng),
            text: Affine::init(d_in_text, dim, rng),
        }
    }

    /// Identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut w = EmbeddingMatrix::zeros(dim, dim);
        for i in 0..dim {
            w.row_mut(i)[i] = 1.0;
        }
        let a = Affine {
            weight: w,
            bias: vec![0.0; dim],
        };
        ProjectionModel {
            image: a.clone(),
            text: a,
        }
    }

    pub fn dim(&self) -> usize {
        self.image.bias.len()
    }

    pub fn forward(
        &self,
        image_feats: &EmbeddingMatrix,
        text_feats: &EmbeddingMatrix,
    ) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        Ok((self.image.forward(image_feats)?.0, self.text.forward(text_feats)?.0))
    }

    pub fn embed_images(&self, feats: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        Ok(self.image.forward(feats)?.0)
    }

    pub fn embed_texts(&self, feats: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        Ok(self.text.forward(feats)?.0)
    }

    /// Parameter gradients from embedding gradients, through normalization
    /// and the affine maps.
    pub fn backward(
        &self,
        image_feats: &EmbeddingMatrix,
        text_feats: &EmbeddingMatrix,
        grad_images: &EmbeddingMatrix,
        grad_texts: &EmbeddingMatrix,
    ) -> Result<ModelGrads> {
        let mut grads = ProjectionModel {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
        };
        let (ei, ni) = self.image.forward(image_feats)?;
        let (et, nt) = self.text.forward(text_feats)?;
        for (g, e) in [(grad_images, &ei), (grad_texts, &et)] {
            if (g.rows(), g.dim()) != (e.rows(), e.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: e.rows() * e.dim(),
                    got: g.rows() * g.dim(),
                });
            }
        }
        self.image
            .backward(image_feats, &ei, &ni, grad_images, &mut grads.image);
        self.text
            .backward(text_feats, &et, &nt, grad_texts, &mut grads.text);
        Ok(grads)
    }

    /// `(parameters, decays)` in a fixed order; biases never decay.
    fn params_mut(&mut self) -> [(&mut [f64], bool); 4] {
        [
            (self.image.weight.as_mut_slice(), true),
            (self.image.bias.as_mut_slice(), false),
            (self.text.weight.as_mut_slice(), true),
            (self.text.bias.as_mut_slice(), false),
        ]
    }

    fn params(&self) -> [&[f64]; 4] {
        [
            self.image.weight.as_slice(),
            &self.image.bias,
            self.text.weight.as_slice(),
            &self.text.bias,
        ]
    }

    /// All parameters in a fixed order: image weight, image bias, text
    /// weight, text bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flatten().copied().collect()
    }

    /// Inverse of [`flat_params`](Self::flat_params).
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut rest = values;
        for (p, _) in self.params_mut() {
            let (head, tail) = rest.split_at(p.len());
            p.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Names of the four parameter tensors and their lengths, in
    /// [`flat_params`](Self::flat_params) order.
    pub fn param_layout(&self) -> [(&'static str, usize); 4] {
        let p = self.params();
        [
            ("image.weight", p[0].len()),
            ("image.bias", p[1].len()),
            ("text.weight", p[2].len()),
            ("text.bias", p[3].len()),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn update(
        &mut self,
        model: &mut ProjectionModel,
        grads: &ModelGrads,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut offset = 0;
        for ((param, decays), grad) in model.params_mut().into_iter().zip(grads.params()) {
            for (i, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
                let j = offset + i;
                self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g;
                self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g * g;
                if decays {
                    *p *= 1.0 - lr * weight_decay;
                }
                let m_hat = self.m[j] / bc1;
                let v_hat = self.v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += param.len();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Maximum texts per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Zero-based epoch from which the decayed rate applies.
    pub lr_decay_epoch: usize,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Shared embedding dimension.
    pub embed_dim: usize,
    pub objective: Objective,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 25,
            lr: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 15,
            weight_decay: 1e-4,
            warmup_epochs: 2,
            seed: 0,
            embed_dim: 32,
            objective: Objective::Overall,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short schedule for the synthetic scenario: 10 epochs, batches of 64
    /// texts, a larger learning rate; everything else at the defaults.
    pub fn quick_start() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 10,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "need warmup_epochs ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "lr and lr_decay_factor must be > 0, weight_decay >= 0".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Features, caption ownership and descriptiveness for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_feats: EmbeddingMatrix,
    pub text_feats: EmbeddingMatrix,
    pub image_of_text: Vec<usize>,
    pub deltas: Vec<f64>,
    pub levels: Option<Vec<u8>>,
    captions: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        image_feats: EmbeddingMatrix,
        text_feats: EmbeddingMatrix,
        image_of_text: Vec<usize>,
        deltas: Vec<f64>,
        levels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n_txt = text_feats.rows();
        if image_of_text.len() != n_txt || deltas.len() != n_txt {
            return Err(Error::InvalidConfig(format!(
                "{n_txt} text rows but {} owners and {} deltas",
                image_of_text.len(),
                deltas.len()
            )));
        }
        if levels.as_ref().is_some_and(|l| l.len() != n_txt) {
            return Err(Error::InvalidConfig("levels length differs from texts".into()));
        }
        if deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::InvalidConfig("delta outside [0, 1]".into()));
        }
        let mut captions = vec![Vec::new(); image_feats.rows()];
        for (t, &v) in image_of_text.iter().enumerate() {
            captions
                .get_mut(v)
                .ok_or_else(|| Error::UnknownId(format!("image index {v}")))?
                .push(t);
        }
        Ok(Dataset {
            image_feats,
            text_feats,
            image_of_text,
            deltas,
            levels,
            captions,
        })
    }

    /// Join corpus records of `split` with feature rows (by image id and
    /// caption id) and table deltas (by caption id). Only images with at
    /// least one caption in the split are kept. Without a table every delta
    /// is 1, which suits evaluation where deltas are unused.
    pub fn assemble(
        records: &[CaptionRecord],
        split: Split,
        table: Option<&DescriptivenessTable>,
        images: &FeatureSet,
        texts: &FeatureSet,
    ) -> Result<Self> {
        let img_index = images.index_of();
        let txt_index = texts.index_of();
        let mut image_rows: Vec<usize> = Vec::new();
        let mut local: HashMap<&str, usize> = HashMap::new();
        let mut text_rows = Vec::new();
        let mut owner = Vec::new();
        let mut deltas = Vec::new();
        let mut levels = Vec::new();
        let mut all_leveled = true;
        for rec in records.iter().filter(|r| r.split == split) {
            let v = match local.get(rec.image_id.as_str()) {
                Some(&v) => v,
                None => {
                    let row = *img_index
                        .get(rec.image_id.as_str())
                        .ok_or_else(|| Error::UnknownId(format!("image {}", rec.image_id)))?;
                    image_rows.push(row);
                    local.insert(rec.image_id.as_str(), image_rows.len() - 1);
                    image_rows.len() - 1
                }
            };
            let t = *txt_index
                .get(rec.id.as_str())
                .ok_or_else(|| Error::UnknownId(format!("text features for {}", rec.id)))?;
            let delta = match table {
                Some(table) => table
                    .delta(&rec.id)
                    .ok_or_else(|| Error::UnknownId(format!("descriptiveness for {}", rec.id)))?,
                None => 1.0,
            };
            text_rows.push(t);
            owner.push(v);
            deltas.push(delta);
            match rec.level {
                Some(l) => levels.push(l),
                None => all_leveled = false,
            }
        }
        if text_rows.is_empty() {
            return Err(Error::InvalidConfig(format!("no captions in split {split}")));
        }
        Dataset::new(
            images.matrix.select_rows(&image_rows),
            texts.matrix.select_rows(&text_rows),
            owner,
            deltas,
            all_leveled.then_some(levels),
        )
    }

    pub fn num_images(&self) -> usize {
        self.image_feats.rows()
    }

    pub fn num_texts(&self) -> usize {
        self.text_feats.rows()
    }

    pub fn captions_of(&self, image: usize) -> &[usize] {
        &self.captions[image]
    }
}

/// Dataset rows for one batch, with batch-local ownership.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub images: Vec<usize>,
    pub texts: Vec<usize>,
    /// Index into `images` for each entry of `texts`.
    pub image_of_text: Vec<usize>,
    pub deltas: Vec<f64>,
}

impl SampledBatch {
    fn push_image(&mut self, ds: &Dataset, image: usize, max_texts: usize) {
        let local = self.images.len();
        self.images.push(image);
        for &t in ds.captions_of(image).iter().take(max_texts) {
            self.texts.push(t);
            self.image_of_text.push(local);
            self.deltas.push(ds.deltas[t]);
        }
    }

    fn absorb(&mut self, other: SampledBatch) {
        let shift = self.images.len();
        self.images.extend(other.images);
        self.texts.extend(other.texts);
        self.image_of_text
            .extend(other.image_of_text.into_iter().map(|v| v + shift));
        self.deltas.extend(other.deltas);
    }

    /// Embed and build a loss batch.
    pub fn to_batch(&self, model: &ProjectionModel, ds: &Dataset) -> Result<(Batch, EmbeddingMatrix, EmbeddingMatrix)> {
        let xi = ds.image_feats.select_rows(&self.images);
        let xt = ds.text_feats.select_rows(&self.texts);
        let (ei, et) = model.forward(&xi, &xt)?;
        let batch = Batch::new(ei, et, self.image_of_text.clone(), self.deltas.clone())?;
        Ok((batch, xi, xt))
    }
}

/// Shuffle images and pack them, with all their captions, into batches of at
/// most `batch_size` texts. An image with more captions than `batch_size`
/// is truncated. A trailing batch with a single image is merged into the
/// previous one so every batch has a negative image.
pub fn sample_epoch(ds: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Vec<SampledBatch> {
    let mut order: Vec<usize> = (0..ds.num_images()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur = SampledBatch {
        images: vec![],
        texts: vec![],
        image_of_text: vec![],
        deltas: vec![],
    };
    for v in order {
        let n = ds.captions_of(v).len().min(batch_size);
        if !cur.images.is_empty() && cur.texts.len() + n > batch_size {
            batches.push(std::mem::replace(
                &mut cur,
                SampledBatch {
                    images: vec![],
                    texts: vec![],
                    image_of_text: vec![],
                    deltas: vec![],
                },
            ));
        }
        cur.push_image(ds, v, batch_size);
    }
    if !cur.images.is_empty() {
        match batches.last_mut() {
            Some(prev) if cur.images.len() < 2 => prev.absorb(cur),
            _ => batches.push(cur),
        }
    }
    batches
}

/// Per-epoch training record. Serialized fields form the JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch objective.
    pub loss: f64,
    /// Mean batch ranking term.
    pub triplet: f64,
    /// Mean batch ordering term (unweighted; tracked for every objective).
    pub ordering: f64,
    pub val_rsum: Option<f64>,
    #[serde(skip)]
    pub batches: usize,
    #[serde(skip)]
    pub hardest_mining_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Owns the model, optimizer and rng of one run.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    validation: Option<&'a Dataset>,
    config: TrainConfig,
    model: ProjectionModel,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.num_images() < 2 {
            return Err(Error::InvalidConfig("training needs at least 2 images".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ProjectionModel::init(
            dataset.image_feats.dim(),
            dataset.text_feats.dim(),
            config.embed_dim,
            &mut rng,
        );
        let optimizer = AdamW::new(model.num_params());
        Ok(Trainer {
            dataset,
            validation: None,
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
        })
    }

    pub fn resume(dataset: &'a Dataset, checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.config.validate()?;
        if checkpoint.config.hash() != checkpoint.config_hash {
            return Err(Error::InvalidConfig("checkpoint config hash mismatch".into()));
        }
        let m = &checkpoint.model;
        if m.image.d_in() != dataset.image_feats.dim() || m.text.d_in() != dataset.text_feats.dim()
        {
            return Err(Error::DimensionMismatch {
                expected: m.image.d_in(),
                got: dataset.image_feats.dim(),
            });
        }
        Ok(Trainer {
            dataset,
            validation: None,
            rng: checkpoint.rng.restore(),
            config: checkpoint.config,
            model: checkpoint.model,
            optimizer: checkpoint.optimizer,
            epoch: checkpoint.epoch,
        })
    }

    pub fn with_validation(mut self, validation: &'a Dataset) -> Self {
        self.validation = Some(validation);
        self
    }

    pub fn model(&self) -> &ProjectionModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            config_hash: self.config.hash(),
            config: self.config.clone(),
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let mut loss_cfg = self.config.loss;
        loss_cfg.use_hardest_mining &= epoch >= self.config.warmup_epochs;
        let lr = self.config.lr_at(epoch);
        let batches = sample_epoch(self.dataset, self.config.batch_size, &mut self.rng);

        let (mut loss_sum, mut trip_sum, mut ord_sum) = (0.0, 0.0, 0.0);
        let mut mining = 0;
        for (b, plan) in batches.iter().enumerate() {
            let (batch, xi, xt) = plan.to_batch(&self.model, self.dataset)?;
            let out: LossOutput = self.config.objective.evaluate(&batch, &loss_cfg)?;
            let ordering = match self.config.objective {
                Objective::Overall => out.diagnostics.ordering,
                _ => ordering_loss(&batch, &loss_cfg)?.value,
            };
            if !out.value.is_finite() || !ordering.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            if out.diagnostics.hardest_mining {
                mining += 1;
            }
            let grads = self
                .model
                .backward(&xi, &xt, &out.grad_images, &out.grad_texts)?;
            self.optimizer
                .update(&mut self.model, &grads, lr, self.config.weight_decay);
            loss_sum += out.value;
            trip_sum += out.diagnostics.triplet;
            ord_sum += ordering;
        }
        if !self.model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: batches.len().saturating_sub(1),
            });
        }
        let n = batches.len() as f64;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            loss: loss_sum / n,
            triplet: trip_sum / n,
            ordering: ord_sum / n,
            val_rsum: self.validation_rsum()?,
            batches: batches.len(),
            hardest_mining_batches: mining,
        })
    }

    fn validation_rsum(&self) -> Result<Option<f64>> {
        let Some(val) = self.validation else {
            return Ok(None);
        };
        if val.num_images() < 10 || val.num_texts() < 10 {
            return Ok(None);
        }
        let (ei, et) = self.model.forward(&val.image_feats, &val.text_feats)?;
        let recalls = eval::cross_modal_recalls(&ei, &et, &val.image_of_text, &[1, 5, 10])?;
        eval::rsum(&recalls).map(Some)
    }

    /// Run the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<TrainingLog> {
        let mut log = TrainingLog::default();
        while !self.is_done() {
            let rec = self.run_epoch()?;
            on_epoch(self, &rec)?;
            log.epochs.push(rec);
        }
        Ok(log)
    }
}

/// Train from scratch for `config.epochs` epochs.
pub fn train(
    dataset: &Dataset,
    validation: Option<&Dataset>,
    config: TrainConfig,
) -> Result<(ProjectionModel, TrainingLog)> {
    let mut trainer = Trainer::new(dataset, config)?;
    if let Some(v) = validation {
        trainer = trainer.with_validation(v);
    }
    let log = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.model, log))
}

/// Exact ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 as decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.seed, &mut seed).expect("validated on load");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().expect("validated on load"));
        rng
    }

    fn validate(&self) -> bool {
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.seed, &mut seed).is_ok() && self.word_pos.parse::<u128>().is_ok()
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DITMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ProjectionModel,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub config: TrainConfig,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    epoch: usize,
    optimizer_step: u64,
    rng: RngState,
    config: TrainConfig,
    config_hash: String,
    d_in_image: usize,
    d_in_text: usize,
    dim: usize,
}

impl Checkpoint {
    /// Layout: magic, u32 version, u64 header length, JSON header, f64
    /// payload (weights, then Adam first and second moments), SHA-256 of
    /// everything before it. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            rng: self.rng.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            d_in_image: self.model.image.d_in(),
            d_in_text: self.model.text.d_in(),
            dim: self.model.dim(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let floats = self
            .model
            .params()
            .into_iter()
            .flatten()
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for x in floats {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_owned());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length out of range"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..payload_start])
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        if !header.rng.validate() {
            return Err(bad("invalid rng state"));
        }
        let payload = &body[payload_start..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let (di, dt, d) = (header.d_in_image, header.d_in_text, header.dim);
        let n_params = di * d + d + dt * d + d;
        if payload.len() / 8 != 3 * n_params || d == 0 || di == 0 || dt == 0 {
            return Err(bad("payload size does not match header shapes"));
        }
        let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
        let model = ProjectionModel {
            image: Affine {
                weight: EmbeddingMatrix::new(di, d, take(di * d))?,
                bias: take(d),
            },
            text: Affine {
                weight: EmbeddingMatrix::new(dt, d, take(dt * d))?,
                bias: take(d),
            },
        };
        let mut optimizer = AdamW::new(n_params);
        optimizer.step = header.optimizer_step;
        optimizer.m = take(n_params);
        optimizer.v = take(n_params);
        Ok(Checkpoint {
            model,
            optimizer,
            epoch: header.epoch,
            rng: header.rng,
            config: header.config,
            config_hash: header.config_hash,
        })
    }

    /// Written to a sibling temp file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        f.write_all(&self.to_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
