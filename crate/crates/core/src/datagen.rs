//! Synthetic hierarchical corpora with planted generic-to-specific structure.
//!
//! Level 1 of every image is a short sentence over a small shared vocabulary.
//! Each deeper level repeats the previous sentence and appends words from its
//! own, rarer vocabulary stratum, so cumulative TF-IDF rises with level.
//! Text features are the image latent plus Gaussian noise whose scale shrinks
//! linearly with level.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, write_corpus, CaptionRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{Dtype, EmbeddingMatrix, FeatureSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_images: usize,
    pub levels: usize,
    pub shared_vocab: usize,
    /// Split evenly across the strata of levels 2..=L.
    pub rare_vocab: usize,
    pub words_per_level: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Scale of the lexical component added to text features: the mean of
    /// the sentence's word vectors, where each word vector is its stratum's
    /// shared direction plus a word-specific Gaussian part. Zero disables it.
    pub lexical_weight: f64,
    /// Trailing images assigned to val and test (by index order).
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_images: 200,
            levels: 4,
            shared_vocab: 30,
            rare_vocab: 1200,
            words_per_level: 2,
            feature_dim: 32,
            noise_sigma: 0.15,
            lexical_weight: 0.0,
            val_fraction: 0.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The hierarchical scenario used for ablation runs: default sizes with
    /// a lexical component strong enough for projections to see specificity.
    pub fn ablation_scenario(seed: u64) -> Self {
        SynthSpec {
            lexical_weight: 1.5,
            seed,
            ..SynthSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_images", self.n_images),
            ("levels", self.levels),
            ("shared_vocab", self.shared_vocab),
            ("words_per_level", self.words_per_level),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.levels > 4 {
            return Err(Error::InvalidConfig("levels must be <= 4".into()));
        }
        if self.levels > 1 && self.rare_vocab == 0 {
            return Err(Error::InvalidConfig("rare_vocab must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if !(self.lexical_weight >= 0.0) || !self.lexical_weight.is_finite() {
            return Err(Error::InvalidConfig("lexical_weight must be >= 0".into()));
        }
        let fracs = [self.val_fraction, self.test_fraction];
        if fracs.iter().any(|f| !(0.0..1.0).contains(f)) || fracs.iter().sum::<f64>() >= 1.0 {
            return Err(Error::InvalidConfig(
                "val_fraction and test_fraction must be in [0, 1) with sum < 1".into(),
            ));
        }
        Ok(())
    }

    /// Image counts per split: `(train, val, test)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_images as f64;
        let test = (n * self.test_fraction).round() as usize;
        let val = (n * self.val_fraction).round() as usize;
        let val = val.min(self.n_images - test);
        (self.n_images - val - test, val, test)
    }

    /// Sizes of the rare strata for levels `2..=L`.
    fn strata(&self) -> Vec<usize> {
        let k = self.levels - 1;
        (0..k)
            .map(|i| self.rare_vocab / k + usize::from(i < self.rare_vocab % k))
            .collect()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

pub fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

pub fn caption_id(i: usize, level: usize) -> String {
    format!("img{i:05}l{level}")
}

fn word(level: usize, i: usize) -> String {
    if level == 1 {
        format!("common{i}")
    } else {
        format!("detail{level}x{i}")
    }
}

/// Round-robin draws from repeatedly shuffled decks: every word is used
/// before any is reused, and draws for one image never repeat a word.
struct Deck {
    size: usize,
    queue: Vec<usize>,
}

impl Deck {
    fn new(size: usize) -> Self {
        Deck {
            size,
            queue: Vec::new(),
        }
    }

    fn draw(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(k);
        let mut deferred = Vec::new();
        while out.len() < k {
            if self.queue.is_empty() {
                let mut fresh: Vec<usize> = (0..self.size).collect();
                fresh.shuffle(rng);
                fresh.reverse();
                self.queue = fresh;
            }
            let w = self.queue.pop().expect("refilled");
            if out.contains(&w) {
                deferred.push(w);
            } else {
                out.push(w);
            }
        }
        self.queue.extend(deferred.into_iter().rev());
        out
    }
}

/// Records for every image and level, ordered by image then level.
pub fn gen_corpus(spec: &SynthSpec) -> Result<Vec<CaptionRecord>> {
    spec.validate()?;
    let wpl = spec.words_per_level;
    if spec.shared_vocab < wpl {
        return Err(Error::VocabExhausted(format!(
            "shared_vocab {} < words_per_level {wpl}",
            spec.shared_vocab
        )));
    }
    let strata = spec.strata();
    if let Some((i, s)) = strata.iter().enumerate().find(|(_, &s)| s < wpl) {
        return Err(Error::VocabExhausted(format!(
            "level {} stratum has {s} words < words_per_level {wpl}",
            i + 2
        )));
    }
    let mut rng = spec.rng(0);
    let mut decks: Vec<Deck> = std::iter::once(spec.shared_vocab)
        .chain(strata)
        .map(Deck::new)
        .collect();
    let (n_train, n_val, _) = spec.split_sizes();
    let mut records = Vec::with_capacity(spec.n_images * spec.levels);
    for i in 0..spec.n_images {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let mut words: Vec<String> = Vec::new();
        for (l, deck) in decks.iter_mut().enumerate() {
            let level = l + 1;
            words.extend(deck.draw(wpl, &mut rng).into_iter().map(|w| word(level, w)));
            records.push(CaptionRecord {
                id: caption_id(i, level),
                image_id: image_id(i),
                text: words.join(" "),
                split,
                level: Some(level as u8),
            });
        }
    }
    Ok(records)
}

/// Image latents and noisy text features for `records`, in first-appearance
/// image order and record order.
pub fn gen_features(records: &[CaptionRecord], spec: &SynthSpec) -> Result<(FeatureSet, FeatureSet)> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let mut rng = spec.rng(1);
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    };
    let mut image_ids: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        if !index.contains_key(r.image_id.as_str()) {
            index.insert(&r.image_id, image_ids.len());
            image_ids.push(r.image_id.clone());
        }
    }
    let mut latents = Vec::with_capacity(image_ids.len() * dim);
    for _ in &image_ids {
        // Rejection guards the measure-zero origin.
        loop {
            let v = gaussian(&mut rng);
            let n = crate::geometry::norm(&v);
            if n > 1e-12 {
                latents.extend(v.iter().map(|x| x / n));
                break;
            }
        }
    }
    let latents = EmbeddingMatrix::new(image_ids.len(), dim, latents)?;
    let lexicon = if spec.lexical_weight > 0.0 {
        lexicon(spec)
    } else {
        HashMap::new()
    };
    let mut texts = Vec::with_capacity(records.len() * dim);
    for r in records {
        let level = r.level.unwrap_or(1) as usize;
        let scale = (spec.levels + 1).saturating_sub(level) as f64 * spec.noise_sigma;
        let latent = latents.row(index[r.image_id.as_str()]);
        loop {
            let noise = gaussian(&mut rng);
            let mut v: Vec<f64> = latent.iter().zip(&noise).map(|(a, g)| a + scale * g).collect();
            if spec.lexical_weight > 0.0 {
                let tokens = tokenize(&r.text);
                let w = spec.lexical_weight / tokens.len().max(1) as f64;
                for t in tokens.tokens() {
                    let lex = lexicon
                        .get(t.as_str())
                        .ok_or_else(|| Error::UnknownId(format!("word {t} outside the vocabulary")))?;
                    v.iter_mut().zip(lex).for_each(|(x, l)| *x += w * l);
                }
            }
            let n = crate::geometry::norm(&v);
            if n > 1e-12 {
                texts.extend(v.iter().map(|x| x / n));
                break;
            }
        }
    }
    let texts = EmbeddingMatrix::new(records.len(), dim, texts)?;
    Ok((
        FeatureSet::new(image_ids, latents.assume_normalized()?)?,
        FeatureSet::new(
            records.iter().map(|r| r.id.clone()).collect(),
            texts.assume_normalized()?,
        )?,
    ))
}

/// Word vectors for the whole vocabulary: a unit stratum direction plus an
/// isotropic word-specific part of expected unit norm.
fn lexicon(spec: &SynthSpec) -> HashMap<String, Vec<f64>> {
    let dim = spec.feature_dim;
    let mut rng = spec.rng(2);
    let mut gaussian = || -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let sizes: Vec<usize> = std::iter::once(spec.shared_vocab)
        .chain(if spec.levels > 1 { spec.strata() } else { vec![] })
        .collect();
    let mut out = HashMap::new();
    for (l, &size) in sizes.iter().enumerate() {
        let dir = gaussian();
        let n = crate::geometry::norm(&dir).max(1e-12);
        for i in 0..size {
            let own = gaussian();
            let v = dir
                .iter()
                .zip(&own)
                .map(|(d, g)| d / n + g / (dim as f64).sqrt())
                .collect();
            out.insert(word(l + 1, i), v);
        }
    }
    out
}

/// Paths written by [`write_synth`].
pub struct SynthPaths {
    pub corpus: std::path::PathBuf,
    pub image_features: std::path::PathBuf,
    pub text_features: std::path::PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            corpus: dir.join("corpus.jsonl"),
            image_features: dir.join("image_features.json"),
            text_features: dir.join("text_features.json"),
        }
    }
}

/// Generate and write the corpus and both feature sets (f64 binary) to `dir`.
pub fn write_synth(spec: &SynthSpec, dir: &Path) -> Result<SynthPaths> {
    let records = gen_corpus(spec)?;
    let (images, texts) = gen_features(&records, spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths::in_dir(dir);
    write_corpus(&paths.corpus, &records)?;
    images.write_binary(&paths.image_features, Dtype::F64)?;
    texts.write_binary(&paths.text_features, Dtype::F64)?;
    Ok(paths)
}
