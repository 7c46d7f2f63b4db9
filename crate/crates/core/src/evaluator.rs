//! Inception score over an arbitrary class-probability model, a small conv
//! probe classifier for the synthetic faces, and the skew sweep that shows
//! how the score reacts to class imbalance and class overlap.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CLASSIFIER_MAGIC};
use crate::embedding::{embed_caption, EmbeddingConfig};
use crate::engine::{softmax_rows, AdamConfig, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::models::{Bound, Generator, Optimizer, ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::synth::{Dataset, Split};

/// Allowed deviation of a probability row's sum from 1.
pub const ROW_TOLERANCE: f64 = 1e-6;

/// Anything that maps images to class distributions.
pub trait ClassProbabilityModel {
    fn classes(&self) -> usize;

    /// One row of `classes()` probabilities per image.
    fn predict(&self, images: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Checks that every row is a distribution over `classes` outcomes.
pub fn validate_rows(probs: &[Vec<f64>], classes: usize) -> Result<()> {
    for (i, row) in probs.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::contract(format!("row {i} has {} entries, expected {classes}", row.len())));
        }
        if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::contract(format!("row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::contract(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Column mean of `probs`: the Monte-Carlo estimate of `p(y)`.
pub fn class_marginal(probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let c = probs.first().ok_or_else(|| Error::contract("class marginal of zero rows"))?.len();
    validate_rows(probs, c)?;
    let mut m = vec![0.0; c];
    for row in probs {
        for (acc, &p) in m.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let n = probs.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    // One residual pass: the mean of identical rows then equals the row exactly.
    let mut resid = vec![0.0; c];
    for row in probs {
        for ((r, &p), &mu) in resid.iter_mut().zip(row).zip(&m) {
            *r += p - mu;
        }
    }
    m.iter_mut().zip(&resid).for_each(|(v, r)| *v += r / n);
    Ok(m)
}

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Mean over splits of `exp(mean KL)`.
    pub score_exp: f64,
    /// Population standard deviation of the per-split `exp` scores.
    pub score_std: f64,
    /// Mean over splits of the raw mean KL, without exponentiation.
    pub score_kl: f64,
    pub split_scores: Vec<f64>,
    pub split_kl: Vec<f64>,
    /// Entropy of the marginal over all rows.
    pub marginal_entropy: f64,
    /// Mean entropy of the per-image conditionals.
    pub conditional_entropy: f64,
    pub classes: usize,
    pub samples: usize,
}

/// Inception score of `probs` in `splits` contiguous, near-equal parts.
/// Each split is scored against its own marginal.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<ScoreReport> {
    let n = probs.len();
    if splits == 0 || n < splits {
        return Err(Error::contract(format!("cannot split {n} rows into {splits} parts")));
    }
    let c = probs[0].len();
    validate_rows(probs, c)?;
    let mut split_kl = Vec::with_capacity(splits);
    for k in 0..splits {
        let part = &probs[k * n / splits..(k + 1) * n / splits];
        let marginal = class_marginal(part)?;
        let kl = part.iter().map(|row| kl_divergence(row, &marginal)).sum::<f64>() / part.len() as f64;
        split_kl.push(kl);
    }
    let split_scores: Vec<f64> = split_kl.iter().map(|k| k.exp()).collect();
    let (score_exp, score_std) = mean_std(&split_scores);
    let marginal = class_marginal(probs)?;
    Ok(ScoreReport {
        score_exp,
        score_std,
        score_kl: mean_std(&split_kl).0,
        split_scores,
        split_kl,
        marginal_entropy: entropy(&marginal),
        conditional_entropy: probs.iter().map(|r| entropy(r)).sum::<f64>() / n as f64,
        classes: c,
        samples: n,
    })
}

// ---- probe classifier ----------------------------------------------------

const PROBE_WIDTHS: [usize; 2] = [16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub classes: usize,
    pub image_size: usize,
    pub config: ClassifierConfig,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Two stride-2 conv layers and a linear softmax head over identity classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeClassifier<S> {
    pub params: ParamSet<S>,
    pub meta: ClassifierMeta,
}

impl<S: Scalar> ProbeClassifier<S> {
    fn init(classes: usize, image_size: usize, config: ClassifierConfig) -> Result<Self> {
        if classes < 2 || image_size < 4 || image_size % 4 != 0 {
            return Err(Error::contract(format!(
                "probe classifier needs at least 2 classes and a size divisible by 4, got {classes} and {image_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        let mut cin = 3;
        for (i, &c) in PROBE_WIDTHS.iter().enumerate() {
            let std = (2.0 / (cin * 16) as f64).sqrt();
            p.push(format!("c.conv{i}.kernel"), Tensor::<f64>::randn(vec![c, cin, 4, 4], std, &mut rng).cast(), ParamKind::Weight);
            p.push(format!("c.conv{i}.bias"), Tensor::zeros(vec![c]), ParamKind::Weight);
            cin = c;
        }
        let flat = cin * (image_size / 4).pow(2);
        let std = (1.0 / flat as f64).sqrt();
        p.push("c.head.w", Tensor::<f64>::randn(vec![flat, classes], std, &mut rng).cast(), ParamKind::Weight);
        p.push("c.head.b", Tensor::zeros(vec![classes]), ParamKind::Weight);
        Ok(ProbeClassifier {
            params: p,
            meta: ClassifierMeta {
                classes,
                image_size,
                config,
                train_accuracy: 0.0,
                test_accuracy: 0.0,
            },
        })
    }

    fn logits(&self, tape: &mut Tape<S>, b: &Bound, images: &Tensor<S>) -> Result<Var> {
        let mut h = tape.leaf(images);
        for i in 0..PROBE_WIDTHS.len() {
            h = tape.conv2d(h, b.var(2 * i), Some(b.var(2 * i + 1)), 2, 1)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let n = images.shape()[0];
        let flat = tape.value(h).len() / n;
        let h = tape.reshape(h, vec![n, flat])?;
        let k = 2 * PROBE_WIDTHS.len();
        tape.affine(h, b.var(k), Some(b.var(k + 1)))
    }

    fn stack(&self, images: &[Tensor<f64>]) -> Result<Tensor<S>> {
        let s = self.meta.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.shape() != [3, s, s] {
                return Err(Error::contract(format!("classifier expects [3, {s}, {s}] images, got {:?}", img.shape())));
            }
            data.extend(img.data().iter().map(|&v| S::lit(v)));
        }
        Tensor::new(vec![images.len(), 3, s, s], data)
    }

    /// Trains on the identity classes of the training split and reports
    /// accuracy on both splits. Deterministic given `config.seed`.
    pub fn train(ds: &Dataset, config: ClassifierConfig) -> Result<Self> {
        let mut model = Self::init(ds.class_count, ds.image_size, config.clone())?;
        let adam = AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut opt = Optimizer::new(&model.params, adam, config.lr)?;
        let mut train = ds.indices(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let batch = config.batch_size.max(1);
        for _ in 0..config.epochs {
            train.shuffle(&mut rng);
            for ids in train.chunks(batch) {
                let images: Vec<Tensor<f64>> = ids.iter().map(|&i| ds.records[i].image.clone()).collect();
                let labels: Vec<usize> = ids.iter().map(|&i| ds.records[i].identity_class).collect();
                let x = model.stack(&images)?;
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape, true);
                let logits = model.logits(&mut tape, &bound, &x)?;
                let loss = tape.softmax_cross_entropy(logits, &labels)?;
                let grads = tape.backward(loss)?;
                opt.step(&mut model.params, &grads, &bound)?;
            }
        }
        model.meta.train_accuracy = model.accuracy(ds, Split::Train)?;
        model.meta.test_accuracy = model.accuracy(ds, Split::Test)?;
        Ok(model)
    }

    pub fn accuracy(&self, ds: &Dataset, split: Split) -> Result<f64> {
        let ids = ds.indices(split);
        if ids.is_empty() {
            return Ok(0.0);
        }
        let images: Vec<Tensor<f64>> = ids.iter().map(|&i| ds.records[i].image.clone()).collect();
        let probs = self.predict(&images)?;
        let correct = ids
            .iter()
            .zip(&probs)
            .filter(|(&i, row)| argmax(row) == ds.records[i].identity_class)
            .count();
        Ok(correct as f64 / ids.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(CLASSIFIER_MAGIC, &self.meta)?;
        ck.add_params(&self.params, None);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::<S>::load(path)?;
        if ck.magic != CLASSIFIER_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "not a classifier file".into(),
            });
        }
        let meta: ClassifierMeta = ck.meta_as()?;
        let mut model = Self::init(meta.classes, meta.image_size, meta.config.clone())?;
        ck.restore_params(&mut model.params, None)?;
        model.meta = meta;
        Ok(model)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

impl<S: Scalar> ClassProbabilityModel for ProbeClassifier<S> {
    fn classes(&self) -> usize {
        self.meta.classes
    }

    fn predict(&self, images: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
        let c = self.meta.classes;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let x = self.stack(chunk)?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let logits = self.logits(&mut tape, &bound, &x)?;
            let probs = softmax_rows(tape.value(logits), c);
            out.extend(probs.chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<f64>>()));
        }
        Ok(out)
    }
}

// ---- generator evaluation ------------------------------------------------

/// A caption labelled with the identity class it describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCaption {
    pub identity_class: usize,
    pub caption_text: String,
}

/// Test-split captions of `ds`, one per record.
pub fn class_captions(ds: &Dataset, split: Split) -> Vec<ClassCaption> {
    ds.indices(split)
        .into_iter()
        .map(|i| ClassCaption {
            identity_class: ds.records[i].identity_class,
            caption_text: ds.records[i].caption.text.clone(),
        })
        .collect()
}

pub fn write_class_captions(captions: &[ClassCaption], path: &Path) -> Result<()> {
    let text: String = captions
        .iter()
        .map(|c| serde_json::to_string(c).expect("caption serializes") + "\n")
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_class_captions(path: &Path) -> Result<Vec<ClassCaption>> {
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Generates `n_samples` images cycling through `captions` and scores them.
/// Every class must have the same number of captions and `n_samples` must
/// be a multiple of the caption count, so the generated set stays balanced.
pub fn evaluate_generator<S: Scalar>(
    generator: &Generator<S>,
    embedding: &EmbeddingConfig,
    captions: &[ClassCaption],
    classifier: &dyn ClassProbabilityModel,
    n_samples: usize,
    splits: usize,
    seed: u64,
) -> Result<ScoreReport> {
    let c = classifier.classes();
    let mut counts = vec![0usize; c];
    for cap in captions {
        *counts
            .get_mut(cap.identity_class)
            .ok_or_else(|| Error::contract(format!("caption class {} outside 0..{c}", cap.identity_class)))? += 1;
    }
    if captions.is_empty() || counts.iter().any(|&k| k != counts[0]) {
        return Err(Error::contract("captions must cover every class equally often"));
    }
    if n_samples == 0 || n_samples % captions.len() != 0 {
        return Err(Error::contract(format!(
            "{n_samples} samples cannot be spread evenly over {} captions",
            captions.len()
        )));
    }
    let embedded: Vec<Vec<S>> = captions
        .iter()
        .map(|cap| embed_caption(&cap.caption_text, embedding).to_scalar())
        .collect();
    if embedding.dim != generator.config.text_dim {
        return Err(Error::contract("embedding width differs from the generator's text width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_samples);
    let batch = 64;
    let mut start = 0;
    while start < n_samples {
        let n = batch.min(n_samples - start);
        let z = generator.config.sample_noise::<S>(n, &mut rng);
        let phi: Vec<S> = (start..start + n).flat_map(|i| embedded[i % captions.len()].clone()).collect();
        let phi = Tensor::new(vec![n, embedding.dim], phi)?;
        images.extend(generator.generate(&z, &phi)?.into_iter().map(|t| t.cast::<f64>()));
        start += n;
    }
    let probs = classifier.predict(&images)?;
    inception_score(&probs, splits)
}

// ---- skew sweep ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewConfig {
    pub classes: usize,
    pub skew_grid: Vec<f64>,
    /// Probability that a sample's predicted class is replaced by a uniformly random one.
    pub overlaps: Vec<f64>,
    /// Samples per split.
    pub samples: usize,
    pub splits: usize,
    /// Mass the synthetic classifier puts on its predicted class.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for SkewConfig {
    fn default() -> Self {
        SkewConfig {
            classes: 10,
            skew_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            overlaps: vec![0.0, 0.25, 0.5],
            samples: 1000,
            splits: 5,
            confidence: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewRow {
    pub skew: f64,
    pub overlap: f64,
    pub score_mean: f64,
    pub score_std: f64,
    /// Exact score of the skewed histogram without overlap.
    pub closed_form: f64,
}

/// Class weights moving from uniform (`skew = 0`) to all mass on class 0 (`skew = 1`).
pub fn skew_weights(classes: usize, skew: f64) -> Vec<f64> {
    (0..classes)
        .map(|c| (1.0 - skew) / classes as f64 + if c == 0 { skew } else { 0.0 })
        .collect()
}

/// Integer counts summing to `total`, proportional to `weights` by the
/// largest-remainder rule (ties go to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite weights").then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Output row of the synthetic classifier for predicted class `c`.
pub fn confident_row(classes: usize, c: usize, confidence: f64) -> Vec<f64> {
    let mut row = vec![(1.0 - confidence) / classes as f64; classes];
    row[c] += confidence;
    row
}

/// `exp(sum_c h_c KL(r_c || sum_k h_k r_k))` for class counts `counts`.
pub fn closed_form_score(counts: &[usize], confidence: f64) -> f64 {
    let c = counts.len();
    let total: usize = counts.iter().sum();
    let h: Vec<f64> = counts.iter().map(|&k| k as f64 / total as f64).collect();
    let rows: Vec<Vec<f64>> = (0..c).map(|k| confident_row(c, k, confidence)).collect();
    let mut marginal = vec![0.0; c];
    for (hk, row) in h.iter().zip(&rows) {
        for (m, r) in marginal.iter_mut().zip(row) {
            *m += hk * r;
        }
    }
    h.iter()
        .zip(&rows)
        .filter(|(&hk, _)| hk > 0.0)
        .map(|(hk, row)| hk * kl_divergence(row, &marginal))
        .sum::<f64>()
        .exp()
}

/// Scores synthetic classifier outputs whose class histogram follows each
/// skew, with each overlap level randomizing that fraction of predictions.
/// Every split receives the same histogram, so without overlap every split
/// scores exactly the closed form.
pub fn skew_sweep(cfg: &SkewConfig) -> Result<Vec<SkewRow>> {
    if cfg.classes < 2 || cfg.splits == 0 || cfg.samples == 0 {
        return Err(Error::contract("skew sweep needs at least 2 classes, 1 split and 1 sample"));
    }
    if !(0.0..=1.0).contains(&cfg.confidence) {
        return Err(Error::contract("confidence must lie in [0, 1]"));
    }
    let mut rows = Vec::new();
    for &overlap in &cfg.overlaps {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::contract(format!("overlap {overlap} outside [0, 1]")));
        }
        for &skew in &cfg.skew_grid {
            if !(0.0..=1.0).contains(&skew) {
                return Err(Error::contract(format!("skew {skew} outside [0, 1]")));
            }
            let counts = largest_remainder(&skew_weights(cfg.classes, skew), cfg.samples);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ overlap.to_bits() ^ skew.to_bits().rotate_left(17));
            let mut probs = Vec::with_capacity(cfg.samples * cfg.splits);
            for _ in 0..cfg.splits {
                for (c, &k) in counts.iter().enumerate() {
                    for _ in 0..k {
                        let predicted = if overlap > 0.0 && rng.random_bool(overlap) {
                            rng.random_range(0..cfg.classes)
                        } else {
                            c
                        };
                        probs.push(confident_row(cfg.classes, predicted, cfg.confidence));
                    }
                }
            }
            let report = inception_score(&probs, cfg.splits)?;
            rows.push(SkewRow {
                skew,
                overlap,
                score_mean: report.score_exp,
                score_std: report.score_std,
                closed_form: closed_form_score(&counts, cfg.confidence),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_sums_to_total() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&skew_weights(4, 1.0), 7), vec![7, 0, 0, 0]);
    }

    #[test]
    fn invalid_row_is_named() {
        match inception_score(&[vec![0.5, 0.5], vec![0.7, 0.7]], 1) {
            Err(Error::Contract(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
