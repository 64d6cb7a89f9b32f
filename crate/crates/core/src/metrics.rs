//! Evaluation: a fixed n-gram feature extractor for motion-token sequences
//! and the Fréchet, alignment, diversity and attention-stability metrics
//! built on it.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode, greedy_decode, ModelWeights};
use crate::numerics::{estimate_stats, sqrt_trace_of_product, GaussianStats};
use crate::stability::{attention_jsd, overlap_ratio};
use crate::toyworld::{DatasetRecord, MotionTokenSequence};

pub const FEATURE_DIM: usize = 16;
pub const DEFAULT_DIVERSITY_SAMPLES: usize = 300;

/// Maps a token sequence to its length-normalised unigram and bigram
/// histograms, projected to [`FEATURE_DIM`] dimensions by a seeded Gaussian
/// matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    codebook_size: usize,
    seed: u64,
    // Row-major `(K + K²) × FEATURE_DIM`; unigram rows first.
    projection: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(codebook_size: usize, seed: u64) -> Result<Self> {
        if codebook_size == 0 {
            return Err(Error::invalid("codebook size must be positive"));
        }
        let rows = codebook_size + codebook_size * codebook_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..rows * FEATURE_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(FeatureExtractor {
            codebook_size,
            seed,
            projection,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.projection[r * FEATURE_DIM..(r + 1) * FEATURE_DIM]
    }

    pub fn extract(&self, motion: &MotionTokenSequence) -> Result<Vec<f64>> {
        if motion.is_empty() {
            return Err(Error::invalid(
                "cannot extract features from an empty motion",
            ));
        }
        if motion.codebook_size() != self.codebook_size {
            return Err(Error::invalid(format!(
                "motion codebook {} does not match extractor codebook {}",
                motion.codebook_size(),
                self.codebook_size
            )));
        }
        let tokens = motion.tokens();
        let k = self.codebook_size;
        let mut out = vec![0.0; FEATURE_DIM];
        let unigram_weight = 1.0 / tokens.len() as f64;
        for &t in tokens {
            out.iter_mut()
                .zip(self.row(t))
                .for_each(|(o, p)| *o += unigram_weight * p);
        }
        if tokens.len() > 1 {
            let bigram_weight = 1.0 / (tokens.len() - 1) as f64;
            for w in tokens.windows(2) {
                let row = self.row(k + w[0] * k + w[1]);
                out.iter_mut()
                    .zip(row)
                    .for_each(|(o, p)| *o += bigram_weight * p);
            }
        }
        Ok(out)
    }
}

pub fn extract_features(motion: &MotionTokenSequence, extractor_seed: u64) -> Result<Vec<f64>> {
    FeatureExtractor::new(motion.codebook_size(), extractor_seed)?.extract(motion)
}

/// Fréchet distance between two Gaussians,
/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "fid",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let cross = sqrt_trace_of_product(&a.covariance, &b.covariance)?;
    let value = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    // Rounding can leave identical inputs a hair below zero.
    Ok(value.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidFamily {
    pub fid: f64,
    pub fid_p: f64,
    pub fid_d: f64,
}

/// Distances between ground truth and predictions from original captions
/// (`fid`), ground truth and predictions from perturbed captions
/// (`fid_p`), and the two prediction sets (`fid_d`).
pub fn fid_family<V: AsRef<[f64]>>(
    gt: &[V],
    pred: &[V],
    pred_perturbed: &[V],
) -> Result<FidFamily> {
    let gt = estimate_stats(gt)?;
    let pred = estimate_stats(pred)?;
    let pert = estimate_stats(pred_perturbed)?;
    Ok(FidFamily {
        fid: fid(&gt, &pred)?,
        fid_p: fid(&gt, &pert)?,
        fid_d: fid(&pred, &pert)?,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean Euclidean distance between paired feature vectors.
pub fn mm_dist<V: AsRef<[f64]>>(pred: &[V], text: &[V]) -> Result<f64> {
    if pred.is_empty() || pred.len() != text.len() {
        return Err(Error::invalid(format!(
            "mm_dist needs equal non-zero counts, got {} and {}",
            pred.len(),
            text.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(text) {
        if p.as_ref().len() != t.as_ref().len() {
            return Err(Error::ShapeMismatch {
                op: "mm_dist",
                lhs: vec![p.as_ref().len()],
                rhs: vec![t.as_ref().len()],
            });
        }
        total += euclidean(p.as_ref(), t.as_ref());
    }
    Ok(total / pred.len() as f64)
}

/// Mean distance over `samples` disjoint random pairs, with `samples`
/// clamped to half the set size.
pub fn diversity<V: AsRef<[f64]>>(
    features: &[V],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::invalid("diversity needs at least two features"));
    }
    if samples == 0 {
        return Err(Error::invalid("diversity needs at least one pair"));
    }
    let pairs = samples.min(features.len() / 2);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(rng);
    let total: f64 = order
        .chunks_exact(2)
        .take(pairs)
        .map(|p| euclidean(features[p[0]].as_ref(), features[p[1]].as_ref()))
        .sum();
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub extractor_seed: u64,
    pub diversity_samples: usize,
    pub diversity_seed: u64,
    /// Top-k size for the overlap ratio, clamped to each caption's length.
    pub k: usize,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            extractor_seed: 0,
            diversity_samples: DEFAULT_DIVERSITY_SAMPLES,
            diversity_seed: 0,
            k: 3,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub fid_p: f64,
    pub fid_d: f64,
    /// Mean distance between generated and ground-truth features; the
    /// ground-truth motion's features stand in for text features.
    pub mm_dist: f64,
    pub diversity: f64,
    pub attention_jsd_mean: f64,
    pub overlap_ratio_mean: f64,
    pub token_accuracy: f64,
    pub token_accuracy_perturbed: f64,
    /// Fraction of captions whose two decodings differ anywhere.
    pub prediction_flip_rate: f64,
    pub sample_count: usize,
    pub config: EvalConfig,
}

struct SampleResult {
    gt: Vec<f64>,
    pred: Vec<f64>,
    pred_perturbed: Vec<f64>,
    jsd: f64,
    overlap: f64,
    correct: usize,
    correct_perturbed: usize,
    tokens: usize,
    flipped: bool,
}

fn evaluate_one(
    weights: &ModelWeights,
    record: &DatasetRecord,
    extractor: &FeatureExtractor,
    k: usize,
) -> Result<SampleResult> {
    let perturbed = record
        .perturbed_caption
        .as_ref()
        .ok_or_else(|| Error::MissingPerturbation(record.id.clone()))?;
    let len = record.motion.len();
    let pred = greedy_decode(&record.caption, weights, len)?;
    let pred_perturbed = greedy_decode(perturbed, weights, len)?;
    let clean = encode(&record.caption, weights, None)?;
    let shifted = encode(perturbed, weights, None)?;
    let (a, b) = (clean.attention.values(), shifted.attention.values());
    let count = |p: &MotionTokenSequence| {
        p.tokens()
            .iter()
            .zip(record.motion.tokens())
            .filter(|(x, y)| x == y)
            .count()
    };
    Ok(SampleResult {
        gt: extractor.extract(&record.motion)?,
        pred: extractor.extract(&pred)?,
        pred_perturbed: extractor.extract(&pred_perturbed)?,
        jsd: attention_jsd(a, b)?,
        overlap: overlap_ratio(a, b, k.min(a.len()))?,
        correct: count(&pred),
        correct_perturbed: count(&pred_perturbed),
        tokens: len,
        flipped: pred != pred_perturbed,
    })
}

/// Greedily decodes every record from its original and perturbed caption
/// and computes the full metric suite. Work is split across
/// `config.workers` threads; results are reduced in record order, so the
/// report does not depend on the worker count.
pub fn evaluate(
    weights: &ModelWeights,
    records: &[DatasetRecord],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if records.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two records"));
    }
    if let Some(r) = records.iter().find(|r| r.perturbed_caption.is_none()) {
        return Err(Error::MissingPerturbation(r.id.clone()));
    }
    let extractor = FeatureExtractor::new(weights.config.codebook_size, config.extractor_seed)?;
    let workers = config.workers.clamp(1, records.len());
    let chunk = records.len().div_ceil(workers);
    let results: Vec<SampleResult> = if workers == 1 {
        records
            .iter()
            .map(|r| evaluate_one(weights, r, &extractor, config.k))
            .collect::<Result<_>>()?
    } else {
        let parts: Vec<Result<Vec<SampleResult>>> = std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| {
                    let extractor = &extractor;
                    s.spawn(move || {
                        part.iter()
                            .map(|r| evaluate_one(weights, r, extractor, config.k))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(records.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };

    let gt: Vec<&[f64]> = results.iter().map(|r| r.gt.as_slice()).collect();
    let pred: Vec<&[f64]> = results.iter().map(|r| r.pred.as_slice()).collect();
    let pert: Vec<&[f64]> = results
        .iter()
        .map(|r| r.pred_perturbed.as_slice())
        .collect();
    let family = fid_family(&gt, &pred, &pert)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.diversity_seed);
    let n = results.len() as f64;
    let tokens: usize = results.iter().map(|r| r.tokens).sum();
    Ok(EvalReport {
        fid: family.fid,
        fid_p: family.fid_p,
        fid_d: family.fid_d,
        mm_dist: mm_dist(&pred, &gt)?,
        diversity: diversity(&pred, config.diversity_samples, &mut rng)?,
        attention_jsd_mean: results.iter().map(|r| r.jsd).sum::<f64>() / n,
        overlap_ratio_mean: results.iter().map(|r| r.overlap).sum::<f64>() / n,
        token_accuracy: results.iter().map(|r| r.correct).sum::<usize>() as f64 / tokens as f64,
        token_accuracy_perturbed: results.iter().map(|r| r.correct_perturbed).sum::<usize>() as f64
            / tokens as f64,
        prediction_flip_rate: results.iter().filter(|r| r.flipped).count() as f64 / n,
        sample_count: results.len(),
        config: config.clone(),
    })
}

const CSV_COLUMNS: [&str; 11] = [
    "fid",
    "fid_p",
    "fid_d",
    "mm_dist",
    "diversity",
    "attention_jsd_mean",
    "overlap_ratio_mean",
    "token_accuracy",
    "token_accuracy_perturbed",
    "prediction_flip_rate",
    "sample_count",
];

impl EvalReport {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        [
            self.fid,
            self.fid_p,
            self.fid_d,
            self.mm_dist,
            self.diversity,
            self.attention_jsd_mean,
            self.overlap_ratio_mean,
            self.token_accuracy,
            self.token_accuracy_perturbed,
            self.prediction_flip_rate,
        ]
        .iter()
        .map(|x| format!("{x}"))
        .chain(std::iter::once(self.sample_count.to_string()))
        .collect::<Vec<_>>()
        .join(",")
    }

    /// Named metric values in CSV column order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let values = [
            self.fid,
            self.fid_p,
            self.fid_d,
            self.mm_dist,
            self.diversity,
            self.attention_jsd_mean,
            self.overlap_ratio_mean,
            self.token_accuracy,
            self.token_accuracy_perturbed,
            self.prediction_flip_rate,
            self.sample_count as f64,
        ];
        CSV_COLUMNS.iter().copied().zip(values).collect()
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self).map_err(std::io::Error::from)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::csv_header())?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Writes `x y` pairs, one per line, under a `# x y` comment naming the
/// columns.
pub fn write_series<W: Write>(
    x_name: &str,
    y_name: &str,
    points: &[(f64, f64)],
    mut out: W,
) -> Result<()> {
    writeln!(out, "# {x_name} {y_name}")?;
    for (x, y) in points {
        writeln!(out, "{x} {y}")?;
    }
    Ok(())
}
