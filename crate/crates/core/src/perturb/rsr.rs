use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyworld::{Caption, DatasetRecord, PosTag, SynonymLexicon};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsrOptions {
    /// Chance that a traversal replaces a tagged word it visits.
    pub replace_prob: f64,
    /// Distinct parts of speech that must be replaced before stopping.
    pub required_pos: usize,
}

impl Default for RsrOptions {
    fn default() -> Self {
        RsrOptions {
            replace_prob: 0.5,
            required_pos: 2,
        }
    }
}

/// Random synonym replacement with default options.
pub fn rsr_perturb<R: Rng + ?Sized>(
    caption: &Caption,
    lexicon: &SynonymLexicon,
    rng: &mut R,
) -> Result<Caption> {
    rsr_perturb_with(caption, lexicon, &RsrOptions::default(), rng)
}

/// Walks the caption left to right, replacing each not-yet-replaced tagged
/// word with probability `replace_prob` by a different member of its
/// class. Walks repeat until `required_pos` distinct parts of speech have
/// been replaced or no tagged word is left.
pub fn rsr_perturb_with<R: Rng + ?Sized>(
    caption: &Caption,
    lexicon: &SynonymLexicon,
    options: &RsrOptions,
    rng: &mut R,
) -> Result<Caption> {
    if !(options.replace_prob > 0.0 && options.replace_prob <= 1.0) {
        return Err(Error::invalid("replace_prob must lie in (0, 1]"));
    }
    let tagged: Vec<(usize, usize)> = caption
        .class_tags()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.filter(|c| lexicon.class(*c).is_some()).map(|c| (i, c)))
        .collect();
    if tagged.is_empty() {
        return Err(Error::invalid(format!(
            "caption {:?} has no lexicon words",
            caption.text()
        )));
    }
    let mut out = caption.clone();
    let mut replaced = vec![false; tagged.len()];
    let mut parts: BTreeSet<PosTag> = BTreeSet::new();
    loop {
        for (slot, &(position, class_id)) in tagged.iter().enumerate() {
            if replaced[slot] || rng.gen::<f64>() >= options.replace_prob {
                continue;
            }
            let class = lexicon.class(class_id).expect("filtered above");
            let current = caption.tokens()[position].as_str();
            let candidates: Vec<&str> = class.words().filter(|w| *w != current).collect();
            let word = candidates
                .choose(rng)
                .expect("every class has a distinct synonym");
            out.replace_token(position, word.to_string());
            replaced[slot] = true;
            parts.insert(class.pos);
            if parts.len() >= options.required_pos {
                return Ok(out);
            }
        }
        if replaced.iter().all(|&r| r) {
            return Ok(out);
        }
    }
}

/// Cosine similarity of the bag-of-words count vectors of two captions.
pub fn caption_cosine_similarity(a: &Caption, b: &Caption) -> f64 {
    fn counts(c: &Caption) -> BTreeMap<&str, f64> {
        let mut m = BTreeMap::new();
        for t in c.tokens() {
            *m.entry(t.as_str()).or_default() += 1.0;
        }
        m
    }
    let (ca, cb) = (counts(a), counts(b));
    let dot: f64 = ca
        .iter()
        .map(|(w, x)| x * cb.get(w).copied().unwrap_or(0.0))
        .sum();
    let na: f64 = ca.values().map(|x| x * x).sum();
    let nb: f64 = cb.values().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub caption_count: usize,
    pub perturbed_caption_count: usize,
    /// Fraction of captions with at least one substituted word.
    pub caption_replacement_rate: f64,
    /// Per-caption fraction of substituted words, averaged over captions.
    pub word_replacement_rate: f64,
    pub mean_cosine_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSubstitutions {
    pub class_id: usize,
    pub canonical: String,
    pub pos: PosTag,
    pub substitutions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub stats: PerturbationStats,
    pub per_class: Vec<ClassSubstitutions>,
}

/// Statistics over `records`. Records without a perturbed caption count as
/// unperturbed with similarity 1.
pub fn perturbation_stats(
    records: &[DatasetRecord],
    lexicon: &SynonymLexicon,
) -> Result<PerturbationReport> {
    if records.is_empty() {
        return Err(Error::invalid(
            "perturbation statistics need at least one record",
        ));
    }
    let mut per_class: BTreeMap<usize, usize> =
        lexicon.classes().iter().map(|c| (c.id, 0)).collect();
    let mut perturbed = 0;
    let mut word_rate = 0.0;
    let mut cosine = 0.0;
    for r in records {
        let Some(p) = &r.perturbed_caption else {
            cosine += 1.0;
            continue;
        };
        if p.len() != r.caption.len() {
            return Err(Error::invalid(format!(
                "record {}: perturbed caption changes the length",
                r.id
            )));
        }
        let mut changed = 0;
        for ((a, b), tag) in r
            .caption
            .tokens()
            .iter()
            .zip(p.tokens())
            .zip(r.caption.class_tags())
        {
            if a != b {
                changed += 1;
                if let Some(count) = tag.and_then(|c| per_class.get_mut(&c)) {
                    *count += 1;
                }
            }
        }
        if changed > 0 {
            perturbed += 1;
        }
        word_rate += changed as f64 / r.caption.len() as f64;
        cosine += caption_cosine_similarity(&r.caption, p);
    }
    let n = records.len() as f64;
    let stats = PerturbationStats {
        caption_count: records.len(),
        perturbed_caption_count: perturbed,
        caption_replacement_rate: perturbed as f64 / n,
        word_replacement_rate: word_rate / n,
        mean_cosine_similarity: cosine / n,
    };
    let per_class = per_class
        .into_iter()
        .map(|(class_id, substitutions)| {
            let class = lexicon.class(class_id).expect("keys come from the lexicon");
            ClassSubstitutions {
                class_id,
                canonical: class.canonical.clone(),
                pos: class.pos,
                substitutions,
            }
        })
        .collect();
    Ok(PerturbationReport { stats, per_class })
}

/// Fills `perturbed_caption` for every record with at least one lexicon
/// word, using one generator seeded from `seed` and visiting records in
/// order. Other records pass through untouched.
pub fn perturb_corpus(
    records: &[DatasetRecord],
    lexicon: &SynonymLexicon,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, PerturbationReport)> {
    perturb_corpus_with(records, lexicon, &RsrOptions::default(), seed)
}

pub fn perturb_corpus_with(
    records: &[DatasetRecord],
    lexicon: &SynonymLexicon,
    options: &RsrOptions,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, PerturbationReport)> {
    if records.is_empty() {
        return Err(Error::invalid("cannot perturb an empty corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut r = r.clone();
        r.perturbed_caption = if r.caption.tagged_count() > 0 {
            Some(rsr_perturb_with(&r.caption, lexicon, options, &mut rng)?)
        } else {
            None
        };
        out.push(r);
    }
    let report = perturbation_stats(&out, lexicon)?;
    Ok((out, report))
}

pub fn write_stats_report<W: Write>(report: &PerturbationReport, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, report).map_err(std::io::Error::from)?;
    writeln!(out)?;
    Ok(())
}
