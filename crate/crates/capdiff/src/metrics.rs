//! Caption quality and diversity metrics.
//!
//! Everything scores in [0, 100] on a fixed tokenization (lowercase,
//! whitespace split, ASCII punctuation detached except apostrophes), so
//! results are bit-stable across runs. Quality: corpus BLEU with uniform
//! 1–4-gram weights and an LCS F-measure. Diversity: pooled distinct
//! n-gram ratios per image, and per-sample BLEU against the sibling
//! samples (lower = more diverse).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::sampler::SampleRecord;
use crate::{Error, Result};

/// Additive smoothing for n-gram orders with zero clipped matches.
const BLEU_EPS: f64 = 1e-9;
/// ROUGE-L recall weighting: F = (1+β²)PR / (R + β²P).
const ROUGE_BETA_SQ: f64 = 1.2;

/// Lowercase, split on whitespace, and detach ASCII punctuation (except
/// apostrophes, which stay inside contractions).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0)
}

fn check_pairs(cands: &[String], refs: &[Vec<String>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Data("evaluation needs at least one candidate".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(Error::Data(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU with uniform 1–4-gram weights, counts clipped against the
/// references, and a closest-length brevity penalty. 0–100.
pub fn bleu4(cands: &[String], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(cands, refs)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, ref_set) in cands.iter().zip(refs) {
        let ct = tokenize(cand);
        let rts: Vec<Vec<String>> = ref_set.iter().map(|r| tokenize(r)).collect();
        cand_len += ct.len();
        ref_len += closest_ref_len(ct.len(), &rts);
        for n in 1..=4 {
            let cc = ngram_counts(&ct, n);
            let rcs: Vec<HashMap<&[String], usize>> =
                rts.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &count) in &cc {
                let best = rcs.iter().map(|rc| *rc.get(gram).unwrap_or(&0)).max().unwrap_or(0);
                matches[n - 1] += count.min(best);
                totals[n - 1] += count;
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let log_mean: f64 = (0..4)
        .map(|n| {
            let p = if matches[n] > 0 {
                matches[n] as f64 / totals[n] as f64
            } else {
                BLEU_EPS
            };
            0.25 * p.ln()
        })
        .sum();
    Ok(100.0 * bp * log_mean.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure, max over references, averaged over candidates. 0–100.
pub fn rouge_l(cands: &[String], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(cands, refs)?;
    let mut sum = 0.0;
    for (cand, ref_set) in cands.iter().zip(refs) {
        let ct = tokenize(cand);
        let mut best = 0.0f64;
        for r in ref_set {
            let rt = tokenize(r);
            let lcs = lcs_len(&ct, &rt);
            if lcs == 0 || ct.is_empty() || rt.is_empty() {
                continue;
            }
            let p = lcs as f64 / ct.len() as f64;
            let r = lcs as f64 / rt.len() as f64;
            let f = (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p);
            best = best.max(f);
        }
        sum += best;
    }
    Ok(100.0 * sum / cands.len() as f64)
}

/// Pooled unique/total n-gram ratios per image, averaged. 0–100 each for
/// unigrams and bigrams.
pub fn inter_distinct(sample_sets: &[Vec<String>]) -> Result<(f64, f64)> {
    if sample_sets.is_empty() {
        return Err(Error::Data("evaluation needs at least one image".into()));
    }
    if let Some(i) = sample_sets.iter().position(|s| s.is_empty()) {
        return Err(Error::Data(format!("image {i} has no samples")));
    }
    let mut scores = [0.0f64; 2];
    for set in sample_sets {
        let tokenized: Vec<Vec<String>> = set.iter().map(|s| tokenize(s)).collect();
        for (slot, n) in [(0usize, 1usize), (1, 2)] {
            let mut seen: HashMap<&[String], ()> = HashMap::new();
            let mut total = 0usize;
            for toks in &tokenized {
                if toks.len() >= n {
                    for w in toks.windows(n) {
                        seen.insert(w, ());
                        total += 1;
                    }
                }
            }
            if total > 0 {
                scores[slot] += seen.len() as f64 / total as f64;
            }
        }
    }
    let m = sample_sets.len() as f64;
    Ok((100.0 * scores[0] / m, 100.0 * scores[1] / m))
}

/// Sentence-level single-n BLEU of `cand` against `refs`, in [0, 1].
fn sentence_bleu_n(cand: &[String], refs: &[&Vec<String>], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let cc = ngram_counts(cand, n);
    let rcs: Vec<HashMap<&[String], usize>> =
        refs.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matches = 0usize;
    let mut total = 0usize;
    for (gram, &count) in &cc {
        let best = rcs.iter().map(|rc| *rc.get(gram).unwrap_or(&0)).max().unwrap_or(0);
        matches += count.min(best);
        total += count;
    }
    let p = if matches > 0 { matches as f64 / total as f64 } else { BLEU_EPS };
    let owned: Vec<Vec<String>> = refs.iter().map(|r| (*r).clone()).collect();
    let r = closest_ref_len(cand.len(), &owned);
    let bp = if cand.len() >= r { 1.0 } else { (1.0 - r as f64 / cand.len() as f64).exp() };
    bp * p
}

/// For each image and each ordered sample, single-n BLEU against the
/// sibling samples; averaged over all samples of all images, ×100.
/// Identical sample sets score exactly 100; lower means more diverse.
pub fn self_bleu(sample_sets: &[Vec<String>]) -> Result<[f64; 4]> {
    if sample_sets.is_empty() {
        return Err(Error::Data("evaluation needs at least one image".into()));
    }
    if let Some(i) = sample_sets.iter().position(|s| s.len() < 2) {
        return Err(Error::Data(format!(
            "self-BLEU needs at least 2 samples per image; image {i} has {}",
            sample_sets[i].len()
        )));
    }
    let mut sums = [0.0f64; 4];
    let mut count = 0usize;
    for set in sample_sets {
        let tokenized: Vec<Vec<String>> = set.iter().map(|s| tokenize(s)).collect();
        for i in 0..tokenized.len() {
            let refs: Vec<&Vec<String>> = tokenized
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, t)| t)
                .collect();
            for (slot, sum) in sums.iter_mut().enumerate() {
                *sum += sentence_bleu_n(&tokenized[i], &refs, slot + 1);
            }
            count += 1;
        }
    }
    Ok(sums.map(|s| 100.0 * s / count as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistinctScores {
    pub d1: f64,
    pub d2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelfBleuScores {
    pub sb1: f64,
    pub sb2: f64,
    pub sb3: f64,
    pub sb4: f64,
}

/// Full evaluation summary; `self_bleu` is absent with fewer than two
/// samples per image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub distinct: DistinctScores,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub self_bleu: Option<SelfBleuScores>,
    pub n_images: usize,
    pub n_samples_per_image: usize,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad report: {e}")))
    }
}

/// Score generated captions against their reference dataset.
///
/// Predictions join references by id (unknown ids are errors); images keep
/// the dataset's order and samples their `sample` order, so the report is a
/// pure function of the two files.
pub fn evaluate(preds: &[SampleRecord], refs: &Dataset) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Data("evaluation needs at least one candidate".into()));
    }
    let mut by_id: HashMap<&str, Vec<&SampleRecord>> = HashMap::new();
    for p in preds {
        by_id.entry(p.id.as_str()).or_default().push(p);
    }
    let known: HashMap<&str, &Vec<String>> =
        refs.records.iter().map(|r| (r.id.as_str(), &r.captions)).collect();
    for id in by_id.keys() {
        if !known.contains_key(id) {
            return Err(Error::Data(format!("prediction id '{id}' is not in the references")));
        }
    }

    let mut cands = Vec::new();
    let mut cand_refs = Vec::new();
    let mut sample_sets = Vec::new();
    let mut per_image = None;
    for rec in &refs.records {
        let Some(group) = by_id.get_mut(rec.id.as_str()) else { continue };
        group.sort_by_key(|p| p.sample);
        match per_image {
            None => per_image = Some(group.len()),
            Some(n) if n != group.len() => {
                return Err(Error::Data(format!(
                    "image '{}' has {} samples but earlier images have {n}",
                    rec.id,
                    group.len()
                )));
            }
            _ => {}
        }
        sample_sets.push(group.iter().map(|p| p.caption.clone()).collect::<Vec<_>>());
        for p in group.iter() {
            cands.push(p.caption.clone());
            cand_refs.push(rec.captions.clone());
        }
    }
    let n_samples_per_image = per_image.expect("non-empty preds imply one image");

    let (d1, d2) = inter_distinct(&sample_sets)?;
    let sb = if n_samples_per_image >= 2 {
        let [sb1, sb2, sb3, sb4] = self_bleu(&sample_sets)?;
        Some(SelfBleuScores { sb1, sb2, sb3, sb4 })
    } else {
        None
    };
    Ok(EvalReport {
        bleu4: bleu4(&cands, &cand_refs)?,
        rouge_l: rouge_l(&cands, &cand_refs)?,
        distinct: DistinctScores { d1, d2 },
        self_bleu: sb,
        n_images: sample_sets.len(),
        n_samples_per_image,
    })
}
