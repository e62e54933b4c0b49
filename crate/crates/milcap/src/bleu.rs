//! Corpus-level BLEU-4: clipped n-gram counts pooled over the whole corpus,
//! geometric mean of the four precisions, brevity penalty from per-sentence
//! closest reference lengths (ties to the shorter reference). All arithmetic
//! in f64.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub effective_ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bleu = {:.6}", self.bleu)?;
        writeln!(
            f,
            "precisions = {:.6} {:.6} {:.6} {:.6}",
            self.precisions[0], self.precisions[1], self.precisions[2], self.precisions[3]
        )?;
        write!(
            f,
            "brevity_penalty = {:.6} candidate_len = {} effective_ref_len = {}",
            self.brevity_penalty, self.candidate_len, self.effective_ref_len
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `cand_len`; among equally close lengths the
/// shorter one is charged.
fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    let mut best_len = refs[0].len();
    let mut best_diff = best_len.abs_diff(cand_len);
    for r in &refs[1..] {
        let diff = r.len().abs_diff(cand_len);
        if diff < best_diff || (diff == best_diff && r.len() < best_len) {
            best_diff = diff;
            best_len = r.len();
        }
    }
    best_len
}

/// BLEU-4 over a parallel corpus: one candidate token sequence per entry,
/// each with at least one reference. Any order of n-grams with zero pooled
/// precision zeroes the score.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArg("scoring wants at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArg(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::InvalidArg(format!("candidate {i} has no references")));
    }

    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), refs);
        for n in 1..=4 {
            let cc = ngram_counts(cand, n);
            if cc.is_empty() {
                continue;
            }
            let ref_counts: Vec<HashMap<&[String], usize>> =
                refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &count) in &cc {
                let clip = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }

    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, candidate_len: cand_len, effective_ref_len: ref_len })
}
