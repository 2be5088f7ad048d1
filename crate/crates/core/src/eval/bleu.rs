use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{usage, Result};

pub const MAX_ORDER: usize = 4;

/// Matched and total n-gram counts per order plus corpus lengths.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

impl BleuStats {
    pub fn add<T: Eq + Hash>(&mut self, hyp: &[T], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Modified precisions; the k-th zero-match order is replaced by `1 / (2^k · total)`.
    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut out = [0.0; MAX_ORDER];
        let mut k = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            out[n] = if self.matches[n] == 0 {
                k += 1;
                1.0 / (2f64.powi(k) * self.totals[n] as f64)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
        }
        out
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.contains(&0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * self.brevity_penalty() * log_mean.exp()).clamp(0.0, 100.0)
    }
}

/// Corpus-level BLEU-4 in [0, 100].
pub fn bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.is_empty() {
        return usage("BLEU needs at least one sentence");
    }
    if hypotheses.len() != references.len() {
        return usage(format!("{} hypotheses for {} references", hypotheses.len(), references.len()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

/// BLEU over whitespace tokens.
pub fn bleu_text<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<f64> {
    fn split<S: AsRef<str>>(xs: &[S]) -> Vec<Vec<&str>> {
        xs.iter().map(|s| s.as_ref().split_whitespace().collect()).collect()
    }
    bleu(&split(hypotheses), &split(references))
}
