use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

fn default_beam() -> usize {
    5
}

fn default_alpha() -> f64 {
    1.0
}

fn default_max_len() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamParams {
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    /// Exponent α in `logprob / len^α`.
    #[serde(default = "default_alpha")]
    pub length_penalty: f64,
    /// Most tokens generated after bos, eos included.
    #[serde(default = "default_max_len")]
    pub max_decode_len: usize,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self { beam_size: default_beam(), length_penalty: default_alpha(), max_decode_len: default_max_len() }
    }
}

impl BeamParams {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.beam_size == 0 {
            return usage("beam_size must be at least 1");
        }
        if self.max_decode_len == 0 || self.max_decode_len > max_positions {
            return usage(format!("max_decode_len must lie in 1..={max_positions}, got {}", self.max_decode_len));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return usage(format!("length_penalty must be non-negative, got {}", self.length_penalty));
        }
        Ok(())
    }
}

/// A decoded sequence starting with bos; finished ones end with eos.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, eos included and bos excluded.
    pub fn generated_len(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Content tokens between bos and eos.
    pub fn content(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

pub fn normalized_score(logprob: f64, generated: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (generated.max(1) as f64).powf(alpha)
    }
}

/// Next-token log-probabilities for a set of prefixes, each tagged with the
/// sentence it belongs to. Banned tokens report negative infinity.
pub trait StepScorer {
    fn next_log_probs(&mut self, rows: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>>;
}

/// Higher score first, then lowest token ids, then shortest.
fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

struct SentenceBeam {
    alive: Vec<(Vec<usize>, f64)>,
    finished: Vec<Hypothesis>,
}

impl SentenceBeam {
    fn done(&self, params: &BeamParams) -> bool {
        if self.alive.is_empty() {
            return true;
        }
        if self.finished.len() < params.beam_size {
            return false;
        }
        let best = self.finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // log-probs only fall, so no alive beam can beat its bound at full length
        let bound = self
            .alive
            .iter()
            .map(|(_, lp)| normalized_score(*lp, params.max_decode_len, params.length_penalty))
            .fold(f64::NEG_INFINITY, f64::max);
        bound <= best
    }
}

/// Beam search for `sentences` independent inputs sharing one scorer call per step.
///
/// Each step keeps the `beam_size` best expansions by raw log-probability
/// (ties to the lowest token id); those ending in `eos` retire. The result per
/// sentence is the finished hypothesis with the best `logprob / len^α`, or the
/// best unfinished one (with `finished == false`) if none reached eos.
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    sentences: usize,
    params: &BeamParams,
    bos: usize,
    eos: usize,
) -> Result<Vec<Hypothesis>> {
    if params.beam_size == 0 || params.max_decode_len == 0 {
        return usage("beam_size and max_decode_len must be positive");
    }
    let alpha = params.length_penalty;
    let mut beams: Vec<SentenceBeam> =
        (0..sentences).map(|_| SentenceBeam { alive: vec![(vec![bos], 0.0)], finished: Vec::new() }).collect();
    for step in 1..=params.max_decode_len {
        let active: Vec<usize> = (0..sentences).filter(|&s| !beams[s].done(params)).collect();
        if active.is_empty() {
            break;
        }
        let rows: Vec<(usize, &[usize])> =
            active.iter().flat_map(|&s| beams[s].alive.iter().map(move |(p, _)| (s, p.as_slice()))).collect();
        let scores = scorer.next_log_probs(&rows)?;
        if scores.len() != rows.len() {
            return usage(format!("scorer returned {} rows for {}", scores.len(), rows.len()));
        }
        let mut offset = 0;
        for &s in &active {
            let beam = &mut beams[s];
            let n = beam.alive.len();
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (a, (_, lp)) in beam.alive.iter().enumerate() {
                for (v, &l) in scores[offset + a].iter().enumerate() {
                    if l > f64::NEG_INFINITY {
                        cands.push((lp + l, v, a));
                    }
                }
            }
            offset += n;
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            cands.truncate(params.beam_size);
            let mut alive = Vec::with_capacity(cands.len());
            for (lp, v, a) in cands {
                let mut tokens = beam.alive[a].0.clone();
                tokens.push(v);
                if v == eos {
                    beam.finished.push(Hypothesis { tokens, logprob: lp, score: normalized_score(lp, step, alpha), finished: true });
                } else {
                    alive.push((tokens, lp));
                }
            }
            beam.alive = alive;
        }
    }
    Ok(beams
        .into_iter()
        .map(|b| {
            let pool: Vec<Hypothesis> = if b.finished.is_empty() {
                b.alive
                    .into_iter()
                    .map(|(tokens, lp)| {
                        let len = tokens.len() - 1;
                        Hypothesis { tokens, logprob: lp, score: normalized_score(lp, len, alpha), finished: false }
                    })
                    .collect()
            } else {
                b.finished
            };
            pool.into_iter().min_by(better).unwrap_or(Hypothesis {
                tokens: vec![bos],
                logprob: f64::NEG_INFINITY,
                score: f64::NEG_INFINITY,
                finished: false,
            })
        })
        .collect())
}
