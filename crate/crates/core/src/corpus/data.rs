use std::fs;
use std::path::Path;

use log::info;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::tokenize::Tokenizer;
use super::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{io_err, usage, Error, Result};
use crate::model::TokenBatch;

/// Longest source or target row, counting the language token or bos/eos.
pub const MAX_PAIR_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Direction {
    pub src: String,
    pub tgt: String,
}

impl Direction {
    pub fn new(src: &str, tgt: &str) -> Self {
        Self { src: src.into(), tgt: tgt.into() }
    }

    pub fn reversed(&self) -> Self {
        Self { src: self.tgt.clone(), tgt: self.src.clone() }
    }

    /// Parses `de-en`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('-') => Ok(Self::new(a, b)),
            _ => usage(format!("direction must look like src-tgt, got {s:?}")),
        }
    }

    pub fn file_name(&self) -> String {
        format!("train.{}-{}.tsv", self.src, self.tgt)
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

/// Content token ids only; language token and bos/eos are added at batching time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads `source<TAB>target` lines.
pub fn read_parallel(path: &Path) -> Result<Vec<(String, String)>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(k, line)| match line.split_once('\t') {
            Some((s, t)) => Ok((s.to_string(), t.to_string())),
            None => Err(Error::Parse { path: path.into(), line: k + 1, message: "expected source<TAB>target".into() }),
        })
        .collect()
}

pub fn write_parallel(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (s, t) in pairs {
        text.push_str(s);
        text.push('\t');
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Rows shaped `[__tgt__, src…, </s>]` and `[<s>, tgt…, </s>]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: TokenBatch,
    pub target: TokenBatch,
    pub direction: usize,
}

impl Batch {
    /// Decoder input (all but the last target position) and gold outputs (all but the first).
    pub fn shifted_target(&self) -> Result<(TokenBatch, Vec<usize>, Vec<bool>)> {
        let rows: Vec<Vec<usize>> = (0..self.target.batch)
            .map(|b| {
                let row = &self.target.row(b)[..self.target.row_len(b)];
                row[..row.len() - 1].to_vec()
            })
            .collect();
        let input = TokenBatch::from_rows(&rows, PAD)?;
        let mut gold = Vec::with_capacity(input.batch * input.len);
        let mut pad = Vec::with_capacity(input.batch * input.len);
        for b in 0..self.target.batch {
            let row = &self.target.row(b)[1..self.target.row_len(b)];
            for t in 0..input.len {
                gold.push(row.get(t).copied().unwrap_or(PAD));
                pad.push(t >= row.len());
            }
        }
        Ok((input, gold, pad))
    }

    pub fn target_tokens(&self) -> usize {
        (0..self.target.batch).map(|b| self.target.row_len(b) - 1).sum()
    }
}

/// Parallel data for several directions.
#[derive(Debug, Clone)]
pub struct MultilingualCorpus {
    directions: Vec<Direction>,
    pairs: Vec<Vec<SentencePair>>,
}

impl MultilingualCorpus {
    pub fn new(entries: Vec<(Direction, Vec<SentencePair>)>) -> Result<Self> {
        if entries.is_empty() {
            return usage("corpus has no directions");
        }
        let mut directions = Vec::new();
        let mut pairs = Vec::new();
        for (d, p) in entries {
            if p.is_empty() {
                return usage(format!("direction {d} has no sentence pairs"));
            }
            if directions.contains(&d) {
                return usage(format!("direction {d} listed twice"));
            }
            directions.push(d);
            pairs.push(p);
        }
        Ok(Self { directions, pairs })
    }

    /// Loads `train.src-tgt.tsv` for each direction, falling back to the
    /// reverse-direction file with its columns swapped. Pairs longer than
    /// `max_len` are truncated and counted in the log.
    pub fn load(
        dir: &Path,
        directions: &[Direction],
        vocab: &Vocabulary,
        tokenizer: &Tokenizer,
        max_len: usize,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for d in directions {
            vocab.lang_id(&d.src)?;
            vocab.lang_id(&d.tgt)?;
            let forward = dir.join(d.file_name());
            let backward = dir.join(d.reversed().file_name());
            let raw = if forward.exists() {
                read_parallel(&forward)?
            } else if backward.exists() {
                read_parallel(&backward)?.into_iter().map(|(s, t)| (t, s)).collect()
            } else {
                return usage(format!("no data for {d}: neither {} nor {} exists", forward.display(), backward.display()));
            };
            let (pairs, truncated) = tokenize_pairs(&raw, vocab, tokenizer, max_len);
            if truncated > 0 {
                info!("{d}: truncated {truncated} of {} pairs to {max_len} tokens", pairs.len());
            }
            entries.push((d.clone(), pairs));
        }
        Self::new(entries)
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn pairs(&self, direction: usize) -> &[SentencePair] {
        &self.pairs[direction]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.pairs.iter().map(Vec::len).collect()
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Batch of the given pairs from one direction.
    pub fn batch(&self, direction: usize, indices: &[usize], vocab: &Vocabulary) -> Result<Batch> {
        let lang = vocab.lang_id(&self.directions[direction].tgt)?;
        let pairs = &self.pairs[direction];
        let mut src = Vec::with_capacity(indices.len());
        let mut tgt = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = &pairs[i];
            src.push(source_row(lang, &p.src));
            tgt.push(target_row(&p.tgt));
        }
        Ok(Batch { source: TokenBatch::from_rows(&src, PAD)?, target: TokenBatch::from_rows(&tgt, PAD)?, direction })
    }
}

pub fn source_row(lang_id: usize, content: &[usize]) -> Vec<usize> {
    let mut row = Vec::with_capacity(content.len() + 2);
    row.push(lang_id);
    row.extend_from_slice(content);
    row.push(EOS);
    row
}

pub fn target_row(content: &[usize]) -> Vec<usize> {
    let mut row = Vec::with_capacity(content.len() + 2);
    row.push(BOS);
    row.extend_from_slice(content);
    row.push(EOS);
    row
}

/// Tokenizes and truncates; returns pairs and how many were cut.
pub fn tokenize_pairs(
    raw: &[(String, String)],
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> (Vec<SentencePair>, usize) {
    let cap = max_len.saturating_sub(2);
    let mut truncated = 0;
    let pairs = raw
        .iter()
        .map(|(s, t)| {
            let mut src = tokenizer.tokenize(s, vocab).ids;
            let mut tgt = tokenizer.tokenize(t, vocab).ids;
            if src.len() > cap || tgt.len() > cap {
                truncated += 1;
                src.truncate(cap);
                tgt.truncate(cap);
            }
            SentencePair { src, tgt }
        })
        .collect();
    (pairs, truncated)
}

/// Draws a direction from `q`, then `batch_size` pairs uniformly with replacement.
pub fn sample_batch<R: Rng>(
    rng: &mut R,
    corpus: &MultilingualCorpus,
    q: &[f64],
    batch_size: usize,
    vocab: &Vocabulary,
) -> Result<Batch> {
    let direction = sample_direction(rng, q, corpus.directions().len())?;
    if batch_size == 0 {
        return usage("batch size must be positive");
    }
    let n = corpus.pairs(direction).len();
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
    corpus.batch(direction, &indices, vocab)
}

pub fn sample_direction<R: Rng>(rng: &mut R, q: &[f64], directions: usize) -> Result<usize> {
    if q.len() != directions {
        return usage(format!("{} sampling probabilities for {directions} directions", q.len()));
    }
    let dist = WeightedIndex::new(q).map_err(|e| Error::Usage(format!("invalid sampling probabilities: {e}")))?;
    Ok(dist.sample(rng))
}

/// Monolingual sentences per language.
#[derive(Debug, Clone)]
pub struct MonolingualCorpus {
    pub languages: Vec<String>,
    pub sentences: Vec<Vec<Vec<usize>>>,
}

impl MonolingualCorpus {
    /// Reads `mono.xx.txt` for each language.
    pub fn load(dir: &Path, languages: &[String], vocab: &Vocabulary, tokenizer: &Tokenizer, max_len: usize) -> Result<Self> {
        let mut sentences = Vec::new();
        for lang in languages {
            vocab.lang_id(lang)?;
            let lines = read_lines(&dir.join(monolingual_file_name(lang)))?;
            let cap = max_len.saturating_sub(2);
            let sents: Vec<Vec<usize>> = lines
                .iter()
                .map(|l| {
                    let mut ids = tokenizer.tokenize(l, vocab).ids;
                    ids.truncate(cap);
                    ids
                })
                .filter(|ids| !ids.is_empty())
                .collect();
            if sents.is_empty() {
                return usage(format!("no monolingual sentences for {lang}"));
            }
            sentences.push(sents);
        }
        Ok(Self { languages: languages.to_vec(), sentences })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sentences.iter().map(Vec::len).collect()
    }
}

pub fn monolingual_file_name(lang: &str) -> String {
    format!("mono.{lang}.txt")
}
