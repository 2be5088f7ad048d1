use std::collections::BTreeSet;
use std::path::Path;

use nmt_tensor::Float;

use crate::corpus::read_lines;
use crate::error::{usage, Error, Result};

pub type AlignmentSet = BTreeSet<(usize, usize)>;

/// Mean of the state vectors of each word's pieces. `word_of[p]` is the word
/// at position `p`, or `None` for positions to skip (specials, padding).
pub fn word_vectors<F: Float>(states: &[F], hidden: usize, word_of: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
    if states.len() < word_of.len() * hidden {
        return usage(format!("{} states for {} positions of width {hidden}", states.len(), word_of.len()));
    }
    let words = word_of.iter().flatten().max().map_or(0, |w| w + 1);
    let mut sums = vec![vec![0.0; hidden]; words];
    let mut counts = vec![0usize; words];
    for (p, w) in word_of.iter().enumerate() {
        if let Some(w) = *w {
            counts[w] += 1;
            for (s, x) in sums[w].iter_mut().zip(&states[p * hidden..(p + 1) * hidden]) {
                *s += x.to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    if let Some(w) = counts.iter().position(|&c| c == 0) {
        return usage(format!("word {w} has no pieces"));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c as f64);
    }
    Ok(sums)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `[m][n]` cosine similarities between source and target word vectors.
pub fn similarity_matrix(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Vec<Vec<f64>> {
    src.iter().map(|a| tgt.iter().map(|b| cosine(a, b)).collect()).collect()
}

/// Mutual argmax over the entries allowed by `open`; ties go to the lowest index.
fn mutual_argmax(sim: &[Vec<f64>], open: impl Fn(usize, usize) -> bool) -> AlignmentSet {
    let m = sim.len();
    let n = sim.first().map_or(0, Vec::len);
    let pick = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in vals {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k)
    };
    let row_best: Vec<Option<usize>> =
        (0..m).map(|i| pick(&mut (0..n).filter(|&j| open(i, j)).map(|j| (j, sim[i][j])))).collect();
    let col_best: Vec<Option<usize>> =
        (0..n).map(|j| pick(&mut (0..m).filter(|&i| open(i, j)).map(|i| (i, sim[i][j])))).collect();
    (0..m).filter_map(|i| row_best[i].filter(|&j| col_best[j] == Some(i)).map(|j| (i, j))).collect()
}

/// Iterated mutual argmax: later rounds only consider pairs whose row and
/// column are both still unaligned. Stops early when a round adds nothing.
pub fn itermax(sim: &[Vec<f64>], iterations: usize) -> Result<AlignmentSet> {
    if iterations == 0 {
        return usage("itermax needs at least one iteration");
    }
    let m = sim.len();
    let n = sim.first().map_or(0, Vec::len);
    if sim.iter().any(|r| r.len() != n) {
        return usage("similarity matrix rows differ in length");
    }
    let mut out = mutual_argmax(sim, |_, _| true);
    for _ in 1..iterations {
        let rows: BTreeSet<usize> = out.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = out.iter().map(|p| p.1).collect();
        if rows.len() == m || cols.len() == n {
            break;
        }
        let more = mutual_argmax(sim, |i, j| !rows.contains(&i) && !cols.contains(&j));
        if more.is_empty() {
            break;
        }
        out.extend(more);
    }
    Ok(out)
}

/// Sure and possible links; `possible` always contains `sure`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GoldAlignment {
    pub sure: AlignmentSet,
    pub possible: AlignmentSet,
}

impl GoldAlignment {
    pub fn new(sure: AlignmentSet, possible: AlignmentSet) -> Self {
        let possible = possible.union(&sure).copied().collect();
        Self { sure, possible }
    }

    /// Pharaoh line: `i-j` sure links and `i?j` possible links, 0-indexed.
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let mut sure = AlignmentSet::new();
        let mut possible = AlignmentSet::new();
        for item in line.split_whitespace() {
            let (sep, set) = if item.contains('-') { ('-', &mut sure) } else { ('?', &mut possible) };
            let (i, j) = item.split_once(sep).ok_or_else(|| format!("bad alignment link {item:?}"))?;
            let i = i.parse().map_err(|_| format!("bad alignment link {item:?}"))?;
            let j = j.parse().map_err(|_| format!("bad alignment link {item:?}"))?;
            set.insert((i, j));
        }
        Ok(Self::new(sure, possible))
    }

    pub fn to_pharaoh(&self) -> String {
        let mut items: Vec<String> = self.sure.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        items.extend(self.possible.difference(&self.sure).map(|(i, j)| format!("{i}?{j}")));
        items.join(" ")
    }
}

pub fn read_gold_alignments(path: &Path) -> Result<Vec<GoldAlignment>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(k, l)| GoldAlignment::parse(l).map_err(|message| Error::Parse { path: path.into(), line: k + 1, message }))
        .collect()
}

/// Alignment error rate; 0 when both the prediction and the sure set are empty.
pub fn aer(predicted: &AlignmentSet, gold: &GoldAlignment) -> f64 {
    let denom = predicted.len() + gold.sure.len();
    if denom == 0 {
        return 0.0;
    }
    let a_s = predicted.intersection(&gold.sure).count();
    let a_p = predicted.intersection(&gold.possible).count();
    1.0 - (a_s + a_p) as f64 / denom as f64
}

/// Corpus-level AER from summed counts.
pub fn corpus_aer(predicted: &[AlignmentSet], gold: &[GoldAlignment]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return usage(format!("{} predicted alignments for {} gold", predicted.len(), gold.len()));
    }
    let (mut hit, mut denom) = (0usize, 0usize);
    for (a, g) in predicted.iter().zip(gold) {
        hit += a.intersection(&g.sure).count() + a.intersection(&g.possible).count();
        denom += a.len() + g.sure.len();
    }
    Ok(if denom == 0 { 0.0 } else { 1.0 - hit as f64 / denom as f64 })
}
