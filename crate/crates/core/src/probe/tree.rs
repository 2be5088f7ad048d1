use std::path::Path;

use nmt_tensor::Float;

use crate::corpus::read_lines;
use crate::error::{usage, Error, Result};

/// Heads per word; the root's head is `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyTree {
    pub heads: Vec<Option<usize>>,
    pub root: usize,
}

impl DependencyTree {
    /// Checks the single-root, acyclic, spanning invariants.
    pub fn new(heads: Vec<Option<usize>>) -> Result<Self> {
        let roots: Vec<usize> = (0..heads.len()).filter(|&i| heads[i].is_none()).collect();
        if roots.len() != 1 {
            return usage(format!("tree must have exactly one root, found {}", roots.len()));
        }
        let n = heads.len();
        for start in 0..n {
            let mut v = start;
            for _ in 0..=n {
                match heads[v] {
                    None => break,
                    Some(h) if h >= n => return usage(format!("head {h} out of range")),
                    Some(h) => v = h,
                }
            }
            if heads[v].is_some() {
                return usage("head function has a cycle");
            }
        }
        Ok(Self { heads, root: roots[0] })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Average over heads, then over the pieces of each word pair, keeping only
/// positions with a word. `attn` is one sentence's `[heads, len, len]` block.
pub fn attention_graph<F: Float>(attn: &[F], heads: usize, len: usize, word_of: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
    if attn.len() != heads * len * len || word_of.len() != len || heads == 0 {
        return usage(format!("attention block of {} for {heads} heads over {len} positions", attn.len()));
    }
    let words = word_of.iter().flatten().max().map_or(0, |w| w + 1);
    let mut sum = vec![vec![0.0; words]; words];
    let mut count = vec![vec![0usize; words]; words];
    for (i, wi) in word_of.iter().enumerate() {
        let Some(wi) = *wi else { continue };
        for (j, wj) in word_of.iter().enumerate() {
            let Some(wj) = *wj else { continue };
            let mean: f64 =
                (0..heads).map(|h| attn[(h * len + i) * len + j].to_f64().unwrap_or(f64::NAN)).sum::<f64>() / heads as f64;
            sum[wi][wj] += mean;
            count[wi][wj] += 1;
        }
    }
    for (row, c) in sum.iter_mut().zip(&count) {
        for (x, &k) in row.iter_mut().zip(c) {
            if k == 0 {
                return usage("word without pieces in attention graph");
            }
            *x /= k as f64;
        }
    }
    Ok(sum)
}

/// Sum of `weights[head][dep]` over the tree's arcs.
pub fn tree_weight(weights: &[Vec<f64>], tree: &DependencyTree) -> f64 {
    tree.heads.iter().enumerate().filter_map(|(d, h)| h.map(|h| weights[h][d])).sum()
}

/// Maximum spanning arborescence rooted at `root`; `weights[h][d]` scores the
/// arc h → d, with `-inf` for missing arcs. Ties go to the lowest head index.
pub fn chu_liu_edmonds(weights: &[Vec<f64>], root: usize) -> Result<DependencyTree> {
    let n = weights.len();
    if n == 0 || root >= n {
        return usage(format!("root {root} outside graph of {n} nodes"));
    }
    if weights.iter().any(|r| r.len() != n) {
        return usage("weight matrix must be square");
    }
    match solve(weights, root) {
        Some(heads) => DependencyTree::new(heads),
        None => usage("graph has no spanning arborescence from the root"),
    }
}

fn solve(w: &[Vec<f64>], root: usize) -> Option<Vec<Option<usize>>> {
    let n = w.len();
    let mut head: Vec<Option<usize>> = vec![None; n];
    for v in (0..n).filter(|&v| v != root) {
        let mut best: Option<usize> = None;
        for h in (0..n).filter(|&h| h != v && w[h][v] > f64::NEG_INFINITY) {
            if best.is_none_or(|b| w[h][v] > w[b][v]) {
                best = Some(h);
            }
        }
        head[v] = Some(best?);
    }
    let Some(cycle) = find_cycle(&head) else { return Some(head) };
    let in_cycle: Vec<bool> = (0..n).map(|v| cycle.contains(&v)).collect();
    // contracted node is the last index
    let outside: Vec<usize> = (0..n).filter(|&v| !in_cycle[v]).collect();
    let c = outside.len();
    let mut index = vec![c; n];
    for (k, &v) in outside.iter().enumerate() {
        index[v] = k;
    }
    let m = c + 1;
    let mut w2 = vec![vec![f64::NEG_INFINITY; m]; m];
    let mut enter = vec![0usize; m];
    let mut leave = vec![0usize; m];
    for &u in &outside {
        for &v in &outside {
            w2[index[u]][index[v]] = w[u][v];
        }
        for &v in &cycle {
            if w[u][v] == f64::NEG_INFINITY {
                continue;
            }
            let gain = w[u][v] - w[head[v].expect("cycle node has a head")][v];
            if gain > w2[index[u]][c] || (gain == w2[index[u]][c] && v < enter[index[u]]) {
                w2[index[u]][c] = gain;
                enter[index[u]] = v;
            }
        }
        for &x in &cycle {
            if w[x][u] > w2[c][index[u]] || (w[x][u] == w2[c][index[u]] && x < leave[index[u]]) {
                w2[c][index[u]] = w[x][u];
                leave[index[u]] = x;
            }
        }
    }
    let sub = solve(&w2, index[root])?;
    let mut out = head.clone();
    for &v in &outside {
        out[v] = sub[index[v]].map(|h| if h == c { leave[index[v]] } else { outside[h] });
    }
    let from = sub[c].expect("contracted node is not the root");
    out[enter[from]] = Some(outside[from]);
    Some(out)
}

fn find_cycle(head: &[Option<usize>]) -> Option<Vec<usize>> {
    let n = head.len();
    let mut state = vec![0u8; n];
    for start in 0..n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            match head[v] {
                Some(h) => v = h,
                None => break,
            }
        }
        if state[v] == 1 && head[v].is_some() {
            if let Some(pos) = path.iter().position(|&x| x == v) {
                let mut cycle = path[pos..].to_vec();
                cycle.sort_unstable();
                return Some(cycle);
            }
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

/// Fraction of non-root words whose predicted head matches the gold head.
pub fn uas(predicted: &DependencyTree, gold: &DependencyTree) -> Result<f64> {
    if predicted.len() != gold.len() {
        return usage(format!("predicted tree has {} words, gold {}", predicted.len(), gold.len()));
    }
    let scored: Vec<usize> = (0..gold.len()).filter(|&d| d != gold.root).collect();
    if scored.is_empty() {
        return Ok(1.0);
    }
    let hits = scored.iter().filter(|&&d| predicted.heads[d] == gold.heads[d]).count();
    Ok(hits as f64 / scored.len() as f64)
}

/// A sentence from a CoNLL-U file: word forms and gold tree.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldTree {
    pub forms: Vec<String>,
    pub tree: DependencyTree,
}

/// Reads ID, FORM and HEAD from CoNLL-U; multiword ranges and empty nodes are skipped.
pub fn parse_conllu(text: &str) -> std::result::Result<Vec<GoldTree>, (usize, String)> {
    let mut out = Vec::new();
    let mut forms = Vec::new();
    let mut heads = Vec::new();
    let mut flush = |forms: &mut Vec<String>, heads: &mut Vec<Option<usize>>, line: usize| {
        if forms.is_empty() {
            return Ok(());
        }
        let tree = DependencyTree::new(std::mem::take(heads)).map_err(|e| (line, e.to_string()))?;
        out.push(GoldTree { forms: std::mem::take(forms), tree });
        Ok(())
    };
    for (k, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            flush(&mut forms, &mut heads, k + 1)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 7 {
            return Err((k + 1, format!("expected at least 7 columns, found {}", cols.len())));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| (k + 1, format!("bad ID {:?}", cols[0])))?;
        if id != forms.len() + 1 {
            return Err((k + 1, format!("ID {id} out of sequence")));
        }
        let head: usize = cols[6].parse().map_err(|_| (k + 1, format!("bad HEAD {:?}", cols[6])))?;
        forms.push(cols[1].to_string());
        heads.push(head.checked_sub(1));
    }
    flush(&mut forms, &mut heads, text.lines().count())?;
    Ok(out)
}

pub fn read_conllu(path: &Path) -> Result<Vec<GoldTree>> {
    let text = read_lines(path)?.join("\n");
    parse_conllu(&text).map_err(|(line, message)| Error::Parse { path: path.into(), line, message })
}

/// Minimal CoNLL-U rendering of `forms` with `tree`.
pub fn write_conllu(sentences: &[GoldTree]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (i, form) in s.forms.iter().enumerate() {
            let head = s.tree.heads[i].map_or(0, |h| h + 1);
            let rel = if head == 0 { "root" } else { "dep" };
            out.push_str(&format!("{}\t{form}\t_\t_\t_\t_\t{head}\t{rel}\t_\t_\n", i + 1));
        }
        out.push('\n');
    }
    out
}
