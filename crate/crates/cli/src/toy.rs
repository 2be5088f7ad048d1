//! Synthetic multilingual corpus: a class-bigram base language and foreign
//! languages derived from it by word substitution and reordering.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use nmt_core::corpus::{monolingual_file_name, write_parallel, Direction, Vocabulary};
use nmt_core::probe::{write_conllu, AlignmentSet, DependencyTree, GoldAlignment, GoldTree};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Word classes of the base language and how many words each holds.
const CLASS_SIZES: [usize; 8] = [4, 12, 24, 16, 8, 6, 6, 4];
const SUCCESSORS: usize = 3;
const MIN_LEN: usize = 4;
const MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordOrder {
    Identity,
    /// Swap words 0-1, 2-3, ...
    SwapPairs,
    Reverse,
}

impl WordOrder {
    /// `order[k]` is the base position rendered at foreign position `k`.
    pub fn order(self, n: usize) -> Vec<usize> {
        match self {
            WordOrder::Identity => (0..n).collect(),
            WordOrder::Reverse => (0..n).rev().collect(),
            WordOrder::SwapPairs => (0..n).map(|k| if k % 2 == 0 { if k + 1 < n { k + 1 } else { k } } else { k - 1 }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForeignLanguage {
    pub code: String,
    /// Parallel pairs with the base language.
    pub pairs: usize,
    pub order: WordOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub base: String,
    pub foreign: Vec<ForeignLanguage>,
    pub dev_pairs: usize,
    pub monolingual: usize,
    pub probe_sentences: usize,
    pub classify_train: usize,
    pub classify_test: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        let lang = |code: &str, pairs, order| ForeignLanguage { code: code.into(), pairs, order };
        Self {
            base: "en".into(),
            foreign: vec![
                lang("de", 20_000, WordOrder::SwapPairs),
                lang("fr", 5_000, WordOrder::Identity),
                lang("ro", 1_000, WordOrder::SwapPairs),
            ],
            dev_pairs: 200,
            monolingual: 10_000,
            probe_sentences: 200,
            classify_train: 1_000,
            classify_test: 300,
            seed: 1,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.foreign.is_empty(), "toy data needs at least one foreign language");
        for f in &self.foreign {
            ensure!(f.pairs > 0, "pairs for {} must be positive", f.code);
            ensure!(f.code != self.base, "foreign language {} equals the base", f.code);
        }
        ensure!(
            self.dev_pairs > 0 && self.monolingual > 0 && self.probe_sentences > 0,
            "dev_pairs, monolingual and probe_sentences must be positive"
        );
        ensure!(self.classify_train > 0 && self.classify_test > 0, "classification splits must be nonempty");
        Ok(())
    }

    pub fn languages(&self) -> Vec<String> {
        std::iter::once(self.base.clone()).chain(self.foreign.iter().map(|f| f.code.clone())).collect()
    }

    /// Every foreign-base pair in both directions.
    pub fn directions(&self) -> Vec<Direction> {
        self.foreign
            .iter()
            .flat_map(|f| [Direction::new(&f.code, &self.base), Direction::new(&self.base, &f.code)])
            .collect()
    }
}

/// The generative model behind the corpus.
pub struct ToyLanguage {
    spec: ToySpec,
    class_of: Vec<usize>,
    class_words: Vec<Vec<usize>>,
    word_weights: Vec<WeightedIndex<f64>>,
    start: WeightedIndex<f64>,
    next: Vec<WeightedIndex<f64>>,
    /// Per foreign language, base word id -> foreign word id.
    ciphers: Vec<Vec<usize>>,
}

impl ToyLanguage {
    pub fn new(spec: ToySpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let classes = CLASS_SIZES.len();
        let mut class_of = Vec::new();
        let mut class_words = Vec::new();
        for (c, &n) in CLASS_SIZES.iter().enumerate() {
            class_words.push((class_of.len()..class_of.len() + n).collect::<Vec<_>>());
            class_of.extend(std::iter::repeat_n(c, n));
        }
        // Zipf-like weights within each class
        let word_weights = CLASS_SIZES
            .iter()
            .map(|&n| WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("positive weights"))
            .collect();
        let start = WeightedIndex::new((0..classes).map(|_| rng.random_range(0.2..1.0))).expect("positive weights");
        let next = (0..classes)
            .map(|_| {
                let mut w = vec![0.0; classes];
                let mut picks: Vec<usize> = (0..classes).collect();
                picks.shuffle(&mut rng);
                for &c in &picks[..SUCCESSORS] {
                    w[c] = rng.random_range(0.2..1.0);
                }
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect();
        let words = class_of.len();
        let ciphers = spec
            .foreign
            .iter()
            .map(|_| {
                let mut p: Vec<usize> = (0..words).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        Ok(Self { spec, class_of, class_words, word_weights, start, next, ciphers })
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn words(&self) -> usize {
        self.class_of.len()
    }

    pub fn token(&self, lang: &str, word: usize) -> String {
        format!("{lang}{word:03}")
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let content: Vec<String> = self
            .spec
            .languages()
            .iter()
            .flat_map(|l| (0..self.words()).map(move |w| self.token(l, w)))
            .collect();
        Ok(Vocabulary::new(&self.spec.languages(), content)?)
    }

    /// A base-language sentence as word ids.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(MIN_LEN..=MAX_LEN);
        let mut class = self.start.sample(rng);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.class_words[class][self.word_weights[class].sample(rng)]);
            class = self.next[class].sample(rng);
        }
        out
    }

    fn foreign_index(&self, lang: &str) -> Result<usize> {
        self.spec.foreign.iter().position(|f| f.code == lang).with_context(|| format!("{lang} is not a foreign language"))
    }

    /// Foreign rendering of a base sentence.
    pub fn encipher(&self, lang: &str, sentence: &[usize]) -> Result<Vec<usize>> {
        let k = self.foreign_index(lang)?;
        let order = self.spec.foreign[k].order.order(sentence.len());
        Ok(order.iter().map(|&i| self.ciphers[k][sentence[i]]).collect())
    }

    /// Inverse of [`ToyLanguage::encipher`].
    pub fn decipher(&self, lang: &str, foreign: &[usize]) -> Result<Vec<usize>> {
        let k = self.foreign_index(lang)?;
        let mut inverse = vec![0; self.words()];
        for (b, &f) in self.ciphers[k].iter().enumerate() {
            inverse[f] = b;
        }
        let order = self.spec.foreign[k].order.order(foreign.len());
        let mut out = vec![0; foreign.len()];
        for (pos, &i) in order.iter().enumerate() {
            out[i] = inverse[foreign[pos]];
        }
        Ok(out)
    }

    /// Gold links `(foreign position, base position)`.
    pub fn alignment(&self, lang: &str, len: usize) -> Result<AlignmentSet> {
        let k = self.foreign_index(lang)?;
        Ok(self.spec.foreign[k].order.order(len).into_iter().enumerate().collect())
    }

    pub fn render(&self, lang: &str, words: &[usize]) -> String {
        words.iter().map(|&w| self.token(lang, w)).collect::<Vec<_>>().join(" ")
    }
}

/// File names written by [`make_toy_data`].
pub fn dev_file_name(d: &Direction) -> String {
    format!("dev.{}-{}.tsv", d.src, d.tgt)
}

pub fn alignment_file_name(d: &Direction) -> String {
    format!("align.{}-{}.txt", d.src, d.tgt)
}

pub fn trees_file_name(lang: &str) -> String {
    format!("trees.{lang}.conllu")
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CLASSIFY_TRAIN_FILE: &str = "classify.train.tsv";
pub const CLASSIFY_TEST_FILE: &str = "classify.test.tsv";
pub const SPEC_FILE: &str = "toy.toml";

/// Writes the full toy corpus into `dir` and returns the generator.
pub fn make_toy_data(spec: &ToySpec, dir: &Path) -> Result<ToyLanguage> {
    let toy = ToyLanguage::new(spec.clone())?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let base = spec.base.as_str();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    toy.vocabulary()?.save(dir.join(VOCAB_FILE))?;
    fs::write(dir.join(SPEC_FILE), toml::to_string(spec)?)?;

    for f in &spec.foreign {
        let d = Direction::new(&f.code, base);
        let mut make = |n: usize| -> Result<Vec<(Vec<usize>, String, String)>> {
            (0..n)
                .map(|_| {
                    let s = toy.sample(&mut rng);
                    let foreign = toy.render(&f.code, &toy.encipher(&f.code, &s)?);
                    Ok((s.clone(), foreign, toy.render(base, &s)))
                })
                .collect()
        };
        let train = make(f.pairs)?;
        let dev = make(spec.dev_pairs)?;
        let strip = |v: &[(Vec<usize>, String, String)]| v.iter().map(|(_, a, b)| (a.clone(), b.clone())).collect::<Vec<_>>();
        write_parallel(&dir.join(d.file_name()), &strip(&train))?;
        write_parallel(&dir.join(dev_file_name(&d)), &strip(&dev))?;
        let gold: Vec<String> = dev
            .iter()
            .map(|(s, _, _)| Ok(GoldAlignment::new(toy.alignment(&f.code, s.len())?, AlignmentSet::new()).to_pharaoh()))
            .collect::<Result<_>>()?;
        fs::write(dir.join(alignment_file_name(&d)), gold.join("\n") + "\n")?;
    }

    for lang in spec.languages() {
        let lines: Vec<String> = (0..spec.monolingual)
            .map(|_| {
                let s = toy.sample(&mut rng);
                if lang == base {
                    Ok(toy.render(base, &s))
                } else {
                    Ok(toy.render(&lang, &toy.encipher(&lang, &s)?))
                }
            })
            .collect::<Result<_>>()?;
        fs::write(dir.join(monolingual_file_name(&lang)), lines.join("\n") + "\n")?;
    }

    // chain trees: every word hangs off its left neighbour
    let trees: Vec<GoldTree> = (0..spec.probe_sentences)
        .map(|_| {
            let s = toy.sample(&mut rng);
            let heads = (0..s.len()).map(|i| i.checked_sub(1)).collect();
            Ok(GoldTree { forms: s.iter().map(|&w| toy.token(base, w)).collect(), tree: DependencyTree::new(heads)? })
        })
        .collect::<Result<_>>()?;
    fs::write(dir.join(trees_file_name(base)), write_conllu(&trees))?;

    // does the hypothesis translate the premise?
    let first = &spec.foreign[0].code;
    let mut classify = |n: usize| -> Result<String> {
        let mut out = String::new();
        for _ in 0..n {
            let s = toy.sample(&mut rng);
            let label = rng.random_range(0..2usize);
            let other = if label == 1 { s.clone() } else { toy.sample(&mut rng) };
            let hyp = toy.render(first, &toy.encipher(first, &other)?);
            out.push_str(&format!("{}\t{hyp}\t{label}\n", toy.render(base, &s)));
        }
        Ok(out)
    };
    fs::write(dir.join(CLASSIFY_TRAIN_FILE), classify(spec.classify_train)?)?;
    fs::write(dir.join(CLASSIFY_TEST_FILE), classify(spec.classify_test)?)?;
    Ok(toy)
}
