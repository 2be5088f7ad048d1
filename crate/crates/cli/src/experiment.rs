//! Initialization and architecture ablations on the toy corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;
use nmt_core::corpus::{read_parallel, Direction, MonolingualCorpus, MultilingualCorpus, Tokenizer, Vocabulary};
use nmt_core::eval::{evaluate_bleu, BeamParams};
use nmt_core::init::{initialize, random_model, save_checkpoint, Checkpoint, CrossAttentionInit, DecoderLayerSource, InitStrategy};
use nmt_core::model::{ModelConfig, TransformerModel};
use nmt_core::train::{pretrain_mlm, train_translation, LrSchedule, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::toy::{dev_file_name, ToySpec, VOCAB_FILE};

/// Budgets and hyperparameters shared by the recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub beam: BeamParams,
    /// Dev pairs scored per direction.
    pub dev_limit: usize,
    pub max_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut pretrain = TrainConfig::new(16, 5_000, LrSchedule { peak_lr: 1e-3, warmup_steps: 500 });
        pretrain.label_smoothing = 0.0;
        let finetune = TrainConfig::new(16, 3_000, LrSchedule { peak_lr: 1e-3, warmup_steps: 300 });
        Self {
            seeds: vec![1, 2, 3],
            pretrain,
            finetune,
            beam: BeamParams { beam_size: 4, length_penalty: 1.0, max_decode_len: 24 },
            dev_limit: 200,
            max_len: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(!self.seeds.is_empty(), "experiment needs at least one seed");
        anyhow::ensure!(self.dev_limit > 0, "dev_limit must be positive");
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.beam.validate(self.max_len)?;
        Ok(())
    }
}

/// Toy corpus files loaded for the recipes.
pub struct ToyData {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub tokenizer: Tokenizer,
    pub corpus: MultilingualCorpus,
    pub mono: MonolingualCorpus,
    pub dev: Vec<(Direction, Vec<(String, String)>)>,
    /// Direction with the fewest training pairs (first such in order).
    pub lowest: Direction,
}

impl ToyData {
    pub fn load(dir: &Path, spec: &ToySpec, max_len: usize, dev_limit: usize) -> Result<Self> {
        let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
        let tokenizer = Tokenizer::default();
        let directions = spec.directions();
        let corpus = MultilingualCorpus::load(dir, &directions, &vocab, &tokenizer, max_len)?;
        let mono = MonolingualCorpus::load(dir, &spec.languages(), &vocab, &tokenizer, max_len)?;
        let mut dev = Vec::new();
        for d in &directions {
            let forward = dir.join(dev_file_name(d));
            let mut pairs = if forward.exists() {
                read_parallel(&forward)?
            } else {
                read_parallel(&dir.join(dev_file_name(&d.reversed())))?.into_iter().map(|(s, t)| (t, s)).collect()
            };
            pairs.truncate(dev_limit);
            dev.push((d.clone(), pairs));
        }
        let sizes = corpus.sizes();
        let min = sizes.iter().copied().min().context("empty corpus")?;
        let lowest = directions[sizes.iter().position(|&s| s == min).expect("minimum exists")].clone();
        Ok(Self { dir: dir.to_path_buf(), vocab, tokenizer, corpus, mono, dev, lowest })
    }
}

/// Encoder-only masked-LM layout matching `nmt`'s encoder.
pub fn pretrain_config(nmt: &ModelConfig) -> ModelConfig {
    ModelConfig { decoder_layers: 0, mlm_head: true, ..nmt.clone() }
}

pub fn toy_model_config(vocab: &Vocabulary, max_len: usize) -> ModelConfig {
    ModelConfig { max_positions: max_len, ..ModelConfig::tiny(vocab.len()) }
}

pub fn run_pretrain(data: &ToyData, config: &ModelConfig, cfg: &TrainConfig, out: Option<&Path>) -> Result<TransformerModel> {
    let start = Instant::now();
    let model = random_model::<f32>(config, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.lr, cfg.adam, cfg.seed)?;
    let run = pretrain_mlm(&mut trainer, &data.mono, &data.vocab, cfg, out)?;
    info!("pretrained {} steps in {:.0}s, final loss {:.3}", cfg.max_steps, start.elapsed().as_secs_f64(), run.tail_loss(100));
    Ok(trainer.model)
}

pub fn run_finetune(
    data: &ToyData,
    config: &ModelConfig,
    strategy: InitStrategy,
    source: Option<&Checkpoint>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TransformerModel> {
    let start = Instant::now();
    let model = initialize::<f32>(config, strategy, source, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.lr, cfg.adam, cfg.seed)?;
    let run = train_translation(&mut trainer, &data.corpus, &data.vocab, cfg, out)?;
    info!(
        "{} seed {}: {} steps in {:.0}s, final loss {:.3}",
        strategy.label(),
        cfg.seed,
        cfg.max_steps,
        start.elapsed().as_secs_f64(),
        run.tail_loss(100)
    );
    Ok(trainer.model)
}

/// Dev BLEU per direction.
pub fn dev_bleu(model: &TransformerModel, data: &ToyData, beam: &BeamParams) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (d, pairs) in &data.dev {
        let (score, _) = evaluate_bleu(model, &data.vocab, &data.tokenizer, pairs, &d.tgt, beam)?;
        out.insert(d.to_string(), score);
    }
    Ok(out)
}

/// One trained system's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: String,
    pub seed: u64,
    pub bleu: BTreeMap<String, f64>,
}

impl SystemResult {
    pub fn average(&self) -> f64 {
        self.bleu.values().sum::<f64>() / self.bleu.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub recipe: String,
    pub lowest_direction: String,
    pub results: Vec<SystemResult>,
}

impl ExperimentReport {
    pub fn systems(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for r in &self.results {
            if !seen.contains(&r.system) {
                seen.push(r.system.clone());
            }
        }
        seen
    }

    pub fn get(&self, system: &str, seed: u64) -> Option<&SystemResult> {
        self.results.iter().find(|r| r.system == system && r.seed == seed)
    }

    /// One row per system: per-direction BLEU and the average, each a mean over seeds.
    pub fn to_table(&self) -> String {
        let directions: Vec<String> = self.results.first().map(|r| r.bleu.keys().cloned().collect()).unwrap_or_default();
        let mut s = format!("system\t{}\tavg\n", directions.join("\t"));
        for sys in self.systems() {
            let rows: Vec<&SystemResult> = self.results.iter().filter(|r| r.system == sys).collect();
            let n = rows.len() as f64;
            let _ = write!(s, "{sys}");
            for d in &directions {
                let _ = write!(s, "\t{:.2}", rows.iter().map(|r| r.bleu[d]).sum::<f64>() / n);
            }
            let _ = writeln!(s, "\t{:.2}", rows.iter().map(|r| r.average()).sum::<f64>() / n);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}.json", self.recipe)), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join(format!("{}.tsv", self.recipe)), self.to_table())?;
        Ok(())
    }
}

pub const ENC_DEC: InitStrategy =
    InitStrategy::EncoderAndDecoder { cross_attention: CrossAttentionInit::ShareSelfAttn, layers: DecoderLayerSource::Bottom };

/// Trains (or reuses) the shared masked-LM encoder under `out/pretrain`.
pub fn shared_pretrained(data: &ToyData, config: &ModelConfig, cfg: &ExperimentConfig, out: &Path) -> Result<Checkpoint> {
    let path = out.join("pretrained.ckpt");
    let model = run_pretrain(data, &pretrain_config(config), &cfg.pretrain, Some(&out.join("pretrain")))?;
    save_checkpoint(&model, &path)?;
    Ok(Checkpoint::from_model(&model))
}

/// Random / encoder / encoder+decoder initialization, each over every seed.
/// Also returns the pretrained source and the encoder+decoder models per seed.
pub fn table5(data: &ToyData, cfg: &ExperimentConfig, out: &Path) -> Result<(ExperimentReport, Checkpoint, Vec<(u64, TransformerModel)>)> {
    cfg.validate()?;
    let config = toy_model_config(&data.vocab, cfg.max_len);
    let source = shared_pretrained(data, &config, cfg, out)?;
    let mut results = Vec::new();
    let mut full_models = Vec::new();
    for &seed in &cfg.seeds {
        for strategy in [InitStrategy::Random, InitStrategy::EncoderOnly, ENC_DEC] {
            let tc = TrainConfig { seed, ..cfg.finetune.clone() };
            let run_dir = out.join(format!("{}-seed{seed}", slug(strategy.label())));
            let src = (strategy != InitStrategy::Random).then_some(&source);
            let model = run_finetune(data, &config, strategy, src, &tc, Some(&run_dir))?;
            let bleu = dev_bleu(&model, data, &cfg.beam)?;
            info!("{} seed {seed}: {bleu:?}", strategy.label());
            results.push(SystemResult { system: strategy.label().into(), seed, bleu });
            if strategy == ENC_DEC {
                full_models.push((seed, model));
            }
        }
    }
    let report = ExperimentReport { recipe: "table5-toy".into(), lowest_direction: data.lowest.to_string(), results };
    report.write(&out.join("reports"))?;
    Ok((report, source, full_models))
}

/// Baseline layout (random init) next to an already-run table5 report.
pub fn table4(data: &ToyData, cfg: &ExperimentConfig, out: &Path, table5: &ExperimentReport) -> Result<ExperimentReport> {
    cfg.validate()?;
    let config = toy_model_config(&data.vocab, cfg.max_len).with_baseline_layout();
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let tc = TrainConfig { seed, ..cfg.finetune.clone() };
        let model = run_finetune(data, &config, InitStrategy::Random, None, &tc, Some(&out.join(format!("baseline-seed{seed}"))))?;
        let bleu = dev_bleu(&model, data, &cfg.beam)?;
        results.push(SystemResult { system: "baseline arch, random".into(), seed, bleu });
    }
    for (label, name) in [("random", "compatible arch, random"), ("enc.", "compatible arch, enc.")] {
        for r in table5.results.iter().filter(|r| r.system == label) {
            results.push(SystemResult { system: name.into(), ..r.clone() });
        }
    }
    let report = ExperimentReport { recipe: "table4-toy".into(), lowest_direction: table5.lowest_direction.clone(), results };
    report.write(&out.join("reports"))?;
    Ok(report)
}

fn slug(label: &str) -> String {
    label.trim_end_matches('.').replace(".+", "-").replace('.', "")
}
