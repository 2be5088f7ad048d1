use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nmt_tensor::{Float, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::label_smoothed_loss;
use super::mlm::{mask_tokens, mlm_loss, MaskPolicy, MaskedBatch};
use super::optim::{adam_step, lr_at_step, AdamConfig, LrSchedule, OptimizerState};
use crate::corpus::{
    compute_sampling_probs, sample_batch, steps_per_epoch, temperature_at_epoch, Batch, MonolingualCorpus,
    MultilingualCorpus, SamplingSchedule, Vocabulary,
};
use crate::error::{io_err, usage, Result};
use crate::init::save_checkpoint;
use crate::model::{Dropout, Session, TransformerModel};

fn default_smoothing() -> f64 {
    0.1
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub accumulation: usize,
    pub max_steps: u64,
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub seed: u64,
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub sampling: SamplingSchedule,
    /// Overrides the temperature schedule with fixed direction probabilities.
    #[serde(default)]
    pub fixed_probabilities: Option<Vec<f64>>,
    #[serde(default)]
    pub mask: MaskPolicy,
}

impl TrainConfig {
    pub fn new(batch_size: usize, max_steps: u64, lr: LrSchedule) -> Self {
        Self {
            label_smoothing: default_smoothing(),
            batch_size,
            accumulation: 1,
            max_steps,
            checkpoint_interval: max_steps.max(1),
            seed: 0,
            lr,
            adam: AdamConfig::default(),
            sampling: SamplingSchedule::default(),
            fixed_probabilities: None,
            mask: MaskPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return usage(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return usage("batch_size and accumulation must be at least 1");
        }
        if self.checkpoint_interval == 0 {
            return usage("checkpoint_interval must be at least 1");
        }
        self.lr.validate()?;
        self.sampling.validate()?;
        self.mask.validate()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub loss: f64,
    pub losses: BTreeMap<String, f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<StepRecord>,
}

impl RunOutput {
    /// Mean loss over the last `n` logged steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.metrics[self.metrics.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Model, optimizer and learning-rate schedule.
pub struct Trainer<F: Float = f32> {
    pub model: TransformerModel<F>,
    pub optimizer: OptimizerState<F>,
    pub schedule: LrSchedule,
    dropout_seeds: ChaCha8Rng,
}

impl<F: Float> Trainer<F> {
    pub fn new(model: TransformerModel<F>, schedule: LrSchedule, adam: AdamConfig, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let optimizer = OptimizerState::new(&model.params, adam);
        Ok(Self { model, optimizer, schedule, dropout_seeds: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d00d) })
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.step
    }

    /// Forward/backward over each micro-batch, average the gradients, apply one
    /// Adam update. Returns the micro-batch losses.
    pub fn step<B>(
        &mut self,
        micro: &[B],
        mut loss_fn: impl FnMut(&mut Session<'_, F>, &B) -> Result<Var>,
    ) -> Result<Vec<f64>> {
        if micro.is_empty() {
            return usage("step needs at least one micro-batch");
        }
        let cfg = &self.model.config;
        let stochastic = cfg.dropout > 0.0 || cfg.attention_dropout > 0.0;
        let mut total: Option<Vec<Vec<F>>> = None;
        let mut losses = Vec::with_capacity(micro.len());
        for b in micro {
            let dropout = stochastic.then(|| Dropout::new(cfg.dropout, cfg.attention_dropout, self.dropout_seeds.random()));
            let mut session = Session::new(&self.model, true, dropout);
            let loss = loss_fn(&mut session, b)?;
            session.tape.backward(loss)?;
            losses.push(session.tape.value(loss).item().to_f64().unwrap_or(f64::NAN));
            let grads = session.param_grads();
            match total.as_mut() {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x = *x + y);
                    }
                }
            }
        }
        let mut grads = total.expect("at least one micro-batch");
        if micro.len() > 1 {
            let inv = F::lit(1.0 / micro.len() as f64);
            grads.iter_mut().flatten().for_each(|x| *x = *x * inv);
        }
        let lr = lr_at_step(&self.schedule, self.optimizer.step + 1);
        adam_step(&mut self.model.params, &grads, &mut self.optimizer, lr)?;
        Ok(losses)
    }
}

/// Teacher-forced translation loss for one batch.
pub fn translation_loss<F: Float>(session: &mut Session<'_, F>, batch: &Batch, eps: f64) -> Result<Var> {
    let enc = session.encoder(&batch.source)?;
    let (input, gold, pad) = batch.shifted_target()?;
    let dec = session.decoder(&input, enc.states, &batch.source.pad, batch.source.len)?;
    let logits = session.output_logits(dec.states)?;
    label_smoothed_loss(&mut session.tape, logits, &gold, &pad, eps)
}

struct RunSink {
    log: Option<BufWriter<File>>,
    log_path: PathBuf,
    ckpt_dir: Option<PathBuf>,
    prefix: String,
}

impl RunSink {
    fn new(out: Option<&Path>, prefix: &str) -> Result<Self> {
        let Some(out) = out else {
            return Ok(Self { log: None, log_path: PathBuf::new(), ckpt_dir: None, prefix: prefix.into() });
        };
        let logs = out.join("logs");
        let ckpts = out.join("checkpoints");
        fs::create_dir_all(&logs).map_err(io_err(&logs))?;
        fs::create_dir_all(&ckpts).map_err(io_err(&ckpts))?;
        let log_path = logs.join(format!("{prefix}.jsonl"));
        let file = File::create(&log_path).map_err(io_err(&log_path))?;
        Ok(Self { log: Some(BufWriter::new(file)), log_path, ckpt_dir: Some(ckpts), prefix: prefix.into() })
    }

    fn record(&mut self, r: &StepRecord) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            let line = serde_json::to_string(r).expect("metrics serialize");
            writeln!(w, "{line}").map_err(io_err(&self.log_path))?;
        }
        Ok(())
    }

    fn checkpoint<F: Float>(&mut self, model: &TransformerModel<F>, step: u64) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.ckpt_dir else { return Ok(None) };
        let path = dir.join(format!("{}-step{step:07}.ckpt", self.prefix));
        save_checkpoint(model, &path)?;
        if let Some(w) = self.log.as_mut() {
            w.flush().map_err(io_err(&self.log_path))?;
        }
        Ok(Some(path))
    }
}

/// Shared loop: each step draws `accumulation` groups from the current
/// temperature distribution, builds micro-batches and updates the model.
#[allow(clippy::too_many_arguments)]
fn run_loop<F: Float, B>(
    trainer: &mut Trainer<F>,
    cfg: &TrainConfig,
    out: Option<&Path>,
    prefix: &str,
    labels: &[String],
    sizes: &[usize],
    mut sample: impl FnMut(&mut ChaCha8Rng, &[f64]) -> Result<(usize, B)>,
    mut loss_fn: impl FnMut(&mut Session<'_, F>, &B) -> Result<Var>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(q) = &cfg.fixed_probabilities {
        if q.len() != sizes.len() {
            return usage(format!("{} fixed probabilities for {} groups", q.len(), sizes.len()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sink = RunSink::new(out, prefix)?;
    let epoch_len = steps_per_epoch(sizes.iter().sum(), cfg.batch_size, cfg.accumulation);
    let start = Instant::now();
    let mut output = RunOutput::default();
    let first = trainer.steps_taken();
    for step in first + 1..=first + cfg.max_steps {
        let epoch = ((step - first - 1) / epoch_len as u64) as usize;
        let temperature = temperature_at_epoch(&cfg.sampling, epoch);
        let q = match &cfg.fixed_probabilities {
            Some(q) => q.clone(),
            None => compute_sampling_probs(sizes, temperature)?,
        };
        let mut groups = Vec::with_capacity(cfg.accumulation);
        let mut micro = Vec::with_capacity(cfg.accumulation);
        for _ in 0..cfg.accumulation {
            let (g, b) = sample(&mut rng, &q)?;
            groups.push(g);
            micro.push(b);
        }
        let losses = trainer.step(&micro, &mut loss_fn)?;
        let mut per: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (&g, &l) in groups.iter().zip(&losses) {
            let e = per.entry(labels[g].clone()).or_default();
            e.0 += l;
            e.1 += 1;
        }
        let record = StepRecord {
            step,
            epoch,
            lr: lr_at_step(&trainer.schedule, step),
            temperature,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            losses: per.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            wall_time: start.elapsed().as_secs_f64(),
        };
        sink.record(&record)?;
        if step % 500 == 0 {
            info!("{prefix} step {step}: loss {:.4} lr {:.2e} T {:.2}", record.loss, record.lr, temperature);
        }
        output.metrics.push(record);
        let done = step - first;
        if done.is_multiple_of(cfg.checkpoint_interval) || done == cfg.max_steps {
            if let Some(p) = sink.checkpoint(&trainer.model, step)? {
                output.checkpoints.push(p);
            }
        }
    }
    Ok(output)
}

/// Multilingual fine-tuning with temperature-sampled directions.
pub fn train_translation<F: Float>(
    trainer: &mut Trainer<F>,
    corpus: &MultilingualCorpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<RunOutput> {
    if vocab.len() > trainer.model.config.vocab_size {
        return usage(format!("vocabulary has {} tokens but the model only {}", vocab.len(), trainer.model.config.vocab_size));
    }
    let labels: Vec<String> = corpus.directions().iter().map(|d| d.to_string()).collect();
    let eps = cfg.label_smoothing;
    run_loop(
        trainer,
        cfg,
        out,
        "train",
        &labels,
        &corpus.sizes(),
        |rng, q| {
            let b = sample_batch(rng, corpus, q, cfg.batch_size, vocab)?;
            Ok((b.direction, b))
        },
        |s, b| translation_loss(s, b, eps),
    )
}

/// Masked-LM pretraining over temperature-sampled languages.
pub fn pretrain_mlm<F: Float>(
    trainer: &mut Trainer<F>,
    mono: &MonolingualCorpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<RunOutput> {
    if vocab.len() > trainer.model.config.vocab_size {
        return usage(format!("vocabulary has {} tokens but the model only {}", vocab.len(), trainer.model.config.vocab_size));
    }
    run_loop(
        trainer,
        cfg,
        out,
        "pretrain",
        &mono.languages,
        &mono.sizes(),
        |rng, q| {
            let lang = crate::corpus::sample_direction(rng, q, mono.languages.len())?;
            let pool = &mono.sentences[lang];
            let picks: Vec<&[usize]> =
                (0..cfg.batch_size).map(|_| pool[rng.random_range(0..pool.len())].as_slice()).collect();
            Ok((lang, mask_tokens(rng, &picks, &cfg.mask, vocab)?))
        },
        |s, b: &MaskedBatch| mlm_loss(s, b),
    )
}
