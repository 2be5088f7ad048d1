//! Subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nmt_core::corpus::{read_lines, read_parallel, write_parallel, Direction, MonolingualCorpus, MultilingualCorpus};
use nmt_core::eval::{evaluate_bleu, translate};
use nmt_core::init::{initialize, load_checkpoint, random_model, Checkpoint};
use nmt_core::model::TransformerModel;
use nmt_core::probe::{
    classify_probe, corpus_aer, probe_align, probe_parse, read_classification, read_conllu, read_gold_alignments,
};
use nmt_core::train::{average_checkpoints, backtranslate, pretrain_mlm, train_translation, Trainer};
use serde_json::json;

use crate::config::{usage_error, RunConfig, StrategyName, UsageError};
use crate::experiment::{pretrain_config, table4, table5, ToyData};
use crate::toy::{
    alignment_file_name, dev_file_name, make_toy_data, trees_file_name, CLASSIFY_TEST_FILE, CLASSIFY_TRAIN_FILE,
    SPEC_FILE,
};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "nmt", version, about = "Multilingual NMT with pretrained-encoder initialization")]
pub struct Cli {
    /// Seed for every random choice; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (computation is single-threaded; values above 1 are accepted and recorded).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for the config snapshot, checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-LM pretraining of an encoder on monolingual data.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Multilingual fine-tuning with temperature sampling.
    Train(TrainArgs),
    /// Beam-search translation of one sentence per line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tgt_lang: String,
        /// Input file; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Synthetic pairs from monolingual target text and a reverse model.
    Backtranslate {
        /// Reverse model translating into the direction's source language.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Direction of the synthetic pairs, e.g. `de-en`.
        #[arg(long)]
        direction: String,
        /// Monolingual text in the direction's target language.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Corpus BLEU of a model on a parallel TSV file.
    EvalBleu {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Direction of the pairs, e.g. `de-en`.
        #[arg(long)]
        direction: String,
    },
    /// Word alignment from encoder similarities, scored by AER.
    ProbeAlign {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        direction: String,
        /// Encoder layer (0-based); the final output when absent.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Attention spanning trees per layer, scored by UAS.
    ProbeParse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        lang: String,
    },
    /// First-position projection probe on sentence pairs.
    ProbeClassify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Elementwise mean of checkpoints with one architecture.
    AverageCheckpoints {
        #[arg(required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Writes the synthetic cipher corpus.
    MakeToyData {
        /// Target directory; defaults to `<out-dir>/data`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Runs an ablation recipe on the toy corpus.
    Experiment {
        recipe: Recipe,
        /// Existing toy corpus; generated under the run directory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    /// random, encoder or encoder-decoder.
    #[arg(long)]
    pub init: Option<StrategyName>,
    #[arg(long)]
    pub init_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Recipe {
    #[value(name = "table5-toy")]
    Table5Toy,
    #[value(name = "table4-toy")]
    Table4Toy,
}

/// Parses `argv`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Usage for caller mistakes (bad flags, config or preconditions), runtime otherwise.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let is_usage = e.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<nmt_core::Error>(), Some(nmt_core::Error::Usage(_)))
    });
    if is_usage {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.threads == 0 {
        return Err(usage_error("--threads must be at least 1"));
    }
    Ok(cfg)
}

/// Creates the run directory layout and writes the resolved configuration.
pub fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    for sub in ["checkpoints", "logs", "reports"] {
        fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<TransformerModel> {
    let ckpt: Checkpoint = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.into_model()?)
}

fn write_report(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    let path = dir.join("reports").join(name);
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out_dir.clone();
    match cli.command {
        Command::Pretrain { steps } => {
            if let (Some(s), Some(p)) = (steps, cfg.pretrain.as_mut()) {
                p.max_steps = s;
            }
            cfg.validate_pretrain()?;
            let vocab = cfg.vocabulary()?;
            let langs = cfg.data.languages.clone().unwrap_or_else(|| vocab.languages().to_vec());
            let mono = MonolingualCorpus::load(cfg.data_dir()?, &langs, &vocab, &cfg.tokenizer(), cfg.data.max_len)?;
            let model_cfg = pretrain_config(&cfg.model_config(vocab.len())?);
            let tc = cfg.pretrain_section()?.clone();
            prepare_run_dir(&out, &cfg)?;
            let model = random_model::<f32>(&model_cfg, tc.seed)?;
            let mut trainer = Trainer::new(model, tc.lr, tc.adam, tc.seed)?;
            let run = pretrain_mlm(&mut trainer, &mono, &vocab, &tc, Some(&out))?;
            println!("pretrained {} steps, tail loss {:.4}", tc.max_steps, run.tail_loss(100));
        }
        Command::Train(args) => {
            if let Some(s) = args.init {
                cfg.init.strategy = s;
            }
            if let Some(p) = args.init_from {
                cfg.init.source = Some(p);
            }
            if let (Some(s), Some(t)) = (args.steps, cfg.train.as_mut()) {
                t.max_steps = s;
            }
            cfg.validate_train()?;
            let vocab = cfg.vocabulary()?;
            let corpus =
                MultilingualCorpus::load(cfg.data_dir()?, &cfg.directions()?, &vocab, &cfg.tokenizer(), cfg.data.max_len)?;
            let model_cfg = cfg.model_config(vocab.len())?;
            let source = match &cfg.init.source {
                Some(p) if cfg.init.strategy != StrategyName::Random => Some(load_checkpoint::<f32>(p)?),
                _ => None,
            };
            let tc = cfg.train_section()?.clone();
            let model = initialize::<f32>(&model_cfg, cfg.init.strategy(), source.as_ref(), tc.seed)?;
            prepare_run_dir(&out, &cfg)?;
            let mut trainer = Trainer::new(model, tc.lr, tc.adam, tc.seed)?;
            let run = train_translation(&mut trainer, &corpus, &vocab, &tc, Some(&out))?;
            println!("trained {} steps, tail loss {:.4}", tc.max_steps, run.tail_loss(100));
        }
        Command::Translate { checkpoint, tgt_lang, input, output } => {
            cfg.validate_common()?;
            let vocab = cfg.vocabulary()?;
            let model = load_model(&checkpoint)?;
            let text = match input {
                Some(p) => fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let lines: Vec<String> = text.lines().map(str::to_string).collect();
            let outs = translate(&model, &vocab, &cfg.tokenizer(), &lines, &tgt_lang, &cfg.beam)?;
            let body: String = outs.iter().map(|(t, _)| format!("{t}\n")).collect();
            match output {
                Some(p) => fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{body}"),
            }
        }
        Command::Backtranslate { checkpoint, direction, input, output } => {
            cfg.validate_common()?;
            let direction = Direction::parse(&direction)?;
            let vocab = cfg.vocabulary()?;
            let model = load_model(&checkpoint)?;
            let mono = read_lines(&input)?;
            let bt = backtranslate(&model, &vocab, &cfg.tokenizer(), &mono, &direction, &cfg.beam)?;
            write_parallel(&output, &bt.pairs)?;
            println!("{} pairs written, {} dropped", bt.pairs.len(), bt.dropped);
        }
        Command::EvalBleu { checkpoint, pairs, direction } => {
            cfg.validate_common()?;
            let direction = Direction::parse(&direction)?;
            let vocab = cfg.vocabulary()?;
            let model = load_model(&checkpoint)?;
            let pairs = read_parallel(&pairs)?;
            let (bleu, hyps) = evaluate_bleu(&model, &vocab, &cfg.tokenizer(), &pairs, &direction.tgt, &cfg.beam)?;
            prepare_run_dir(&out, &cfg)?;
            fs::write(out.join("reports").join(format!("hyp.{direction}.txt")), hyps.join("\n") + "\n")?;
            write_report(&out, &format!("bleu.{direction}.json"), &json!({"direction": direction.to_string(), "bleu": bleu, "sentences": pairs.len()}))?;
            println!("BLEU {direction} = {bleu:.2}");
        }
        Command::ProbeAlign { checkpoint, pairs, gold, direction, layer } => {
            cfg.validate_common()?;
            if layer.is_some() {
                cfg.probe.layer = layer;
            }
            let direction = Direction::parse(&direction)?;
            let vocab = cfg.vocabulary()?;
            let model = load_model(&checkpoint)?;
            let pairs = read_parallel(&pairs)?;
            let tok = cfg.tokenizer();
            let found =
                probe_align(&model, &vocab, &tok, &pairs, &direction.src, &direction.tgt, cfg.probe.layer, cfg.probe.iterations)?;
            let aer = match gold {
                Some(g) => Some(corpus_aer(&found, &read_gold_alignments(&g)?)?),
                None => None,
            };
            prepare_run_dir(&out, &cfg)?;
            let lines: Vec<String> = found.iter().map(|a| a.iter().map(|(i, j)| format!("{i}-{j}")).collect::<Vec<_>>().join(" ")).collect();
            fs::write(out.join("reports").join(format!("align.{direction}.txt")), lines.join("\n") + "\n")?;
            write_report(
                &out,
                &format!("align.{direction}.json"),
                &json!({"direction": direction.to_string(), "layer": cfg.probe.layer, "iterations": cfg.probe.iterations, "sentences": pairs.len(), "aer": aer}),
            )?;
            match aer {
                Some(a) => println!("AER {direction} = {a:.4}"),
                None => println!("aligned {} sentence pairs", pairs.len()),
            }
        }
        Command::ProbeParse { checkpoint, trees, lang } => {
            cfg.validate_common()?;
            let vocab = cfg.vocabulary()?;
            let model = load_model(&checkpoint)?;
            let trees = read_conllu(&trees)?;
            let report = probe_parse(&model, &vocab, &cfg.tokenizer(), &lang, &trees)?;
            prepare_run_dir(&out, &cfg)?;
            fs::write(out.join("reports").join(format!("parse.{lang}.tsv")), report.to_table())?;
            write_report(&out, &format!("parse.{lang}.json"), &serde_json::to_value(&report)?)?;
            print!("{}", report.to_table());
        }
        Command::ProbeClassify { checkpoint, train, test, lang, finetune, epochs } => {
            cfg.validate_common()?;
            cfg.probe.classify.finetune |= finetune;
            if let Some(e) = epochs {
                cfg.probe.classify.epochs = e;
            }
            let vocab = cfg.vocabulary()?;
            let mut model = load_model(&checkpoint)?;
            let (train, test) = (read_classification(&train)?, read_classification(&test)?);
            let report = classify_probe(&mut model, &vocab, &cfg.tokenizer(), &lang, &train, &test, &cfg.probe.classify)?;
            prepare_run_dir(&out, &cfg)?;
            write_report(&out, "classify.json", &serde_json::to_value(&report)?)?;
            println!("accuracy {:.4} (train {:.4})", report.test_accuracy, report.train_accuracy);
        }
        Command::AverageCheckpoints { inputs, output } => {
            let avg = average_checkpoints(&inputs)?;
            avg.save(&output).with_context(|| format!("writing {}", output.display()))?;
            println!("averaged {} checkpoints into {}", inputs.len(), output.display());
        }
        Command::MakeToyData { dir } => {
            let dir = dir.unwrap_or_else(|| out.join("data"));
            make_toy_data(&cfg.toy, &dir)?;
            println!("toy corpus written to {}", dir.display());
        }
        Command::Experiment { recipe, data } => {
            cfg.experiment.validate().map_err(|e| usage_error(format!("{e:#}")))?;
            prepare_run_dir(&out, &cfg)?;
            let dir = match data {
                Some(d) => {
                    let spec_path = d.join(SPEC_FILE);
                    if spec_path.exists() {
                        cfg.toy = toml::from_str(&fs::read_to_string(&spec_path)?)
                            .map_err(|e| usage_error(format!("{}: {e}", spec_path.display())))?;
                    }
                    d
                }
                None => {
                    let d = out.join("data");
                    make_toy_data(&cfg.toy, &d)?;
                    d
                }
            };
            let data = ToyData::load(&dir, &cfg.toy, cfg.experiment.max_len, cfg.experiment.dev_limit)?;
            let (t5, _, _) = table5(&data, &cfg.experiment, &out)?;
            let report = match recipe {
                Recipe::Table5Toy => t5,
                Recipe::Table4Toy => table4(&data, &cfg.experiment, &out, &t5)?,
            };
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

/// Paths of the toy corpus files a probe run reads.
pub fn toy_probe_files(dir: &Path, lang: &str, base: &str) -> (PathBuf, PathBuf, PathBuf) {
    let d = Direction::new(lang, base);
    (dir.join(dev_file_name(&d)), dir.join(alignment_file_name(&d)), dir.join(trees_file_name(base)))
}

pub fn toy_classify_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(CLASSIFY_TRAIN_FILE), dir.join(CLASSIFY_TEST_FILE))
}
