//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::datagen::{generate_corpus, load_corpus, read_manifest, save_corpus, Corpus, CorpusSpec};
use crate::error::{KwsError, Result};
use crate::eval::{probe_csv, roc_and_frr, score_utterances, table2_sweep, write_text, Anchor};
use crate::model::{ModelConfig, ModelParams};
use crate::sweep::{averaged_csv, run_sweep, sweep_csv, SweepInputs};
use crate::training::{
    gradient_check, standard_objectives, train_model, write_log_csv, GradCheckOptions, LogRow, ParamInit,
};

#[derive(Debug, Parser)]
#[command(name = "advkws", version, about = "SVDF keyword spotting with domain-adversarial training")]
pub struct Cli {
    /// Experiment configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a two-domain toy corpus.
    Gen(GenArgs),
    /// Train a model (baseline when beta = 0).
    Train(TrainArgs),
    /// Score a real-domain corpus and report FRR at the FA/h anchor.
    Eval(EvalArgs),
    /// Run the lambda x real-positive-weight x seed grid.
    Sweep(SweepArgs),
    /// Train frozen-feature domain probes on tap subsets.
    Probe(ProbeArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
    Probe,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Overrides the sampling seed of the chosen split.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub real_pos_weight: Option<f64>,
    /// Comma-separated taps feeding the adversarial head, e.g. en_0,de_2.
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<String>>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        if let Some(beta) = self.beta {
            cfg.loss.beta = beta;
        }
        if let Some(lambda) = self.lambda {
            cfg.loss.lambda = lambda;
        }
        if let Some(w) = self.real_pos_weight {
            cfg.train.real_positive_weight = w;
        }
        if let Some(taps) = &self.taps {
            cfg.train.taps = Some(taps.clone());
        }
        cfg.validate()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory from `gen`; generated from the config when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Real-domain corpus from `gen --split eval`; generated when absent.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub target_fah: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub probe_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub target_fah: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Balanced probe corpus from `gen --split probe`; generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Probe a single comma-separated tap subset instead of the configured rows.
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Start from all-zero weights instead of the random initialization.
    #[arg(long)]
    pub zero_init: bool,
    /// Check at most this many coordinates per tensor.
    #[arg(long)]
    pub max_coords: Option<usize>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    positives: usize,
    negatives: usize,
    negative_hours: f64,
    anchor: Anchor,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))
}

/// Loads `dir` if given, else generates the corpus described by `spec`.
fn obtain_corpus(dir: Option<&Path>, spec: &CorpusSpec) -> Result<Corpus> {
    let Some(dir) = dir else {
        log::info!("generating corpus (seed {})", spec.seed);
        return generate_corpus(spec);
    };
    match read_manifest(dir)? {
        Some(m) if m.spec_hash != spec.hash() => log::warn!(
            "{} was generated from different corpus settings than the current config",
            dir.display()
        ),
        Some(_) => {}
        None => log::warn!("{} has no manifest", dir.display()),
    }
    load_corpus(dir)
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    Checkpoint::load(path)?.model_params(None)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &(json + "\n"))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(args) => gen(&cfg, &args),
        Command::Train(args) => train(&mut cfg, &args),
        Command::Eval(args) => eval(&mut cfg, &args),
        Command::Sweep(args) => sweep(&mut cfg, &args),
        Command::Probe(args) => probe(&mut cfg, &args),
        Command::Gradcheck(args) => gradcheck(&cfg, &args),
    }
}

fn gen(cfg: &ExperimentConfig, args: &GenArgs) -> Result<()> {
    let mut spec = match args.split {
        Split::Train => cfg.corpus.clone(),
        Split::Eval => cfg.eval_corpus_spec(),
        Split::Probe => cfg.probe_corpus_spec(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let corpus = generate_corpus(&spec)?;
    let manifest = save_corpus(&args.out, &corpus, &spec)?;
    log::info!("wrote {} examples to {}", corpus.len(), args.out.display());
    println!("{}", serde_json::to_string(&manifest.counts).expect("counts serialize"));
    Ok(())
}

fn train(cfg: &mut ExperimentConfig, args: &TrainArgs) -> Result<()> {
    args.overrides.apply(cfg)?;
    let model = cfg.model_config()?;
    let corpus = obtain_corpus(args.corpus.as_deref(), &cfg.corpus)?;
    create_dir(&args.out)?;
    let (trainer, log) = train_model(&model, &corpus, &cfg.loss, &cfg.optimizer, &cfg.train)?;
    trainer.checkpoint().save(args.out.join("checkpoint.svdf"))?;
    write_log_csv(&args.out.join("train_log.csv"), &log)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml())?;
    if let Some(last) = log.last() {
        println!("{}\n{}", LogRow::HEADER, last.csv());
    }
    Ok(())
}

fn eval(cfg: &mut ExperimentConfig, args: &EvalArgs) -> Result<()> {
    if let Some(t) = args.target_fah {
        cfg.eval.target_fa_per_hour = t;
        cfg.validate()?;
    }
    let params = load_model(&args.checkpoint)?;
    let corpus = obtain_corpus(args.eval_corpus.as_deref(), &cfg.eval_corpus_spec())?;
    let examples = corpus.real_examples();
    let scores = score_utterances(&params, &examples)?;
    let (roc, anchor) = roc_and_frr(&scores, cfg.eval.target_fa_per_hour)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("roc.csv"), &roc.to_csv())?;
    let negatives: Vec<_> = scores.iter().filter(|s| !s.is_positive).collect();
    let summary = EvalSummary {
        positives: scores.len() - negatives.len(),
        negatives: negatives.len(),
        negative_hours: negatives.iter().map(|s| s.duration_s).sum::<f64>() / 3600.0,
        anchor,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "FRR {:.4} at threshold {:.6} ({:.4} FA/h, target {})",
        anchor.frr, anchor.threshold, anchor.fa_per_hour, anchor.target_fa_per_hour
    );
    Ok(())
}

fn sweep(cfg: &mut ExperimentConfig, args: &SweepArgs) -> Result<()> {
    if let Some(t) = args.target_fah {
        cfg.eval.target_fa_per_hour = t;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let model = cfg.model_config()?;
    let corpus = obtain_corpus(args.corpus.as_deref(), &cfg.corpus)?;
    let eval_corpus = obtain_corpus(args.eval_corpus.as_deref(), &cfg.eval_corpus_spec())?;
    let probe_corpus = match cfg.sweep.probe {
        true => Some(obtain_corpus(args.probe_corpus.as_deref(), &cfg.probe_corpus_spec())?),
        false => None,
    };
    let eval_examples = eval_corpus.real_examples();
    let inputs = SweepInputs {
        model: &model,
        corpus: &corpus,
        eval_examples: &eval_examples,
        target_fa_per_hour: cfg.eval.target_fa_per_hour,
        loss: cfg.loss,
        adam: cfg.optimizer,
        train: cfg.train.clone(),
        probe: probe_corpus.as_ref().map(|c| (c, cfg.probe.probe_config())),
        fingerprint: cfg.fingerprint(),
    };
    create_dir(&args.out)?;
    let results = run_sweep(&inputs, &cfg.sweep, Some(&args.out))?;
    write_text(&args.out.join("sweep.csv"), &sweep_csv(&results))?;
    let averaged = averaged_csv(&results);
    write_text(&args.out.join("sweep_averaged.csv"), &averaged)?;
    print!("{averaged}");
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed; see sweep.csv", results.len());
    }
    Ok(())
}

fn probe(cfg: &mut ExperimentConfig, args: &ProbeArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.probe.seed = seed;
    }
    if let Some(taps) = &args.taps {
        cfg.probe.subsets = Some(vec![taps.clone()]);
    }
    cfg.validate()?;
    let params = load_model(&args.checkpoint)?;
    let corpus = obtain_corpus(args.corpus.as_deref(), &cfg.probe_corpus_spec())?;
    let reports = table2_sweep(&params, &corpus, &cfg.probe.tap_subsets()?, &cfg.probe.probe_config())?;
    create_dir(&args.out)?;
    let csv = probe_csv(&reports);
    write_text(&args.out.join("probe.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig, args: &GradcheckArgs) -> Result<()> {
    let model: ModelConfig = cfg.model_config()?;
    let opts = GradCheckOptions {
        max_coords_per_tensor: args.max_coords,
        ..GradCheckOptions::default()
    };
    let init = if args.zero_init { ParamInit::Zero } else { ParamInit::Random };
    let mut text = String::new();
    let mut failures = Vec::new();
    for objective in standard_objectives() {
        let report = gradient_check(&model, args.seed, objective, init, &opts)?;
        text += &format!("== {objective}\n{report}\n");
        if !report.passed() {
            failures.push(objective.to_string());
        }
    }
    print!("{text}");
    if let Some(path) = &args.out {
        write_text(path, &text)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(KwsError::Numeric(format!("gradient check failed for {}", failures.join(", "))))
    }
}
