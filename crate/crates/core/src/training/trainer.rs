use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adversarial::{adv_forward, adversarial_backward, head_loss, AdvHeadParams};
use super::loss::{supervised_loss, LossConfig};
use super::optimizer::{Adam, AdamConfig};
use crate::checkpoint::Checkpoint;
use crate::datagen::{augment, sample_batch, Corpus, LabeledExample, MixtureWeights};
use crate::error::{KwsError, Result};
use crate::model::{collect_adv_features, split_adv_gradient, ModelConfig, ModelParams, TapSet};
use crate::rng::purpose_seed;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub model: ModelParams<T>,
    pub head: AdvHeadParams<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>, head: &AdvHeadParams<T>) -> Self {
        Self {
            model: params.zeros_like(),
            head: head.zeros_like(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.model.is_finite() && self.head.is_finite()
    }

    /// Name of the first tensor holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        self.model
            .tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
            .or_else(|| (!self.head.is_finite()).then(|| "adv".to_string()))
    }
}

/// Batch-averaged loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub supervised: f64,
    /// Head loss (before reversal).
    pub adversarial: f64,
    /// `(1 - beta) * supervised + beta * adversarial`
    pub total: f64,
    pub head_accuracy: f64,
}

/// Gradients of the adversarial objective averaged over `batch`.
///
/// Model gradients are `(1 - beta) * dL_sup` plus `beta` times the reversed
/// head gradients at the taps; head gradients are `beta * dL_adv`. With
/// `beta == 0` the adversarial branch is not evaluated for gradients at all.
pub fn batch_gradients<T: Real>(
    params: &ModelParams<T>,
    head: &AdvHeadParams<T>,
    taps: &TapSet,
    batch: &[&LabeledExample],
    cfg: &LossConfig,
) -> Result<(Gradients<T>, BatchLosses)> {
    if batch.is_empty() {
        return Err(KwsError::Data("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(params, head);
    let inv = 1.0 / batch.len() as f64;
    let sup_scale = T::of((1.0 - cfg.beta) * inv);
    let adv_scale = T::of(cfg.beta * inv);
    let adversarial = cfg.beta > 0.0;

    let (mut sup_total, mut adv_total, mut correct) = (0.0, 0.0, 0usize);
    for ex in batch {
        let trace = params.forward_features(&ex.features)?;
        let sup = supervised_loss(&trace.encoder_logits, &trace.decoder_logits, &ex.labels, cfg)?;
        sup_total += sup.total.as_f64();
        let features = collect_adv_features(&trace, taps)?;
        let domain = ex.labels.domain;

        let tap_grads = if adversarial {
            let adv = adversarial_backward(&features, head, domain, cfg.lambda)?;
            adv_total += adv.loss.as_f64();
            correct += usize::from(adv.correct(domain));
            grads.head.add_scaled(&adv.head_grads, adv_scale);
            split_adv_gradient(params.config(), taps, &(adv.feature_grads * adv_scale))?
        } else {
            let out = adv_forward(&features, head)?;
            adv_total += head_loss(out.logit, domain).0.as_f64();
            correct += usize::from((out.logit > T::zero()) == (domain == super::Domain::Synthetic));
            Vec::new()
        };
        let d_enc = sup.grads.encoder * sup_scale;
        let d_dec = sup.grads.decoder * sup_scale;
        params.backward(&trace, &d_enc, &d_dec, &tap_grads, &mut grads.model)?;
    }
    let supervised = sup_total * inv;
    let adversarial_loss = adv_total * inv;
    Ok((
        grads,
        BatchLosses {
            supervised,
            adversarial: adversarial_loss,
            total: (1.0 - cfg.beta) * supervised + cfg.beta * adversarial_loss,
            head_accuracy: correct as f64 * inv,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: BatchLosses,
}

/// One row of the training log CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub supervised_loss: f64,
    pub adversarial_loss: f64,
    pub total_loss: f64,
    pub head_accuracy: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,l_sup,l_adv,l_total,head_accuracy";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4}",
            self.step, self.supervised_loss, self.adversarial_loss, self.total_loss, self.head_accuracy
        )
    }
}

impl From<StepReport> for LogRow {
    fn from(r: StepReport) -> Self {
        Self {
            step: r.step,
            supervised_loss: r.losses.supervised,
            adversarial_loss: r.losses.adversarial,
            total_loss: r.losses.total,
            head_accuracy: r.losses.head_accuracy,
        }
    }
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(LogRow::HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv());
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| KwsError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Sampling weight of real positives relative to their share of the corpus.
    pub real_positive_weight: f64,
    /// Std-dev of Gaussian feature noise added to each sampled example.
    pub augment_noise: f64,
    /// Log every n-th step (the final step is always logged).
    pub log_every: usize,
    /// Tap names feeding the adversarial head; all taps when absent.
    pub taps: Option<Vec<String>>,
    /// Learning rate of the adversarial head; the model's rate when absent.
    pub head_learning_rate: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 2000,
            batch_size: 32,
            real_positive_weight: 1.0,
            augment_noise: 0.0,
            log_every: 10,
            taps: None,
            head_learning_rate: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(KwsError::Config("batch_size and log_every must be >= 1".into()));
        }
        if !(self.augment_noise >= 0.0 && self.augment_noise.is_finite()) {
            return Err(KwsError::Config("augment_noise must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.real_positive_weight) {
            return Err(KwsError::Config("real_positive_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn tap_set(&self, config: &ModelConfig) -> Result<TapSet> {
        let taps = match &self.taps {
            Some(names) => TapSet::parse(names)?,
            None => TapSet::all(config),
        };
        taps.validate(config)?;
        Ok(taps)
    }
}

/// Owns the KWS parameters, the adversarial head and both optimizer states.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParams<f32>,
    head: AdvHeadParams<f32>,
    taps: TapSet,
    loss: LossConfig,
    adam: AdamConfig,
    head_adam: AdamConfig,
    model_opt: Adam<ModelParams<f32>>,
    head_opt: Adam<AdvHeadParams<f32>>,
    step: u64,
}

impl Trainer {
    /// Model and head initialization depend only on `seed`, never on the
    /// loss weights, so baseline and adversarial runs start identically.
    pub fn new(config: &ModelConfig, taps: TapSet, loss: LossConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        loss.validate()?;
        adam.validate()?;
        taps.validate(config)?;
        let params = ModelParams::init(config, purpose_seed(seed, "model"))?;
        let head = AdvHeadParams::init(config, &taps, purpose_seed(seed, "adv-head"))?;
        Ok(Self {
            model_opt: Adam::new(&params),
            head_opt: Adam::new(&head),
            params,
            head,
            taps,
            loss,
            adam,
            head_adam: adam,
            step: 0,
        })
    }

    pub fn set_head_optimizer(&mut self, adam: AdamConfig) -> Result<()> {
        adam.validate()?;
        self.head_adam = adam;
        Ok(())
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn head(&self) -> &AdvHeadParams<f32> {
        &self.head
    }

    pub fn taps(&self) -> &TapSet {
        &self.taps
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.params, Some(&self.head))
    }

    /// One optimizer update on `batch`.
    pub fn total_loss_step(&mut self, batch: &[&LabeledExample]) -> Result<StepReport> {
        let step = self.step + 1;
        let (grads, losses) = batch_gradients(&self.params, &self.head, &self.taps, batch, &self.loss)?;
        if !losses.total.is_finite() || !losses.supervised.is_finite() {
            return Err(KwsError::Numeric(format!(
                "non-finite loss at step {step}: L_sup={} L_adv={}",
                losses.supervised, losses.adversarial
            )));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(KwsError::Numeric(format!("non-finite gradient in {name} at step {step}")));
        }
        self.model_opt.step(&mut self.params, &grads.model, &self.adam);
        if self.loss.beta > 0.0 {
            self.head_opt.step(&mut self.head, &grads.head, &self.head_adam);
        }
        if !self.params.is_finite() || !self.head.is_finite() || !self.model_opt.is_finite() {
            return Err(KwsError::Numeric(format!("parameters diverged at step {step}")));
        }
        self.step = step;
        Ok(StepReport { step, losses })
    }

    /// Runs `opts.steps` updates on batches drawn from `corpus`.
    pub fn train(&mut self, corpus: &Corpus, opts: &TrainOptions) -> Result<Vec<LogRow>> {
        opts.validate()?;
        let weights = MixtureWeights::for_training(corpus, opts.real_positive_weight)?;
        let mut batch_rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(purpose_seed(opts.seed, "batches"));
        let mut noise_rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(purpose_seed(opts.seed, "augment"));
        let mut log = Vec::new();
        for i in 0..opts.steps {
            let sampled = sample_batch(corpus, &weights, opts.batch_size, &mut batch_rng)?;
            let augmented = sampled
                .into_iter()
                .map(|ex| augment(ex, opts.augment_noise, &mut noise_rng))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<&LabeledExample> = augmented.iter().map(|c| c.as_ref()).collect();
            let report = self.total_loss_step(&batch)?;
            if i % opts.log_every == 0 || i + 1 == opts.steps {
                log::debug!(
                    "step {} L_sup {:.4} L_adv {:.4} acc {:.3}",
                    report.step,
                    report.losses.supervised,
                    report.losses.adversarial,
                    report.losses.head_accuracy
                );
                log.push(LogRow::from(report));
            }
        }
        Ok(log)
    }
}

/// Builds a trainer from `opts.seed` and trains it to completion.
pub fn train_model(
    config: &ModelConfig,
    corpus: &Corpus,
    loss: &LossConfig,
    adam: &AdamConfig,
    opts: &TrainOptions,
) -> Result<(Trainer, Vec<LogRow>)> {
    let taps = opts.tap_set(config)?;
    let mut trainer = Trainer::new(config, taps, *loss, *adam, opts.seed)?;
    if let Some(lr) = opts.head_learning_rate {
        trainer.set_head_optimizer(AdamConfig {
            learning_rate: lr,
            ..*adam
        })?;
    }
    let log = trainer.train(corpus, opts)?;
    Ok((trainer, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, BucketCounts, CorpusSpec};
    use crate::training::{check_gradients, GradCheckOptions};

    fn corpus(n: usize) -> Corpus {
        generate_corpus(&CorpusSpec {
            counts: BucketCounts::uniform(n),
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn trainer(loss: LossConfig, seed: u64) -> Trainer {
        let cfg = ModelConfig::toy(4);
        Trainer::new(&cfg, TapSet::all(&cfg), loss, AdamConfig::default(), seed).unwrap()
    }

    fn opts(steps: usize) -> TrainOptions {
        TrainOptions {
            steps,
            batch_size: 8,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn zero_beta_matches_baseline_bit_for_bit() {
        let data = corpus(6);
        let mut base = trainer(LossConfig::baseline(), 3);
        let mut adv = trainer(
            LossConfig {
                beta: 0.0,
                lambda: 0.9,
                ..LossConfig::default()
            },
            3,
        );
        base.train(&data, &opts(15)).unwrap();
        adv.train(&data, &opts(15)).unwrap();
        assert_eq!(base.checkpoint().to_bytes(), adv.checkpoint().to_bytes());
    }

    #[test]
    fn zero_lambda_full_beta_freezes_model() {
        let data = corpus(4);
        let mut t = trainer(
            LossConfig {
                beta: 1.0,
                lambda: 0.0,
                ..LossConfig::default()
            },
            5,
        );
        let before = t.params().clone();
        let head_before = t.head().clone();
        t.train(&data, &opts(10)).unwrap();
        assert_eq!(t.params(), &before);
        assert_ne!(t.head(), &head_before);
    }

    #[test]
    fn supervised_loss_halves_on_fixed_batch() {
        let data = corpus(4);
        let batch: Vec<&LabeledExample> = data.iter().map(|(_, e)| e).collect();
        let mut t = trainer(LossConfig::baseline(), 2);
        let mut t_fast = t.clone();
        t_fast.adam = AdamConfig::with_learning_rate(1e-2);
        let first = t_fast.total_loss_step(&batch).unwrap().losses.supervised;
        let mut last = first;
        for _ in 1..200 {
            last = t_fast.total_loss_step(&batch).unwrap().losses.supervised;
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
        t.total_loss_step(&batch).unwrap();
        assert_eq!(t.steps_taken(), 1);
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let data = corpus(1);
        let batch: Vec<&LabeledExample> = data.iter().map(|(_, e)| e).collect();
        let cfg = ModelConfig::toy(4);
        let t = trainer(LossConfig::default(), 8);
        let mut params = t.params().cast::<f64>();
        for (name, mut tensor) in params.tensors_mut() {
            if name.ends_with(".bias") {
                tensor.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * ((i % 5) as f64 - 2.0));
            }
        }
        let head = AdvHeadParams::<f64>::init(&cfg, &TapSet::all(&cfg), 1).unwrap();
        let loss = LossConfig {
            lambda: 0.35,
            ..LossConfig::default()
        };
        let report = check_gradients(
            &params,
            &head,
            &TapSet::all(&cfg),
            &batch,
            &loss,
            &GradCheckOptions {
                max_coords_per_tensor: Some(12),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.checked() >= 200, "{}", report.checked());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn empty_batch_rejected() {
        let mut t = trainer(LossConfig::default(), 1);
        assert!(t.total_loss_step(&[]).is_err());
    }

    #[test]
    fn log_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let data = corpus(3);
        let mut t = trainer(LossConfig::default(), 1);
        let rows = t.train(&data, &TrainOptions { log_every: 2, ..opts(5) }).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 3, 5]);
        write_log_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), LogRow::HEADER);
        assert_eq!(text.lines().count(), 4);
    }
}
