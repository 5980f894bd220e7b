//! Central finite-difference check of the hand-written gradients.
//!
//! Model parameters are checked against the surrogate the trainer actually
//! descends, `(1 - beta) * L_sup - beta * lambda * L_adv`; head parameters
//! against `beta * L_adv`. A coordinate is skipped when either perturbation
//! flips a ReLU, moves a max-pool argmax or moves the head's argmax frame.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adversarial::{adv_forward, head_loss, AdvHeadParams};
use super::loss::{supervised_loss, LossConfig};
use super::trainer::batch_gradients;
use crate::datagen::{generate_corpus, BucketCounts, CorpusSpec, LabeledExample};
use crate::error::{KwsError, Result};
use crate::frontend::FEATURE_DIM;
use crate::model::{collect_adv_features, ModelConfig, ModelParams, TapSet};
use crate::rng::purpose_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckObjective {
    /// `L_sup` alone.
    Supervised,
    /// Adversarial term alone with unit reversal.
    Head,
    /// Mixed objective at `beta = 0.3`.
    Full { lambda: f64 },
}

impl CheckObjective {
    pub fn loss_config(self) -> LossConfig {
        let base = LossConfig::default();
        match self {
            CheckObjective::Supervised => LossConfig { beta: 0.0, ..base },
            CheckObjective::Head => LossConfig {
                beta: 1.0,
                lambda: 1.0,
                ..base
            },
            CheckObjective::Full { lambda } => LossConfig {
                beta: 0.3,
                lambda,
                ..base
            },
        }
    }
}

impl fmt::Display for CheckObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckObjective::Supervised => write!(f, "supervised"),
            CheckObjective::Head => write!(f, "head"),
            CheckObjective::Full { lambda } => write!(f, "full(lambda={lambda})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    Random,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub magnitude_floor: f64,
    /// Check an evenly spaced subset of at most this many entries per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            magnitude_floor: 1e-5,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.max_rel_error() < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>8} {:>8} {:>12}", "tensor", "checked", "skipped", "max_rel_err")?;
        for t in &self.tensors {
            writeln!(f, "{:<24} {:>8} {:>8} {:>12.3e}", t.name, t.checked, t.skipped, t.max_rel_error)?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.0e}): {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Objective values and the discrete choices they depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEvaluation {
    pub model_objective: f64,
    pub head_objective: f64,
    pattern: (Vec<bool>, Vec<usize>),
}

pub fn evaluate_batch(
    params: &ModelParams<f64>,
    head: &AdvHeadParams<f64>,
    taps: &TapSet,
    batch: &[&LabeledExample],
    cfg: &LossConfig,
) -> Result<BatchEvaluation> {
    let inv = 1.0 / batch.len() as f64;
    let (mut sup_total, mut adv_total) = (0.0, 0.0);
    let mut relu = Vec::new();
    let mut frames = Vec::new();
    for ex in batch {
        let trace = params.forward_features(&ex.features)?;
        let sup = supervised_loss(&trace.encoder_logits, &trace.decoder_logits, &ex.labels, cfg)?;
        let out = adv_forward(&collect_adv_features(&trace, taps)?, head)?;
        sup_total += sup.total;
        adv_total += head_loss(out.logit, ex.labels.domain).0;
        relu.extend(trace.relu_pattern());
        frames.extend([sup.maxpool_frame, out.frame]);
    }
    let (sup, adv) = (sup_total * inv, adv_total * inv);
    Ok(BatchEvaluation {
        model_objective: (1.0 - cfg.beta) * sup - cfg.beta * cfg.lambda * adv,
        head_objective: cfg.beta * adv,
        pattern: (relu, frames),
    })
}

fn coordinates(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(n) if n < len => (0..n).map(|i| i * len / n).collect(),
        _ => (0..len).collect(),
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `batch_gradients` against central differences for every tensor.
pub fn check_gradients(
    params: &ModelParams<f64>,
    head: &AdvHeadParams<f64>,
    taps: &TapSet,
    batch: &[&LabeledExample],
    cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (analytic, _) = batch_gradients(params, head, taps, batch, cfg)?;
    let base = evaluate_batch(params, head, taps, batch, cfg)?;
    let mut params = params.clone();
    let mut head = head.clone();
    let h = opts.step;
    let mut tensors = Vec::new();

    let analytic_model: Vec<(String, Vec<f64>)> = analytic
        .model
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    for (ti, (name, grad)) in analytic_model.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for i in coordinates(grad.len(), opts.max_coords_per_tensor) {
            let original = model_coord(&mut params, ti, i, None);
            model_coord(&mut params, ti, i, Some(original + h));
            let plus = evaluate_batch(&params, &head, taps, batch, cfg)?;
            model_coord(&mut params, ti, i, Some(original - h));
            let minus = evaluate_batch(&params, &head, taps, batch, cfg)?;
            model_coord(&mut params, ti, i, Some(original));
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus.model_objective - minus.model_objective) / (2.0 * h);
            check.checked += 1;
            check.max_rel_error = check
                .max_rel_error
                .max(relative_error(grad[i], numeric, opts.magnitude_floor));
        }
        tensors.push(check);
    }

    let head_grads: Vec<f64> = analytic
        .head
        .weight
        .iter()
        .copied()
        .chain([analytic.head.bias])
        .collect();
    let mut check = TensorCheck {
        name: "adv".into(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for i in coordinates(head.dim() + 1, opts.max_coords_per_tensor) {
        let original = head_coord(&mut head, i, None);
        head_coord(&mut head, i, Some(original + h));
        let plus = evaluate_batch(&params, &head, taps, batch, cfg)?;
        head_coord(&mut head, i, Some(original - h));
        let minus = evaluate_batch(&params, &head, taps, batch, cfg)?;
        head_coord(&mut head, i, Some(original));
        if plus.pattern != base.pattern || minus.pattern != base.pattern {
            check.skipped += 1;
            continue;
        }
        let numeric = (plus.head_objective - minus.head_objective) / (2.0 * h);
        check.checked += 1;
        check.max_rel_error = check
            .max_rel_error
            .max(relative_error(head_grads[i], numeric, opts.magnitude_floor));
    }
    tensors.push(check);

    Ok(GradCheckReport {
        tensors,
        tolerance: opts.tolerance,
    })
}

/// Reads entry `i` of tensor `ti`, optionally overwriting it first.
fn model_coord(params: &mut ModelParams<f64>, ti: usize, i: usize, value: Option<f64>) -> f64 {
    let mut tensors = params.tensors_mut();
    let slot = tensors[ti]
        .1
        .as_slice_mut()
        .expect("parameters are contiguous")
        .get_mut(i)
        .expect("coordinate in range");
    if let Some(v) = value {
        *slot = v;
    }
    *slot
}

fn head_coord(head: &mut AdvHeadParams<f64>, i: usize, value: Option<f64>) -> f64 {
    let dim = head.dim();
    let slot = if i < dim { &mut head.weight[i] } else { &mut head.bias };
    if let Some(v) = value {
        *slot = v;
    }
    *slot
}

/// Seeded toy instance: four short utterances, one per bucket, and either
/// random or all-zero parameters. Biases get a small jitter in both cases so
/// no pre-activation sits on a ReLU kink.
pub fn gradient_check(
    config: &ModelConfig,
    seed: u64,
    objective: CheckObjective,
    init: ParamInit,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if config.input_dim != FEATURE_DIM {
        return Err(KwsError::Config(format!(
            "gradient check needs input_dim {FEATURE_DIM}, got {}",
            config.input_dim
        )));
    }
    if config.encoder_classes < 2 {
        return Err(KwsError::Config("gradient check needs at least one phoneme class".into()));
    }
    let n_phonemes = config.encoder_classes - 1;
    let spec = CorpusSpec {
        seed: purpose_seed(seed, "gradcheck-data"),
        n_phonemes,
        keyword: (0..n_phonemes.min(4)).collect(),
        frames_per_phoneme: [5, 6],
        background_frames: [2, 4],
        counts: BucketCounts::uniform(1),
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let batch: Vec<&LabeledExample> = corpus.iter().map(|(_, e)| e).collect();
    let taps = TapSet::all(config);

    let mut rng = ChaCha8Rng::seed_from_u64(purpose_seed(seed, "gradcheck-jitter"));
    let (mut params, mut head) = match init {
        ParamInit::Random => (
            ModelParams::<f64>::init(config, purpose_seed(seed, "model"))?,
            AdvHeadParams::<f64>::init(config, &taps, purpose_seed(seed, "adv-head"))?,
        ),
        ParamInit::Zero => (
            ModelParams::<f64>::zeros(config)?,
            AdvHeadParams::<f64>::zeros(taps.feature_dim(config)?),
        ),
    };
    for (name, mut tensor) in params.tensors_mut() {
        if name.ends_with(".bias") {
            tensor.mapv_inplace(|v| v + jitter(&mut rng));
        }
    }
    head.bias += jitter(&mut rng);
    if init == ParamInit::Zero {
        // Zero tap weights would hide every head-to-feature path.
        head.weight.mapv_inplace(|_| jitter(&mut rng));
    }
    check_gradients(&params, &head, &taps, &batch, &objective.loss_config(), opts)
}

fn jitter(rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = rng.gen_range(0.02..0.1);
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Convenience for tests and the CLI: every objective on one seeded toy model.
pub fn standard_objectives() -> Vec<CheckObjective> {
    vec![
        CheckObjective::Supervised,
        CheckObjective::Head,
        CheckObjective::Full { lambda: 0.0 },
        CheckObjective::Full { lambda: 0.35 },
        CheckObjective::Full { lambda: 1.0 },
    ]
}
