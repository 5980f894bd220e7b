//! Detection scoring, ROC/FRR at a fixed false-accept rate, and domain probes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView1, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, LabeledExample};
use crate::error::{KwsError, Result};
use crate::frontend::STACKED_FRAME_SECONDS;
use crate::model::{collect_adv_features, ModelConfig, ModelParams, Tap, TapSet};
use crate::rng::purpose_seed;
use crate::training::{adversarial_backward, Adam, AdamConfig, AdvHeadParams, Domain, KEYWORD};
use crate::Real;

pub const DEFAULT_TARGET_FA_PER_HOUR: f64 = 0.133;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub id: usize,
    /// Max over frames of the keyword posterior.
    pub score: f64,
    pub is_positive: bool,
    pub duration_s: f64,
}

fn keyword_posterior<T: Real>(logits: ArrayView1<T>) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let sum: f64 = logits.iter().map(|v| (v.as_f64() - max).exp()).sum();
    (logits[KEYWORD].as_f64() - max).exp() / sum
}

fn check_nonempty(examples: &[&LabeledExample]) -> Result<()> {
    match examples.iter().position(|e| e.is_empty()) {
        _ if examples.is_empty() => Err(KwsError::Data("evaluation set is empty".into())),
        Some(i) => Err(KwsError::Data(format!("utterance {i} has no frames"))),
        None => Ok(()),
    }
}

/// Scores each utterance by running the streaming engine frame by frame.
pub fn score_utterances<T: Real>(params: &ModelParams<T>, examples: &[&LabeledExample]) -> Result<Vec<DetectionScore>> {
    check_nonempty(examples)?;
    let mut state = params.new_stream();
    examples
        .iter()
        .enumerate()
        .map(|(id, ex)| {
            state.reset();
            let mut best = 0.0f64;
            for t in 0..ex.len() {
                let x = ex.features.frame(t).mapv(|v| T::of(v as f64));
                let out = params.stream_step(&mut state, x.view())?;
                best = best.max(keyword_posterior(out.decoder_logits.view()));
            }
            Ok(DetectionScore {
                id,
                score: best,
                is_positive: ex.labels.positive,
                duration_s: ex.features.duration_seconds(),
            })
        })
        .collect()
}

/// Same scores from whole-sequence forward passes.
pub fn score_utterances_batch<T: Real>(
    params: &ModelParams<T>,
    examples: &[&LabeledExample],
) -> Result<Vec<DetectionScore>> {
    check_nonempty(examples)?;
    examples
        .iter()
        .enumerate()
        .map(|(id, ex)| {
            let trace = params.forward_features(&ex.features)?;
            let score = trace
                .decoder_logits
                .outer_iter()
                .map(keyword_posterior)
                .fold(0.0, f64::max);
            Ok(DetectionScore {
                id,
                score,
                is_positive: ex.labels.positive,
                duration_s: ex.features.duration_seconds(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Ascending in threshold, one point per distinct score.
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub const CSV_HEADER: &'static str = "threshold,fa_per_hour,frr";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for p in &self.points {
            writeln!(out, "{:.9},{:.6},{:.6}", p.threshold, p.fa_per_hour, p.frr).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Anchor {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub frr: f64,
    pub target_fa_per_hour: f64,
    /// No threshold meets the target; the point reported is the highest one.
    pub degenerate: bool,
}

/// ROC over all distinct scores, and the FRR at the smallest threshold whose
/// false-accept rate is at most `target_fa_per_hour`.
///
/// A score at or above the threshold is an accept. When even the highest
/// score lets negatives through, the anchor moves just above it (FRR 1); if
/// that score is already 1.0 no threshold can help and the anchor is flagged
/// degenerate.
pub fn roc_and_frr(scores: &[DetectionScore], target_fa_per_hour: f64) -> Result<(RocCurve, Anchor)> {
    if !(target_fa_per_hour >= 0.0 && target_fa_per_hour.is_finite()) {
        return Err(KwsError::Config(format!("invalid FA/h target {target_fa_per_hour}")));
    }
    if let Some(bad) = scores
        .iter()
        .find(|s| !(0.0..=1.0).contains(&s.score) || !(s.duration_s > 0.0))
    {
        return Err(KwsError::Data(format!(
            "utterance {} has score {} and duration {}",
            bad.id, bad.score, bad.duration_s
        )));
    }
    let mut pos: Vec<f64> = scores.iter().filter(|s| s.is_positive).map(|s| s.score).collect();
    let mut neg: Vec<f64> = scores.iter().filter(|s| !s.is_positive).map(|s| s.score).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(KwsError::Data("ROC needs at least one positive and one negative".into()));
    }
    let neg_hours: f64 = scores.iter().filter(|s| !s.is_positive).map(|s| s.duration_s).sum::<f64>() / 3600.0;
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    let point = |threshold: f64| {
        let false_accepts = neg.len() - neg.partition_point(|&s| s < threshold);
        let false_rejects = pos.partition_point(|&s| s < threshold);
        RocPoint {
            threshold,
            fa_per_hour: false_accepts as f64 / neg_hours,
            frr: false_rejects as f64 / pos.len() as f64,
        }
    };
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points: Vec<RocPoint> = thresholds.iter().map(|&t| point(t)).collect();

    let max = *thresholds.last().expect("scores are nonempty");
    let anchor = match points.iter().find(|p| p.fa_per_hour <= target_fa_per_hour) {
        Some(p) => (*p, false),
        None if max < 1.0 => (point(max.next_up()), false),
        None => (point(max), true),
    };
    let (p, degenerate) = anchor;
    if degenerate {
        log::warn!("no threshold reaches {target_fa_per_hour} FA/h; reporting the highest threshold");
    }
    Ok((
        RocCurve { points },
        Anchor {
            threshold: p.threshold,
            fa_per_hour: p.fa_per_hour,
            frr: p.frr,
            target_fa_per_hour,
            degenerate,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    /// Examples drawn from each of the four buckets.
    pub per_bucket: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-2,
            holdout_fraction: 0.3,
            per_bucket: 250,
            seed: 1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.per_bucket == 0 {
            return Err(KwsError::Config("probe steps, batch_size and per_bucket must be >= 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(KwsError::Config("probe holdout_fraction must lie in (0, 1)".into()));
        }
        AdamConfig::with_learning_rate(self.learning_rate).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub taps: String,
    pub accuracy: f64,
    /// The KWS parameters were held fixed while the probe trained.
    pub frozen: bool,
}

/// Per-frame feature matrices with their domain labels.
pub type ProbeData = Vec<(Array2<f32>, Domain)>;

/// Fits a max-pooled linear domain classifier on a shuffled split of `data`
/// and returns its accuracy on the held-out part.
pub fn train_probe(data: &[(Array2<f32>, Domain)], cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    let domains: BTreeSet<_> = data.iter().map(|(_, d)| format!("{d:?}")).collect();
    if domains.len() < 2 {
        return Err(KwsError::Data("probe needs examples from both domains".into()));
    }
    let dim = data[0].0.ncols();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(purpose_seed(cfg.seed, "probe"));
    order.shuffle(&mut rng);
    let n_test = ((data.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, data.len() - 1);
    let (test, train) = order.split_at(n_test);

    let limit = (6.0 / (dim + 1) as f64).sqrt() as f32;
    let mut head = AdvHeadParams::<f32> {
        weight: (0..dim).map(|_| rng.gen_range(-limit..limit)).collect(),
        bias: 0.0,
    };
    let mut opt = Adam::new(&head);
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let scale = 1.0 / cfg.batch_size as f32;
    for _ in 0..cfg.steps {
        let mut grads = head.zeros_like();
        for _ in 0..cfg.batch_size {
            let (h, domain) = &data[train[rng.gen_range(0..train.len())]];
            let back = adversarial_backward(h, &head, *domain, 0.0)?;
            grads.add_scaled(&back.head_grads, scale);
        }
        opt.step(&mut head, &grads, &adam);
    }
    if !head.is_finite() {
        return Err(KwsError::Numeric("probe weights diverged".into()));
    }
    let mut correct = 0usize;
    for &i in test {
        let (h, domain) = &data[i];
        correct += usize::from(adversarial_backward(h, &head, *domain, 0.0)?.correct(*domain));
    }
    Ok(correct as f64 / test.len() as f64)
}

/// All-tap activations of the frozen model, computed once and sliced per tap subset.
#[derive(Debug, Clone)]
pub struct TapActivations {
    config: ModelConfig,
    all: TapSet,
    examples: Vec<(Array2<f32>, Domain)>,
}

impl TapActivations {
    pub fn new(params: &ModelParams<f32>, examples: &[&LabeledExample]) -> Result<Self> {
        let all = TapSet::all(params.config());
        let examples = examples
            .iter()
            .map(|ex| {
                let trace = params.forward_features(&ex.features)?;
                Ok((collect_adv_features(&trace, &all)?, ex.labels.domain))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: params.config().clone(),
            all,
            examples,
        })
    }

    pub fn select(&self, taps: &TapSet) -> Result<ProbeData> {
        taps.validate(&self.config)?;
        let mut ranges = Vec::new();
        let mut offset = 0;
        for tap in self.all.iter() {
            let dim = self.config.tap_dim(tap)?;
            if taps.iter().any(|t| t == tap) {
                ranges.push(offset..offset + dim);
            }
            offset += dim;
        }
        Ok(self
            .examples
            .iter()
            .map(|(h, d)| {
                let blocks: Vec<_> = ranges.iter().map(|r| h.slice(ndarray::s![.., r.clone()])).collect();
                (concatenate(Axis(1), &blocks).expect("row counts agree"), *d)
            })
            .collect())
    }
}

/// Balanced probe population: the same number of examples from every bucket,
/// so neither keyword label nor any other bucket property predicts the domain.
pub fn probe_examples<'a>(corpus: &'a Corpus, cfg: &ProbeConfig) -> Result<Vec<&'a LabeledExample>> {
    let examples = corpus.balanced(cfg.per_bucket);
    if examples.is_empty() {
        return Err(KwsError::Data(
            "probe needs examples in all four buckets of a two-domain corpus".into(),
        ));
    }
    Ok(examples)
}

/// Trains a fresh domain probe on frozen tap activations.
pub fn probe_accuracy(
    params: &ModelParams<f32>,
    taps: &TapSet,
    corpus: &Corpus,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let acts = TapActivations::new(params, &probe_examples(corpus, cfg)?)?;
    probe_on(&acts, taps, cfg)
}

fn probe_on(acts: &TapActivations, taps: &TapSet, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let accuracy = train_probe(&acts.select(taps)?, cfg)?;
    Ok(ProbeReport {
        taps: taps.to_string(),
        accuracy,
        frozen: true,
    })
}

/// The twelve tap combinations of the feature-selection study, best first.
pub fn table2_rows() -> Vec<TapSet> {
    use Tap as T;
    let e = T::encoder;
    let d = T::decoder;
    let rows: Vec<Vec<Tap>> = vec![
        vec![e(0), e(1), e(2), e(3), d(0), d(1), d(2)],
        vec![e(0), e(1), e(2), e(3)],
        vec![e(0), e(1), e(2)],
        vec![e(0), e(1)],
        vec![e(2)],
        vec![e(3)],
        vec![e(1)],
        vec![d(0), d(1), d(2)],
        vec![d(0)],
        vec![e(0)],
        vec![d(1)],
        vec![d(2)],
    ];
    rows.into_iter()
        .map(|r| TapSet::new(r).expect("rows are nonempty"))
        .collect()
}

/// Probes every subset (duplicates dropped) and returns reports sorted by
/// accuracy, highest first; ties keep input order.
pub fn table2_sweep(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    subsets: &[TapSet],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    if subsets.is_empty() {
        return Err(KwsError::Config("no tap subsets to probe".into()));
    }
    let mut unique: Vec<&TapSet> = Vec::new();
    for s in subsets {
        if unique.contains(&s) {
            log::warn!("duplicate tap subset {s} ignored");
        } else {
            s.validate(params.config())?;
            unique.push(s);
        }
    }
    let acts = TapActivations::new(params, &probe_examples(corpus, cfg)?)?;
    let mut reports = unique
        .into_iter()
        .map(|s| probe_on(&acts, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy));
    Ok(reports)
}

pub fn probe_csv(reports: &[ProbeReport]) -> String {
    let mut out = String::from("taps,accuracy\n");
    for r in reports {
        writeln!(out, "{},{:.4}", r.taps, r.accuracy).unwrap();
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| KwsError::io(path, e))
}

/// Negative audio duration in hours, at the stacked frame rate.
pub fn frames_to_hours(frames: usize) -> f64 {
    frames as f64 * STACKED_FRAME_SECONDS / 3600.0
}
