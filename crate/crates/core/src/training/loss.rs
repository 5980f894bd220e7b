use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::Real;

/// Class index of the keyword logit in the decoder output.
pub const KEYWORD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Real,
    Synthetic,
}

impl Domain {
    /// Target of the synthetic/real head: 1 for synthetic.
    pub fn target(self) -> f64 {
        match self {
            Domain::Real => 0.0,
            Domain::Synthetic => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    /// Encoder target per stacked frame; the highest class id is non-speech.
    pub classes: Vec<usize>,
    pub positive: bool,
    /// First frame of the keyword span (positives only).
    pub keyword_start: Option<usize>,
    /// Final keyword frame (positives only).
    pub omega_end: Option<usize>,
    pub domain: Domain,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.classes.len() != frames {
            return Err(KwsError::Shape(format!(
                "{} labels for {frames} frames",
                self.classes.len()
            )));
        }
        match (self.positive, self.omega_end, self.keyword_start) {
            (true, Some(end), start) if end < frames && start.is_none_or(|s| s <= end) => Ok(()),
            (false, None, None) => Ok(()),
            _ => Err(KwsError::Data(format!(
                "inconsistent keyword labels: positive={} start={:?} end={:?} frames={frames}",
                self.positive, self.keyword_start, self.omega_end
            ))),
        }
    }

    /// Decoder target at frame `t`: keyword inside the span ending at `omega_end`.
    pub fn decoder_target(&self, t: usize) -> usize {
        match (self.positive, self.omega_end) {
            (true, Some(end)) => {
                let start = self.keyword_start.unwrap_or(end);
                usize::from(t >= start && t <= end)
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the max-pool term against per-frame cross-entropy.
    pub alpha: f64,
    /// Weight of the adversarial term against the supervised loss.
    pub beta: f64,
    /// Gradient reversal scale.
    pub lambda: f64,
    /// Frames ending at `omega_end` over which positives are max-pooled.
    pub maxpool_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.3,
            lambda: 0.4,
            maxpool_window: 8,
        }
    }
}

impl LossConfig {
    pub fn baseline() -> Self {
        Self {
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(KwsError::Config(format!(
                "alpha ({}) and beta ({}) must lie in [0, 1]",
                self.alpha, self.beta
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(KwsError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.maxpool_window == 0 {
            return Err(KwsError::Config("maxpool_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss gradients w.r.t. the per-frame encoder and decoder logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrads<T> {
    pub encoder: Array2<T>,
    pub decoder: Array2<T>,
}

impl<T: Real> LogitGrads<T> {
    fn zeros(encoder: (usize, usize), decoder: (usize, usize)) -> Self {
        Self {
            encoder: Array2::zeros(encoder),
            decoder: Array2::zeros(decoder),
        }
    }

    pub fn scaled(mut self, factor: T) -> Self {
        self.encoder.mapv_inplace(|v| v * factor);
        self.decoder.mapv_inplace(|v| v * factor);
        self
    }
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy<T: Real>(logits: ArrayView1<T>, target: usize) -> (T, Vec<T>) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() + max - logits[target];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / sum - if i == target { T::one() } else { T::zero() })
        .collect();
    (loss, grad)
}

fn check_lengths<T>(encoder: &Array2<T>, decoder: &Array2<T>, labels: &FrameLabels) -> Result<usize> {
    if encoder.nrows() != decoder.nrows() {
        return Err(KwsError::Shape("encoder and decoder logits differ in length".into()));
    }
    labels.validate(decoder.nrows())?;
    if decoder.ncols() != 2 {
        return Err(KwsError::Shape(format!("decoder has {} classes, expected 2", decoder.ncols())));
    }
    if let Some(&bad) = labels.classes.iter().find(|&&c| c >= encoder.ncols()) {
        return Err(KwsError::Data(format!(
            "encoder class {bad} out of range for {} classes",
            encoder.ncols()
        )));
    }
    Ok(decoder.nrows())
}

/// Mean per-frame cross-entropy of the encoder against `c_t` plus the mean
/// per-frame cross-entropy of the decoder against the keyword-span indicator.
pub fn frame_ce_loss<T: Real>(
    encoder: &Array2<T>,
    decoder: &Array2<T>,
    labels: &FrameLabels,
) -> Result<(T, LogitGrads<T>)> {
    let len = check_lengths(encoder, decoder, labels)?;
    if len == 0 {
        return Err(KwsError::Data("empty sequence".into()));
    }
    let inv = T::one() / T::of(len as f64);
    let mut grads = LogitGrads::zeros(encoder.dim(), decoder.dim());
    let mut total = T::zero();
    for t in 0..len {
        let (l, g) = softmax_cross_entropy(encoder.row(t), labels.classes[t]);
        total += l * inv;
        grads.encoder.row_mut(t).iter_mut().zip(g).for_each(|(d, g)| *d = g * inv);
        let (l, g) = softmax_cross_entropy(decoder.row(t), labels.decoder_target(t));
        total += l * inv;
        grads.decoder.row_mut(t).iter_mut().zip(g).for_each(|(d, g)| *d = g * inv);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxpoolLoss<T> {
    pub loss: T,
    pub grads: LogitGrads<T>,
    /// Frame the loss was routed to.
    pub frame: usize,
}

/// Cross-entropy at the frame with the highest keyword log-odds.
///
/// Positives pool over `[omega_end - window + 1, omega_end]` (clamped at 0),
/// negatives over the whole sequence. Ties go to the earliest frame.
pub fn maxpool_loss<T: Real>(
    encoder: &Array2<T>,
    decoder: &Array2<T>,
    labels: &FrameLabels,
    window: usize,
) -> Result<MaxpoolLoss<T>> {
    let len = check_lengths(encoder, decoder, labels)?;
    if len == 0 {
        return Err(KwsError::Data("empty sequence".into()));
    }
    if window == 0 {
        return Err(KwsError::Config("maxpool window must be >= 1".into()));
    }
    let (range, target) = match labels.omega_end {
        Some(end) if labels.positive => ((end + 1).saturating_sub(window)..end + 1, KEYWORD),
        _ => (0..len, 0),
    };
    let log_odds = |t: usize| decoder[[t, KEYWORD]] - decoder[[t, 1 - KEYWORD]];
    let mut frame = range.start;
    for t in range {
        if log_odds(t) > log_odds(frame) {
            frame = t;
        }
    }
    let (loss, g) = softmax_cross_entropy(decoder.row(frame), target);
    let mut grads = LogitGrads::zeros(encoder.dim(), decoder.dim());
    grads.decoder.row_mut(frame).iter_mut().zip(g).for_each(|(d, g)| *d = g);
    Ok(MaxpoolLoss { loss, grads, frame })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedLoss<T> {
    pub total: T,
    pub frame_ce: T,
    pub maxpool: T,
    pub maxpool_frame: usize,
    pub grads: LogitGrads<T>,
}

/// `(1 - alpha) * frame CE + alpha * max-pool loss`.
pub fn supervised_loss<T: Real>(
    encoder: &Array2<T>,
    decoder: &Array2<T>,
    labels: &FrameLabels,
    cfg: &LossConfig,
) -> Result<SupervisedLoss<T>> {
    let (ce, ce_grads) = frame_ce_loss(encoder, decoder, labels)?;
    let mp = maxpool_loss(encoder, decoder, labels, cfg.maxpool_window)?;
    let alpha = T::of(cfg.alpha);
    let keep = T::one() - alpha;
    let grads = LogitGrads {
        encoder: ce_grads.encoder * keep + mp.grads.encoder * alpha,
        decoder: ce_grads.decoder * keep + mp.grads.decoder * alpha,
    };
    Ok(SupervisedLoss {
        total: keep * ce + alpha * mp.loss,
        frame_ce: ce,
        maxpool: mp.loss,
        maxpool_frame: mp.frame,
        grads,
    })
}
