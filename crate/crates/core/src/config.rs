//! Experiment configuration file.
//!
//! TOML with one table per stage. Every key is optional; omitted keys take
//! the defaults shown below.
//!
//! ```toml
//! [corpus]
//! seed = 1
//! prototype_seed = 7
//! artifact_vector_seed = 11
//! n_phonemes = 4
//! keyword = [0, 1, 2, 3]
//! frames_per_phoneme = [5, 10]
//! background_frames = [6, 16]
//! noise_sigma_real = 2.0
//! noise_sigma_syn = 2.0
//! artifact_amplitude = 0.45
//! negative_phonemes = [2, 6]
//! distractor_fraction = 0.5
//! [corpus.counts]
//! real_positive = 2000
//! real_negative = 4000
//! synthetic_positive = 3000
//! synthetic_negative = 2500
//!
//! [model]
//! preset = "toy"            # "toy", "paper-scale" or "custom"
//! # custom only:
//! # encoder_layers = [{ nodes = 32, memory = 4, bottleneck = 16 }, { nodes = 32, memory = 4 }]
//! # decoder_layers = [{ nodes = 8, memory = 4 }]
//!
//! [loss]
//! alpha = 0.3
//! beta = 0.3                # 0 trains the baseline
//! lambda = 0.4
//! maxpool_window = 8
//!
//! [optimizer]
//! learning_rate = 1e-3
//! beta1 = 0.9
//! beta2 = 0.999
//! epsilon = 1e-8
//!
//! [train]
//! seed = 1
//! steps = 3000
//! batch_size = 32
//! real_positive_weight = 1.0
//! augment_noise = 0.0
//! log_every = 10
//! # taps = ["en_0", "de_2"]            # default: all taps
//! # head_learning_rate = 1e-3          # default: optimizer rate
//!
//! [eval]
//! target_fa_per_hour = 0.133
//! seed = 1001
//! real_positive = 2000
//! real_negative = 60000
//!
//! [probe]
//! steps = 2000
//! batch_size = 32
//! learning_rate = 1e-2
//! holdout_fraction = 0.3
//! per_bucket = 250
//! seed = 1
//! corpus_seed = 2002
//! # subsets = [["en_0", "en_1"], ["de_0"]] # default: the twelve standard rows
//!
//! [sweep]
//! lambdas = [0.30, 0.35, 0.40, 0.50]
//! real_pos_weights = [0.0, 0.01, 0.05, 0.20, 1.00]
//! seeds = [1, 2, 3, 4, 5]
//! probe = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{BucketCounts, CorpusSpec};
use crate::error::{KwsError, Result};
use crate::eval::{table2_rows, ProbeConfig, DEFAULT_TARGET_FA_PER_HOUR};
use crate::frontend::FEATURE_DIM;
use crate::model::{ModelConfig, SvdfLayerSpec, TapSet};
use crate::sweep::SweepConfig;
use crate::training::{AdamConfig, LossConfig, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    #[default]
    Toy,
    PaperScale,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ModelPreset,
    pub encoder_layers: Option<Vec<SvdfLayerSpec>>,
    pub decoder_layers: Option<Vec<SvdfLayerSpec>>,
}

impl ModelSection {
    /// Network for a corpus with `n_phonemes` phoneme classes.
    pub fn build(&self, n_phonemes: usize) -> Result<ModelConfig> {
        let layers_given = self.encoder_layers.is_some() || self.decoder_layers.is_some();
        let config = match self.preset {
            ModelPreset::Toy | ModelPreset::PaperScale if layers_given => {
                return Err(KwsError::Config(
                    "model layers can only be listed with preset = \"custom\"".into(),
                ))
            }
            ModelPreset::Toy => ModelConfig::toy(n_phonemes),
            ModelPreset::PaperScale => ModelConfig {
                encoder_classes: n_phonemes + 1,
                ..ModelConfig::paper_scale()
            },
            ModelPreset::Custom => {
                let (Some(enc), Some(dec)) = (&self.encoder_layers, &self.decoder_layers) else {
                    return Err(KwsError::Config(
                        "custom model needs both encoder_layers and decoder_layers".into(),
                    ));
                };
                ModelConfig {
                    input_dim: FEATURE_DIM,
                    encoder_layers: enc.clone(),
                    decoder_layers: dec.clone(),
                    encoder_classes: n_phonemes + 1,
                    decoder_classes: 2,
                }
            }
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub target_fa_per_hour: f64,
    /// Sampling seed of the evaluation corpus; prototypes and artifact are
    /// shared with the training corpus.
    pub seed: u64,
    pub real_positive: usize,
    pub real_negative: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            target_fa_per_hour: DEFAULT_TARGET_FA_PER_HOUR,
            seed: 1001,
            real_positive: 2000,
            real_negative: 60000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub per_bucket: usize,
    pub seed: u64,
    /// Sampling seed of the balanced probe corpus.
    pub corpus_seed: u64,
    pub subsets: Option<Vec<Vec<String>>>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        Self {
            steps: probe.steps,
            batch_size: probe.batch_size,
            learning_rate: probe.learning_rate,
            holdout_fraction: probe.holdout_fraction,
            per_bucket: probe.per_bucket,
            seed: probe.seed,
            corpus_seed: 2002,
            subsets: None,
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            holdout_fraction: self.holdout_fraction,
            per_bucket: self.per_bucket,
            seed: self.seed,
        }
    }

    pub fn tap_subsets(&self) -> Result<Vec<TapSet>> {
        match &self.subsets {
            None => Ok(table2_rows()),
            Some(subsets) if subsets.is_empty() => Err(KwsError::Config("probe subsets list is empty".into())),
            Some(subsets) => subsets.iter().map(|names| TapSet::parse(names)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub train: TrainOptions,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelSection::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            train: TrainOptions {
                steps: 3000,
                ..TrainOptions::default()
            },
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| KwsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| KwsError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            KwsError::Config(msg) => KwsError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let model = self.model_config()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        self.train.tap_set(&model)?;
        if !(self.eval.target_fa_per_hour >= 0.0 && self.eval.target_fa_per_hour.is_finite()) {
            return Err(KwsError::Config("eval.target_fa_per_hour must be finite and >= 0".into()));
        }
        self.probe.probe_config().validate()?;
        self.probe.tap_subsets()?;
        self.sweep.validate()
    }

    /// Hex SHA-256 of every setting except the sweep grid itself.
    pub fn fingerprint(&self) -> String {
        let cfg = Self {
            sweep: SweepConfig::default(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(cfg.to_toml()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.build(self.corpus.n_phonemes)
    }

    /// Real-domain evaluation corpus drawn from the training corpus's world.
    pub fn eval_corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.eval.seed,
            counts: BucketCounts {
                real_positive: self.eval.real_positive,
                real_negative: self.eval.real_negative,
                synthetic_positive: 0,
                synthetic_negative: 0,
            },
            ..self.corpus.clone()
        }
    }

    /// Balanced four-bucket corpus for domain probes.
    pub fn probe_corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.probe.corpus_seed,
            counts: BucketCounts::uniform(self.probe.per_bucket),
            ..self.corpus.clone()
        }
    }
}
