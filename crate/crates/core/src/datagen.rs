//! Two-domain toy corpus in log-mel feature space.
//!
//! Utterances are sequences of phoneme segments between stretches of
//! background. Each phoneme has a fixed 40-dim prototype; a frame is its
//! prototype plus Gaussian noise. Synthetic-domain examples add a fixed
//! artifact vector scaled by `artifact_amplitude` to every frame and may use a
//! different noise level, so the two domains can be made as separable as an
//! experiment needs. Alignments are known exactly from construction.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KwsError, Result};
use crate::frontend::{stack_frames, FeatureSequence, SpectralFrame, FEATURE_DIM, N_MELS, STACK_STRIDE};
use crate::rng::stream_rng;
use crate::training::{Domain, FrameLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    RealPositive,
    RealNegative,
    SyntheticPositive,
    SyntheticNegative,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [
        Bucket::RealPositive,
        Bucket::RealNegative,
        Bucket::SyntheticPositive,
        Bucket::SyntheticNegative,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn domain(self) -> Domain {
        match self {
            Bucket::RealPositive | Bucket::RealNegative => Domain::Real,
            _ => Domain::Synthetic,
        }
    }

    pub fn positive(self) -> bool {
        matches!(self, Bucket::RealPositive | Bucket::SyntheticPositive)
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Bucket::RealPositive => "real_pos.bin",
            Bucket::RealNegative => "real_neg.bin",
            Bucket::SyntheticPositive => "syn_pos.bin",
            Bucket::SyntheticNegative => "syn_neg.bin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketCounts {
    pub real_positive: usize,
    pub real_negative: usize,
    pub synthetic_positive: usize,
    pub synthetic_negative: usize,
}

impl BucketCounts {
    pub fn uniform(n: usize) -> Self {
        Self {
            real_positive: n,
            real_negative: n,
            synthetic_positive: n,
            synthetic_negative: n,
        }
    }

    pub fn get(&self, bucket: Bucket) -> usize {
        match bucket {
            Bucket::RealPositive => self.real_positive,
            Bucket::RealNegative => self.real_negative,
            Bucket::SyntheticPositive => self.synthetic_positive,
            Bucket::SyntheticNegative => self.synthetic_negative,
        }
    }
}

impl Default for BucketCounts {
    /// Synthetic positives most plentiful, real positives scarcest.
    fn default() -> Self {
        Self {
            real_positive: 2000,
            real_negative: 4000,
            synthetic_positive: 3000,
            synthetic_negative: 2500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Drives per-example sampling.
    pub seed: u64,
    /// Drives the phoneme and background prototypes.
    pub prototype_seed: u64,
    pub artifact_vector_seed: u64,
    pub n_phonemes: usize,
    pub keyword: Vec<usize>,
    /// Inclusive range of spectral frames per phoneme segment.
    pub frames_per_phoneme: [usize; 2],
    /// Inclusive range of leading and trailing background frames.
    pub background_frames: [usize; 2],
    pub noise_sigma_real: f64,
    pub noise_sigma_syn: f64,
    pub artifact_amplitude: f64,
    pub counts: BucketCounts,
    /// Inclusive range of phoneme count for random-walk negatives.
    pub negative_phonemes: [usize; 2],
    /// Fraction of negatives built as near-misses of the keyword.
    pub distractor_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            prototype_seed: 7,
            artifact_vector_seed: 11,
            n_phonemes: 4,
            keyword: vec![0, 1, 2, 3],
            frames_per_phoneme: [5, 10],
            background_frames: [6, 16],
            noise_sigma_real: 2.0,
            noise_sigma_syn: 2.0,
            artifact_amplitude: 0.45,
            counts: BucketCounts::default(),
            negative_phonemes: [2, 6],
            distractor_fraction: 0.5,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(KwsError::Config(m));
        if self.n_phonemes == 0 {
            return err("n_phonemes must be >= 1".into());
        }
        if self.keyword.is_empty() || self.keyword.iter().any(|&p| p >= self.n_phonemes) {
            return err(format!(
                "keyword {:?} must be nonempty and use phoneme ids < {}",
                self.keyword, self.n_phonemes
            ));
        }
        if self.keyword.windows(2).any(|w| w[0] == w[1]) {
            return err("keyword must not repeat a phoneme back to back".into());
        }
        let range_ok = |r: [usize; 2], min: usize| r[0] >= min && r[0] <= r[1];
        if !range_ok(self.frames_per_phoneme, STACK_STRIDE * 2 + 1) {
            return err("frames_per_phoneme must be an ordered range starting at >= 5".into());
        }
        if !range_ok(self.background_frames, 2) {
            return err("background_frames must be an ordered range starting at >= 2".into());
        }
        if !range_ok(self.negative_phonemes, 1) {
            return err("negative_phonemes must be an ordered range starting at >= 1".into());
        }
        for (name, v) in [
            ("noise_sigma_real", self.noise_sigma_real),
            ("noise_sigma_syn", self.noise_sigma_syn),
            ("artifact_amplitude", self.artifact_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return err("distractor_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Encoder classes: phonemes plus non-speech.
    pub fn encoder_classes(&self) -> usize {
        self.n_phonemes + 1
    }

    pub fn non_speech_class(&self) -> usize {
        self.n_phonemes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: FeatureSequence,
    pub labels: FrameLabels,
}

impl LabeledExample {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.labels.domain
    }
}

/// Prototypes and artifact direction shared by every corpus drawn from one spec.
#[derive(Debug, Clone)]
struct World {
    /// `[n_phonemes + 1, N_MELS]`; last row is background.
    prototypes: Array2<f32>,
    artifact: [f32; N_MELS],
}

impl World {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
        let k = spec.n_phonemes;
        let mut prototypes = Array2::zeros((k + 1, N_MELS));
        for p in 0..k {
            for m in 0..N_MELS {
                prototypes[[p, m]] = StandardNormal.sample(&mut rng);
            }
        }
        for m in 0..N_MELS {
            let jitter: f32 = StandardNormal.sample(&mut rng);
            prototypes[[k, m]] = -1.5 + 0.3 * jitter;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.artifact_vector_seed);
        let mut artifact = [0.0f32; N_MELS];
        for a in &mut artifact {
            *a = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        Self {
            prototypes,
            artifact,
        }
    }
}

/// Whether `keyword` occurs as a contiguous run in `phonemes`.
pub fn contains_keyword(phonemes: &[usize], keyword: &[usize]) -> bool {
    phonemes.windows(keyword.len()).any(|w| w == keyword)
}

fn random_walk(rng: &mut ChaCha8Rng, n_phonemes: usize, len: usize) -> Vec<usize> {
    let mut seq: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..len {
        let next = match seq.last() {
            Some(&prev) if n_phonemes > 1 => {
                let r = rng.gen_range(0..n_phonemes - 1);
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            }
            _ => rng.gen_range(0..n_phonemes),
        };
        seq.push(next);
    }
    seq
}

fn distractor(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Vec<usize> {
    let mut seq = spec.keyword.clone();
    let n = seq.len();
    match rng.gen_range(0..4) {
        0 if n >= 2 => {
            let i = rng.gen_range(0..n - 1);
            seq.swap(i, i + 1);
        }
        1 if n >= 2 => {
            seq.pop();
        }
        2 if n >= 2 => {
            seq.remove(0);
        }
        _ => {
            let i = rng.gen_range(0..n);
            seq[i] = rng.gen_range(0..spec.n_phonemes);
        }
    }
    seq
}

fn negative_phonemes(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Vec<usize> {
    for _ in 0..1000 {
        let seq = if rng.gen_bool(spec.distractor_fraction) {
            distractor(rng, spec)
        } else {
            let len = rng.gen_range(spec.negative_phonemes[0]..=spec.negative_phonemes[1]);
            random_walk(rng, spec.n_phonemes, len)
        };
        if !contains_keyword(&seq, &spec.keyword) && seq.windows(2).all(|w| w[0] != w[1]) {
            return seq;
        }
    }
    // Degenerate specs (e.g. a single-phoneme inventory) fall back to pure background.
    Vec::new()
}

fn generate_example(spec: &CorpusSpec, world: &World, bucket: Bucket, index: usize) -> Result<LabeledExample> {
    let mut rng = stream_rng(spec.seed, ((bucket.index() as u64) << 40) | index as u64);
    let phonemes = if bucket.positive() {
        spec.keyword.clone()
    } else {
        negative_phonemes(&mut rng, spec)
    };
    let background = spec.non_speech_class();
    let bg = |rng: &mut ChaCha8Rng| rng.gen_range(spec.background_frames[0]..=spec.background_frames[1]);

    let mut frame_labels = vec![background; bg(&mut rng)];
    let keyword_frames_start = frame_labels.len();
    for &p in &phonemes {
        let n = rng.gen_range(spec.frames_per_phoneme[0]..=spec.frames_per_phoneme[1]);
        frame_labels.extend(std::iter::repeat(p).take(n));
    }
    let keyword_frames_end = frame_labels.len() - 1;
    let tail = bg(&mut rng);
    frame_labels.extend(std::iter::repeat(background).take(tail));

    let domain = bucket.domain();
    let sigma = match domain {
        Domain::Real => spec.noise_sigma_real,
        Domain::Synthetic => spec.noise_sigma_syn,
    };
    let noise = Normal::new(0.0, sigma).map_err(|e| KwsError::Config(e.to_string()))?;
    let shift = match domain {
        Domain::Real => 0.0,
        Domain::Synthetic => spec.artifact_amplitude,
    };
    let frames: Vec<SpectralFrame> = frame_labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut energies = [0.0f32; N_MELS];
            for (m, e) in energies.iter_mut().enumerate() {
                let n: f64 = noise.sample(&mut rng);
                *e = (world.prototypes[[label, m]] as f64 + n + shift * world.artifact[m] as f64) as f32;
            }
            SpectralFrame::new(energies, i)
        })
        .collect();
    let features = stack_frames(&frames)?;

    // Stacked vector j is labeled by its center spectral frame 2j + 1.
    let center = |j: usize| STACK_STRIDE * j + 1;
    let classes: Vec<usize> = (0..features.len()).map(|j| frame_labels[center(j)]).collect();
    let (keyword_start, omega_end) = if bucket.positive() {
        let span = |j: usize| (keyword_frames_start..=keyword_frames_end).contains(&center(j));
        let first = (0..features.len()).find(|&j| span(j));
        let last = (0..features.len()).rev().find(|&j| span(j));
        (first, last)
    } else {
        (None, None)
    };
    let labels = FrameLabels {
        classes,
        positive: bucket.positive(),
        keyword_start,
        omega_end,
        domain,
    };
    labels.validate(features.len())?;
    Ok(LabeledExample { features, labels })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    buckets: [Vec<LabeledExample>; 4],
}

impl Corpus {
    pub fn from_buckets(buckets: [Vec<LabeledExample>; 4]) -> Result<Self> {
        for (bucket, examples) in Bucket::ALL.iter().zip(&buckets) {
            if let Some(bad) = examples
                .iter()
                .find(|e| e.labels.positive != bucket.positive() || e.domain() != bucket.domain())
            {
                return Err(KwsError::Data(format!(
                    "{bucket:?} holds an example labeled positive={} domain={:?}",
                    bad.labels.positive,
                    bad.domain()
                )));
            }
        }
        Ok(Self { buckets })
    }

    pub fn bucket(&self, bucket: Bucket) -> &[LabeledExample] {
        &self.buckets[bucket.index()]
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Bucket, &LabeledExample)> {
        Bucket::ALL
            .iter()
            .flat_map(move |&b| self.bucket(b).iter().map(move |e| (b, e)))
    }

    /// Real-domain positives and negatives, the evaluation population.
    pub fn real_examples(&self) -> Vec<&LabeledExample> {
        self.bucket(Bucket::RealPositive)
            .iter()
            .chain(self.bucket(Bucket::RealNegative))
            .collect()
    }

    /// Equal number of examples from every bucket, so neither keyword class
    /// nor anything else predicts the domain.
    pub fn balanced(&self, max_per_bucket: usize) -> Vec<&LabeledExample> {
        let n = Bucket::ALL
            .iter()
            .map(|&b| self.bucket(b).len())
            .min()
            .unwrap_or(0)
            .min(max_per_bucket);
        Bucket::ALL.iter().flat_map(|&b| &self.bucket(b)[..n]).collect()
    }
}

/// Generates all four buckets; deterministic in `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let world = World::new(spec);
    let mut buckets: [Vec<LabeledExample>; 4] = Default::default();
    for bucket in Bucket::ALL {
        buckets[bucket.index()] = (0..spec.counts.get(bucket))
            .map(|i| generate_example(spec, &world, bucket, i))
            .collect::<Result<_>>()?;
    }
    Corpus::from_buckets(buckets)
}

/// Unnormalized bucket sampling rates, indexed like [`Bucket::ALL`].
/// `rates[0]` is the real-positive rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureWeights {
    pub rates: [f64; 4],
}

impl MixtureWeights {
    pub fn new(rates: [f64; 4]) -> Result<Self> {
        if rates.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(KwsError::Config(format!("mixture rates must be finite and >= 0: {rates:?}")));
        }
        if rates.iter().all(|&r| r == 0.0) {
            return Err(KwsError::Config("at least one mixture rate must be positive".into()));
        }
        Ok(Self { rates })
    }

    /// Samples each example of the corpus equally often, except that real
    /// positives are kept with probability `real_positive_weight`.
    pub fn for_training(corpus: &Corpus, real_positive_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&real_positive_weight) {
            return Err(KwsError::Config(format!(
                "real positive weight must lie in [0, 1], got {real_positive_weight}"
            )));
        }
        let mut rates = Bucket::ALL.map(|b| corpus.bucket(b).len() as f64);
        rates[Bucket::RealPositive.index()] *= real_positive_weight;
        Self::new(rates)
    }

    pub fn probabilities(&self) -> [f64; 4] {
        let total: f64 = self.rates.iter().sum();
        self.rates.map(|r| r / total)
    }
}

/// Draws `batch_size` examples: bucket by normalized rate, then uniform within the bucket.
pub fn sample_batch<'a, R: Rng>(
    corpus: &'a Corpus,
    weights: &MixtureWeights,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a LabeledExample>> {
    for bucket in Bucket::ALL {
        if weights.rates[bucket.index()] > 0.0 && corpus.bucket(bucket).is_empty() {
            return Err(KwsError::Data(format!("{bucket:?} has positive weight but no examples")));
        }
    }
    let chooser = WeightedIndex::new(weights.rates).map_err(|e| KwsError::Config(e.to_string()))?;
    Ok((0..batch_size)
        .map(|_| {
            let examples = corpus.bucket(Bucket::ALL[chooser.sample(rng)]);
            &examples[rng.gen_range(0..examples.len())]
        })
        .collect())
}

/// Adds i.i.d. Gaussian noise to every feature value; labels untouched.
pub fn augment<'a, R: Rng>(example: &'a LabeledExample, noise_level: f64, rng: &mut R) -> Result<Cow<'a, LabeledExample>> {
    if noise_level == 0.0 {
        return Ok(Cow::Borrowed(example));
    }
    let noise = Normal::new(0.0, noise_level).map_err(|e| KwsError::Config(e.to_string()))?;
    let mut out = example.clone();
    out.features
        .vectors
        .mapv_inplace(|v| (v as f64 + noise.sample(rng)) as f32);
    Ok(Cow::Owned(out))
}

const CORPUS_MAGIC: &[u8; 4] = b"KWSC";
const CORPUS_VERSION: u32 = 1;
const NONE_INDEX: u32 = u32::MAX;

/// Serializes one bucket.
///
/// ```text
/// "KWSC" version:u32 count:u32
/// per example:
///     frames:u32 dim:u32 data: frames*dim f32
///     classes: frames u32   positive:u8   domain:u8 (0 real, 1 synthetic)
///     keyword_start:u32  omega_end:u32    (u32::MAX when absent)
/// ```
/// All integers and floats little-endian.
pub fn encode_bucket(examples: &[LabeledExample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    for ex in examples {
        let v = &ex.features.vectors;
        out.extend_from_slice(&(v.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(v.ncols() as u32).to_le_bytes());
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &c in &ex.labels.classes {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out.push(u8::from(ex.labels.positive));
        out.push(match ex.labels.domain {
            Domain::Real => 0,
            Domain::Synthetic => 1,
        });
        for idx in [ex.labels.keyword_start, ex.labels.omega_end] {
            out.extend_from_slice(&idx.map_or(NONE_INDEX, |i| i as u32).to_le_bytes());
        }
    }
    out
}

pub fn decode_bucket(bytes: &[u8]) -> Result<Vec<LabeledExample>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| KwsError::Data("truncated corpus file".into()))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    fn u32_at(b: &[u8]) -> u32 {
        u32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
    if take(4)? != CORPUS_MAGIC {
        return Err(KwsError::Data("bad corpus magic".into()));
    }
    let version = u32_at(take(4)?);
    if version != CORPUS_VERSION {
        return Err(KwsError::Data(format!("unsupported corpus version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut examples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let frames = u32_at(take(4)?) as usize;
        let dim = u32_at(take(4)?) as usize;
        if dim != FEATURE_DIM {
            return Err(KwsError::Data(format!("corpus frames have {dim} dims, expected {FEATURE_DIM}")));
        }
        let raw = take(frames * dim * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let vectors = Array2::from_shape_vec((frames, dim), data).map_err(|e| KwsError::Data(e.to_string()))?;
        let classes = take(frames * 4)?.chunks_exact(4).map(|c| u32_at(c) as usize).collect();
        let flags = take(2)?;
        let positive = flags[0] != 0;
        let domain = match flags[1] {
            0 => Domain::Real,
            1 => Domain::Synthetic,
            d => return Err(KwsError::Data(format!("bad domain byte {d}"))),
        };
        let opt = |v: u32| (v != NONE_INDEX).then_some(v as usize);
        let keyword_start = opt(u32_at(take(4)?));
        let omega_end = opt(u32_at(take(4)?));
        let labels = FrameLabels {
            classes,
            positive,
            keyword_start,
            omega_end,
            domain,
        };
        labels.validate(frames)?;
        examples.push(LabeledExample {
            features: FeatureSequence::new(vectors)?,
            labels,
        });
    }
    if pos != bytes.len() {
        return Err(KwsError::Data("trailing bytes in corpus file".into()));
    }
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec_hash: String,
    pub counts: BucketCounts,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the four bucket files and `manifest.json` into `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus, spec: &CorpusSpec) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
    for bucket in Bucket::ALL {
        let path = dir.join(bucket.file_name());
        fs::write(&path, encode_bucket(corpus.bucket(bucket))).map_err(|e| KwsError::io(&path, e))?;
    }
    let manifest = CorpusManifest {
        spec_hash: spec.hash(),
        counts: BucketCounts {
            real_positive: corpus.bucket(Bucket::RealPositive).len(),
            real_negative: corpus.bucket(Bucket::RealNegative).len(),
            synthetic_positive: corpus.bucket(Bucket::SyntheticPositive).len(),
            synthetic_negative: corpus.bucket(Bucket::SyntheticNegative).len(),
        },
        files: Bucket::ALL.iter().map(|b| b.file_name().to_string()).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| KwsError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Option<CorpusManifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| KwsError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| KwsError::Data(format!("{}: {e}", path.display())))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mut buckets: [Vec<LabeledExample>; 4] = Default::default();
    for bucket in Bucket::ALL {
        let path = dir.join(bucket.file_name());
        let bytes = fs::read(&path).map_err(|e| KwsError::io(&path, e))?;
        buckets[bucket.index()] = decode_bucket(&bytes).map_err(|e| KwsError::Data(format!("{}: {e}", path.display())))?;
    }
    Corpus::from_buckets(buckets)
}
