//! Grid runner over gradient-reversal scale, real-positive sampling weight
//! and seed.
//!
//! Every (weight, seed) pair gets one baseline cell (no adversarial term) and
//! one adversarial cell per λ. Finished cells are written to `cells/` under
//! the output directory, so an interrupted sweep picks up where it stopped.
//! A failing cell is recorded with its error and the sweep moves on.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, LabeledExample};
use crate::error::{KwsError, Result};
use crate::eval::{probe_accuracy, roc_and_frr, score_utterances_batch, write_text, ProbeConfig};
use crate::model::{ModelConfig, TapSet};
use crate::training::{train_model, AdamConfig, LossConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub real_pos_weights: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also retrain an all-taps domain probe on every finished model.
    pub probe: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.30, 0.35, 0.40, 0.50],
            real_pos_weights: vec![0.0, 0.01, 0.05, 0.20, 1.00],
            seeds: vec![1, 2, 3, 4, 5],
            probe: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.real_pos_weights.is_empty() || self.seeds.is_empty() {
            return Err(KwsError::Config("sweep lambdas, real_pos_weights and seeds must be nonempty".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(KwsError::Config(format!("sweep lambda {l} must be finite and >= 0")));
        }
        if let Some(w) = self.real_pos_weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(KwsError::Config(format!("sweep real_pos_weight {w} must be finite and >= 0")));
        }
        Ok(())
    }

    /// Baselines first, then adversarial cells, each ordered by weight then seed.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut keys = Vec::new();
        for lambda in std::iter::once(None).chain(self.lambdas.iter().copied().map(Some)) {
            for &real_pos_weight in &self.real_pos_weights {
                for &seed in &self.seeds {
                    keys.push(CellKey {
                        lambda,
                        real_pos_weight,
                        seed,
                    });
                }
            }
        }
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    /// `None` for the baseline.
    pub lambda: Option<f64>,
    pub real_pos_weight: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn is_baseline(&self) -> bool {
        self.lambda.is_none()
    }

    pub fn file_name(&self) -> String {
        match self.lambda {
            None => format!("base_w{}_s{}.json", self.real_pos_weight, self.seed),
            Some(l) => format!("adv_l{l}_w{}_s{}.json", self.real_pos_weight, self.seed),
        }
    }

    fn matches_baseline(&self, base: &CellKey) -> bool {
        base.is_baseline() && base.real_pos_weight == self.real_pos_weight && base.seed == self.seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    /// Identifies the experiment settings a cached cell was computed under.
    pub fingerprint: String,
    pub frr: Option<f64>,
    pub threshold: Option<f64>,
    pub fa_per_hour: Option<f64>,
    pub degenerate: bool,
    pub probe_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Everything a cell needs apart from its key.
pub struct SweepInputs<'a> {
    pub model: &'a ModelConfig,
    pub corpus: &'a Corpus,
    pub eval_examples: &'a [&'a LabeledExample],
    pub target_fa_per_hour: f64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub train: TrainOptions,
    /// Corpus and settings for the optional domain probe.
    pub probe: Option<(&'a Corpus, ProbeConfig)>,
    pub fingerprint: String,
}

impl SweepInputs<'_> {
    fn loss_for(&self, key: &CellKey) -> LossConfig {
        match key.lambda {
            None => LossConfig {
                beta: 0.0,
                ..self.loss
            },
            Some(lambda) => LossConfig { lambda, ..self.loss },
        }
    }

    pub fn run_cell(&self, key: CellKey) -> CellResult {
        let mut result = CellResult {
            key,
            fingerprint: self.fingerprint.clone(),
            frr: None,
            threshold: None,
            fa_per_hour: None,
            degenerate: false,
            probe_accuracy: None,
            error: None,
        };
        if let Err(e) = self.fill_cell(&mut result) {
            log::error!("cell {} failed: {e}", key.file_name());
            result.error = Some(e.to_string());
        }
        result
    }

    fn fill_cell(&self, result: &mut CellResult) -> Result<()> {
        let key = result.key;
        let opts = TrainOptions {
            seed: key.seed,
            real_positive_weight: key.real_pos_weight,
            ..self.train.clone()
        };
        let (trainer, _) = train_model(self.model, self.corpus, &self.loss_for(&key), &self.adam, &opts)?;
        let scores = score_utterances_batch(trainer.params(), self.eval_examples)?;
        let (_, anchor) = roc_and_frr(&scores, self.target_fa_per_hour)?;
        result.frr = Some(anchor.frr);
        result.threshold = Some(anchor.threshold);
        result.fa_per_hour = Some(anchor.fa_per_hour);
        result.degenerate = anchor.degenerate;
        if let Some((corpus, cfg)) = &self.probe {
            let report = probe_accuracy(trainer.params(), &TapSet::all(self.model), corpus, cfg)?;
            result.probe_accuracy = Some(report.accuracy);
        }
        Ok(())
    }
}

fn cached_cell(path: &Path, fingerprint: &str) -> Option<CellResult> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str::<CellResult>(&text) {
        Ok(cell) if cell.fingerprint == fingerprint && cell.error.is_none() => Some(cell),
        Ok(cell) if cell.fingerprint != fingerprint => {
            log::warn!("{} was computed with different settings; recomputing", path.display());
            None
        }
        Ok(_) => None,
        Err(e) => {
            log::warn!("ignoring unreadable cell {}: {e}", path.display());
            None
        }
    }
}

/// Runs every cell, reusing finished ones found under `out/cells`.
pub fn run_sweep(inputs: &SweepInputs<'_>, cfg: &SweepConfig, out: Option<&Path>) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let cell_dir: Option<PathBuf> = out.map(|d| d.join("cells"));
    if let Some(dir) = &cell_dir {
        std::fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
    }
    let keys = cfg.cells();
    let mut results = Vec::with_capacity(keys.len());
    for (i, key) in keys.into_iter().enumerate() {
        let path = cell_dir.as_ref().map(|d| d.join(key.file_name()));
        if let Some(cell) = path.as_deref().and_then(|p| cached_cell(p, &inputs.fingerprint)) {
            log::info!("cell {}/{}: {} cached", i + 1, cfg.cells().len(), key.file_name());
            results.push(cell);
            continue;
        }
        let cell = inputs.run_cell(key);
        log::info!(
            "cell {}/{}: {} frr {:?} probe {:?}",
            i + 1,
            cfg.cells().len(),
            key.file_name(),
            cell.frr,
            cell.probe_accuracy
        );
        if let Some(p) = &path {
            let json = serde_json::to_string_pretty(&cell).expect("cell serializes");
            write_text(p, &json)?;
        }
        results.push(cell);
    }
    Ok(results)
}

/// `(base - adv) / base`; undefined when the baseline is zero or missing.
pub fn relative_improvement(baseline: Option<f64>, adversarial: Option<f64>) -> Option<f64> {
    match (baseline, adversarial) {
        (Some(b), Some(a)) if b > 0.0 => Some((b - a) / b),
        _ => None,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "lambda,real_pos_weight,seed,baseline,frr,threshold,fa_per_hour,probe_accuracy,relative_improvement,error";

pub fn sweep_csv(results: &[CellResult]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in results {
        let improvement = match r.key.lambda {
            None => None,
            Some(_) => {
                let base = results.iter().find(|b| r.key.matches_baseline(&b.key));
                relative_improvement(base.and_then(|b| b.frr), r.frr)
            }
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.key.lambda.map(|l| l.to_string()).unwrap_or_default(),
            r.key.real_pos_weight,
            r.key.seed,
            r.key.is_baseline(),
            opt(r.frr),
            r.threshold.map(|t| format!("{t:.9}")).unwrap_or_default(),
            opt(r.fa_per_hour),
            opt(r.probe_accuracy),
            opt(improvement),
            csv_text(r.error.as_deref().unwrap_or("")),
        )
        .unwrap();
    }
    out
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub lambda: Option<f64>,
    pub real_pos_weight: f64,
    pub cells: usize,
    pub failed: usize,
    pub mean_frr: Option<f64>,
    pub median_frr: Option<f64>,
    pub mean_probe_accuracy: Option<f64>,
    pub median_probe_accuracy: Option<f64>,
    /// Against the baseline mean FRR at the same weight.
    pub relative_improvement: Option<f64>,
}

/// Seed-averaged results per (λ, weight), in sweep order.
pub fn summarize(results: &[CellResult]) -> Vec<GroupSummary> {
    let mut groups: Vec<(Option<f64>, f64)> = Vec::new();
    for r in results {
        let g = (r.key.lambda, r.key.real_pos_weight);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let mut summaries: Vec<GroupSummary> = groups
        .into_iter()
        .map(|(lambda, weight)| {
            let cells: Vec<&CellResult> = results
                .iter()
                .filter(|r| r.key.lambda == lambda && r.key.real_pos_weight == weight)
                .collect();
            let frr: Vec<f64> = cells.iter().filter_map(|c| c.frr).collect();
            let probe: Vec<f64> = cells.iter().filter_map(|c| c.probe_accuracy).collect();
            GroupSummary {
                lambda,
                real_pos_weight: weight,
                cells: cells.len(),
                failed: cells.iter().filter(|c| c.error.is_some()).count(),
                mean_frr: mean(&frr),
                median_frr: median(&frr),
                mean_probe_accuracy: mean(&probe),
                median_probe_accuracy: median(&probe),
                relative_improvement: None,
            }
        })
        .collect();
    let baselines: Vec<(f64, Option<f64>)> = summaries
        .iter()
        .filter(|s| s.lambda.is_none())
        .map(|s| (s.real_pos_weight, s.mean_frr))
        .collect();
    for s in summaries.iter_mut().filter(|s| s.lambda.is_some()) {
        let base = baselines.iter().find(|(w, _)| *w == s.real_pos_weight).and_then(|(_, f)| *f);
        s.relative_improvement = relative_improvement(base, s.mean_frr);
    }
    summaries
}

pub fn averaged_csv(results: &[CellResult]) -> String {
    let mut out = String::from(
        "lambda,real_pos_weight,baseline,cells,failed,mean_frr,median_frr,mean_probe_accuracy,median_probe_accuracy,relative_improvement\n",
    );
    for s in summarize(results) {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.lambda.map(|l| l.to_string()).unwrap_or_default(),
            s.real_pos_weight,
            s.lambda.is_none(),
            s.cells,
            s.failed,
            opt(s.mean_frr),
            opt(s.median_frr),
            opt(s.mean_probe_accuracy),
            opt(s.median_probe_accuracy),
            opt(s.relative_improvement),
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, BucketCounts, CorpusSpec};

    fn key(lambda: Option<f64>, w: f64, seed: u64) -> CellKey {
        CellKey {
            lambda,
            real_pos_weight: w,
            seed,
        }
    }

    fn done(k: CellKey, frr: f64) -> CellResult {
        CellResult {
            key: k,
            fingerprint: "f".into(),
            frr: Some(frr),
            threshold: Some(0.5),
            fa_per_hour: Some(0.0),
            degenerate: false,
            probe_accuracy: None,
            error: None,
        }
    }

    #[test]
    fn grid_layout() {
        let cfg = SweepConfig::default();
        let cells = cfg.cells();
        assert_eq!(cells.len(), 5 * 5 * (1 + 4));
        assert!(cells[..25].iter().all(CellKey::is_baseline));
        let mut names: Vec<String> = cells.iter().map(CellKey::file_name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), cells.len());
    }

    #[test]
    fn improvement_needs_positive_baseline() {
        assert_eq!(relative_improvement(Some(0.5), Some(0.4)), Some(0.5 - 0.4).map(|d| d / 0.5));
        assert_eq!(relative_improvement(Some(0.0), Some(0.1)), None);
        assert_eq!(relative_improvement(None, Some(0.1)), None);
        assert_eq!(relative_improvement(Some(0.2), None), None);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn csv_pairs_cells_with_their_baseline() {
        let results = vec![
            done(key(None, 0.0, 1), 0.5),
            done(key(None, 0.0, 2), 0.0),
            done(key(Some(0.4), 0.0, 1), 0.25),
            done(key(Some(0.4), 0.0, 2), 0.1),
            CellResult {
                error: Some("numeric failure: x, y".into()),
                frr: None,
                ..done(key(Some(0.4), 0.0, 3), 0.0)
            },
        ];
        let csv = sweep_csv(&results);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines[3], "0.4,0,1,false,0.250000,0.500000000,0.000000,,0.500000,");
        assert_eq!(lines[4], "0.4,0,2,false,0.100000,0.500000000,0.000000,,,");
        assert!(lines[5].ends_with(",\"numeric failure: x, y\""));

        let summary = summarize(&results);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[1].cells, 3);
        assert_eq!(summary[1].failed, 1);
        assert!((summary[1].mean_frr.unwrap() - 0.175).abs() < 1e-12);
        assert!((summary[1].relative_improvement.unwrap() - (0.25 - 0.175) / 0.25).abs() < 1e-12);
        assert_eq!(averaged_csv(&results).lines().count(), 3);
    }

    #[test]
    fn rejects_empty_or_negative_grids() {
        for cfg in [
            SweepConfig {
                seeds: vec![],
                ..SweepConfig::default()
            },
            SweepConfig {
                lambdas: vec![-0.1],
                ..SweepConfig::default()
            },
            SweepConfig {
                real_pos_weights: vec![f64::NAN],
                ..SweepConfig::default()
            },
        ] {
            assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn resumes_from_cached_cells() {
        let spec = CorpusSpec {
            counts: BucketCounts::uniform(6),
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let eval = corpus.real_examples();
        let model = ModelConfig::toy(spec.n_phonemes);
        let inputs = SweepInputs {
            model: &model,
            corpus: &corpus,
            eval_examples: &eval,
            target_fa_per_hour: 0.133,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            train: TrainOptions {
                steps: 3,
                batch_size: 4,
                ..TrainOptions::default()
            },
            probe: None,
            fingerprint: "abc".into(),
        };
        let cfg = SweepConfig {
            lambdas: vec![0.4],
            real_pos_weights: vec![1.0],
            seeds: vec![1],
            probe: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let first = run_sweep(&inputs, &cfg, Some(dir.path())).unwrap();
        assert_eq!(first.len(), 2);
        assert!(first.iter().all(|c| c.error.is_none() && c.frr.is_some()));

        let marker = dir.path().join("cells").join(first[1].key.file_name());
        let mut edited = first[1].clone();
        edited.frr = Some(0.123);
        std::fs::write(&marker, serde_json::to_string(&edited).unwrap()).unwrap();
        let second = run_sweep(&inputs, &cfg, Some(dir.path())).unwrap();
        assert_eq!(second[1].frr, Some(0.123));
        assert_eq!(second[0], first[0]);

        let changed = SweepInputs {
            fingerprint: "other".into(),
            ..inputs
        };
        let third = run_sweep(&changed, &cfg, Some(dir.path())).unwrap();
        assert_eq!(third[1].frr, first[1].frr);
    }

    #[test]
    fn failed_cell_is_recorded() {
        let spec = CorpusSpec {
            counts: BucketCounts {
                real_positive: 0,
                ..BucketCounts::uniform(4)
            },
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let eval = corpus.real_examples();
        let model = ModelConfig::toy(spec.n_phonemes);
        let inputs = SweepInputs {
            model: &model,
            corpus: &corpus,
            eval_examples: &eval,
            target_fa_per_hour: 0.133,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            train: TrainOptions {
                steps: 2,
                batch_size: 2,
                ..TrainOptions::default()
            },
            probe: None,
            fingerprint: String::new(),
        };
        let cfg = SweepConfig {
            lambdas: vec![0.3],
            real_pos_weights: vec![1.0],
            seeds: vec![1],
            probe: false,
        };
        let results = run_sweep(&inputs, &cfg, None).unwrap();
        assert!(results.iter().all(|c| c.error.is_some() && c.frr.is_none()));
    }
}
