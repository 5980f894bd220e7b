//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use advkws::config::ExperimentConfig;
use advkws::datagen::{generate_corpus, BucketCounts, Corpus, CorpusSpec, LabeledExample};
use advkws::eval::{
    probe_accuracy, roc_and_frr, score_utterances_batch, table2_sweep, DetectionScore, ProbeConfig,
    DEFAULT_TARGET_FA_PER_HOUR,
};
use advkws::frontend::FEATURE_DIM;
use advkws::model::{split_adv_gradient, ModelConfig, ModelParams, SvdfLayerSpec, SvdfParams, Tap, TapSet};
use advkws::rng::stream_rng;
use advkws::sweep::median;
use advkws::training::{
    adversarial_backward, batch_gradients, gradient_check, standard_objectives, train_model, AdvHeadParams,
    AdamConfig, GradCheckOptions, LossConfig, ParamInit, TrainOptions,
};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let config = ModelConfig::toy(4);
    let params = config.param_count();
    let mut worst = 0.0f64;
    let mut all_passed = true;
    for objective in standard_objectives() {
        for (seed, init) in [(1, ParamInit::Random), (2, ParamInit::Zero)] {
            let report = gradient_check(&config, seed, objective, init, &GradCheckOptions::default()).unwrap();
            worst = worst.max(report.max_rel_error());
            all_passed &= report.passed();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        all_passed && worst < 1e-4 && params <= 5000 && secs < 120.0,
        format!("{params} params, max rel err {worst:.2e}, {secs:.1} s"),
    )
}

fn reversal_contract() -> Verdict {
    let config = ModelConfig::toy(4);
    let spec = CorpusSpec {
        counts: BucketCounts::uniform(3),
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let batch: Vec<&LabeledExample> = corpus.iter().map(|(_, e)| e).collect();
    let params = ModelParams::<f64>::init(&config, 4).unwrap();
    let taps = TapSet::all(&config);
    let head = AdvHeadParams::<f64>::init(&config, &taps, 9).unwrap();

    let mut taps_zero = true;
    let mut taps_linear = true;
    for ex in &batch {
        let trace = params.forward_features(&ex.features).unwrap();
        let h = advkws::model::collect_adv_features(&trace, &taps).unwrap();
        let zero = adversarial_backward(&h, &head, ex.labels.domain, 0.0).unwrap();
        taps_zero &= split_adv_gradient(&config, &taps, &zero.feature_grads)
            .unwrap()
            .iter()
            .all(|(_, g)| g.iter().all(|&v| v == 0.0));
        let one = adversarial_backward(&h, &head, ex.labels.domain, 1.0).unwrap();
        for lambda in [0.3, 0.35, 0.4, 1.7] {
            let scaled = adversarial_backward(&h, &head, ex.labels.domain, lambda).unwrap();
            taps_linear &= scaled
                .feature_grads
                .iter()
                .zip(one.feature_grads.iter())
                .all(|(a, b)| *a == lambda * b);
        }
    }

    let adv_only = |lambda: f64| {
        let cfg = LossConfig {
            beta: 1.0,
            lambda,
            ..LossConfig::default()
        };
        batch_gradients(&params, &head, &taps, &batch, &cfg).unwrap().0.model
    };
    let weights_zero = adv_only(0.0).tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0));
    let g1 = adv_only(1.0);
    let g035 = adv_only(0.35);
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for ((_, a), (_, b)) in g035.tensors().iter().zip(g1.tensors().iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            diff = diff.max((x - 0.35 * y).abs());
            scale = scale.max((0.35 * y).abs());
        }
    }
    let rel = diff / scale;
    verdict(
        taps_zero && weights_zero && taps_linear && rel < 1e-12,
        format!(
            "zero at lambda 0: taps {taps_zero}, weights {weights_zero}; exact tap linearity {taps_linear}; weight linearity rel err {rel:.1e}"
        ),
    )
}

fn streaming_equivalence() -> Verdict {
    let config = ModelConfig::toy(4);
    let mut params = ModelParams::<f32>::init(&config, 11).unwrap();
    let mut rng = stream_rng(3, 0);
    for layer in params.encoder.iter_mut().chain(&mut params.decoder) {
        layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
    }
    let mut state = params.new_stream();
    let mut worst = 0.0f32;
    for seq in 0..100u64 {
        let mut rng = stream_rng(29, seq);
        let len = rng.gen_range(1..=100);
        let x = Array2::from_shape_fn((len, FEATURE_DIM), |_| rng.sample::<f32, _>(StandardNormal));
        let trace = params.forward_sequence(x.clone()).unwrap();
        state.reset();
        for t in 0..len {
            let out = params.stream_step(&mut state, x.row(t)).unwrap();
            for (a, b) in out
                .encoder_logits
                .iter()
                .zip(trace.encoder_logits.row(t))
                .chain(out.decoder_logits.iter().zip(trace.decoder_logits.row(t)))
            {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(worst <= 1e-5, format!("100 sequences, max logit diff {worst:.2e}"))
}

fn conv_oracle(p: &SvdfParams<f64>, x: &Array2<f64>) -> Array2<f64> {
    let (len, dim) = x.dim();
    let (nodes, memory) = p.time.dim();
    Array2::from_shape_fn((len, nodes), |(t, n)| {
        let mut acc = p.bias[n];
        for k in 0..memory.min(t + 1) {
            for d in 0..dim {
                acc += p.time[[n, k]] * p.feature[[n, d]] * x[[t - k, d]];
            }
        }
        acc.max(0.0)
    })
}

fn svdf_oracle() -> Verdict {
    let mut worst = 0.0f64;
    for instance in 0..50u64 {
        let mut rng = stream_rng(77, instance);
        let layer = SvdfLayerSpec::new(rng.gen_range(1..6), rng.gen_range(1..8));
        let config = ModelConfig {
            input_dim: rng.gen_range(1..8),
            encoder_layers: vec![layer],
            decoder_layers: vec![SvdfLayerSpec::new(2, 2)],
            encoder_classes: 2,
            decoder_classes: 2,
        };
        let mut params = ModelParams::<f64>::init(&config, instance).unwrap();
        params.encoder[0].bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let x = Array2::from_shape_fn((rng.gen_range(1..20), config.input_dim), |_| rng.gen_range(-2.0..2.0));
        let trace = params.forward_sequence(x.clone()).unwrap();
        let expected = conv_oracle(&params.encoder[0], &x);
        let got = trace.tap(Tap::encoder(0)).unwrap();
        worst = (&got - &expected).iter().fold(worst, |m, v| m.max(v.abs()));
    }
    verdict(worst < 1e-6, format!("50 instances, max abs diff {worst:.2e}"))
}

/// Tries every candidate threshold and keeps the lowest one meeting the target.
fn grid_anchor(scores: &[DetectionScore], target: f64) -> (f64, f64, f64, bool) {
    let neg_hours: f64 = scores.iter().filter(|s| !s.is_positive).map(|s| s.duration_s).sum::<f64>() / 3600.0;
    let n_pos = scores.iter().filter(|s| s.is_positive).count() as f64;
    let eval = |t: f64| {
        let fa = scores.iter().filter(|s| !s.is_positive && s.score >= t).count() as f64 / neg_hours;
        let frr = scores.iter().filter(|s| s.is_positive && s.score < t).count() as f64 / n_pos;
        (fa, frr)
    };
    let mut candidates: Vec<f64> = scores.iter().map(|s| s.score).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let max = *candidates.last().unwrap();
    for &t in &candidates {
        let (fa, frr) = eval(t);
        if fa <= target {
            return (t, fa, frr, false);
        }
    }
    if max < 1.0 {
        let (fa, frr) = eval(max.next_up());
        return (max.next_up(), fa, frr, false);
    }
    let (fa, frr) = eval(max);
    (max, fa, frr, true)
}

fn anchoring() -> Verdict {
    let mut sets: Vec<(String, Vec<DetectionScore>)> = Vec::new();
    let make = |pairs: Vec<(f64, bool, f64)>| -> Vec<DetectionScore> {
        pairs
            .into_iter()
            .enumerate()
            .map(|(id, (score, is_positive, duration_s))| DetectionScore {
                id,
                score,
                is_positive,
                duration_s,
            })
            .collect()
    };
    sets.push((
        "ties".into(),
        make(vec![(0.5, true, 1.0), (0.5, false, 1.0), (0.5, true, 2.0), (0.7, false, 3.0), (0.2, true, 1.0)]),
    ));
    sets.push(("all equal".into(), make(vec![(0.3, true, 5.0), (0.3, false, 5.0)])));
    sets.push(("degenerate".into(), make(vec![(1.0, false, 1.0), (1.0, true, 1.0), (0.9, true, 1.0)])));
    sets.push(("separated".into(), make(vec![(0.9, true, 1.0), (0.95, true, 1.0), (0.1, false, 7200.0)])));
    for (i, size) in [10usize, 100, 1000, 10_000].into_iter().enumerate() {
        let mut rng = stream_rng(123, i as u64);
        let pairs = (0..size)
            .map(|k| {
                let positive = k % 3 == 0 || k == 1;
                let raw: f64 = rng.gen_range(0.0..1.0);
                let score = if rng.gen_bool(0.2) { (raw * 20.0).round() / 20.0 } else { raw };
                (score, positive, rng.gen_range(0.5..4.0))
            })
            .collect();
        sets.push((format!("random {size}"), make(pairs)));
    }
    let mut mismatches = Vec::new();
    for (name, scores) in &sets {
        for target in [0.0, DEFAULT_TARGET_FA_PER_HOUR, 1.0, 50.0, 1e4] {
            let (_, anchor) = roc_and_frr(scores, target).unwrap();
            let (t, fa, frr, degenerate) = grid_anchor(scores, target);
            let same = anchor.threshold == t
                && (anchor.fa_per_hour - fa).abs() <= 1e-9 * fa.max(1.0)
                && anchor.frr == frr
                && anchor.degenerate == degenerate;
            if !same {
                mismatches.push(format!("{name}@{target}"));
            }
        }
    }
    let default_ok =
        DEFAULT_TARGET_FA_PER_HOUR == 0.133 && ExperimentConfig::default().eval.target_fa_per_hour == 0.133;
    verdict(
        mismatches.is_empty() && default_ok,
        format!(
            "{} score sets x 5 targets, mismatches {:?}, default anchor {} FA/h",
            sets.len(),
            mismatches,
            DEFAULT_TARGET_FA_PER_HOUR
        ),
    )
}

struct Experiment {
    cfg: ExperimentConfig,
    model: ModelConfig,
    corpus: Corpus,
    eval: Corpus,
    probe: Corpus,
}

struct Run {
    params: ModelParams<f32>,
    frr: f64,
    probe: f64,
}

impl Experiment {
    fn new(corpus_spec: CorpusSpec) -> Self {
        let cfg = ExperimentConfig {
            corpus: corpus_spec,
            ..ExperimentConfig::default()
        };
        Self {
            model: cfg.model_config().unwrap(),
            corpus: generate_corpus(&cfg.corpus).unwrap(),
            eval: generate_corpus(&cfg.eval_corpus_spec()).unwrap(),
            probe: generate_corpus(&cfg.probe_corpus_spec()).unwrap(),
            cfg,
        }
    }

    fn probe_config(&self) -> ProbeConfig {
        self.cfg.probe.probe_config()
    }

    fn run(&self, lambda: Option<f64>, weight: f64, seed: u64) -> Run {
        let loss = match lambda {
            None => LossConfig::baseline(),
            Some(lambda) => LossConfig {
                lambda,
                ..self.cfg.loss
            },
        };
        let opts = TrainOptions {
            seed,
            real_positive_weight: weight,
            ..self.cfg.train.clone()
        };
        let (trainer, _) = train_model(&self.model, &self.corpus, &loss, &self.cfg.optimizer, &opts).unwrap();
        let scores = score_utterances_batch(trainer.params(), &self.eval.real_examples()).unwrap();
        let (_, anchor) = roc_and_frr(&scores, self.cfg.eval.target_fa_per_hour).unwrap();
        let probe = probe_accuracy(trainer.params(), &TapSet::all(&self.model), &self.probe, &self.probe_config())
            .unwrap()
            .accuracy;
        Run {
            params: trainer.params().clone(),
            frr: anchor.frr,
            probe,
        }
    }
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Baseline and adversarial runs per (weight, seed), shared by the probe and
/// FRR criteria.
struct Grid {
    /// Indexed `[weight][variant][seed]`, variants baseline, 0.3, 0.4.
    runs: Vec<Vec<Vec<Run>>>,
    weights: [f64; 2],
    secs_probe_runs: f64,
}

fn run_grid(exp: &Experiment) -> Grid {
    let weights = [0.0, 1.0];
    let mut runs = Vec::new();
    let mut secs_probe_runs = 0.0;
    for w in weights {
        let mut by_variant = Vec::new();
        for lambda in [None, Some(0.3), Some(0.4)] {
            let start = Instant::now();
            by_variant.push(SEEDS.iter().map(|&s| exp.run(lambda, w, s)).collect::<Vec<_>>());
            if w == 0.0 && lambda != Some(0.3) {
                secs_probe_runs += start.elapsed().as_secs_f64();
            }
        }
        runs.push(by_variant);
    }
    Grid {
        runs,
        weights,
        secs_probe_runs,
    }
}

fn probe_signal(exp: &Experiment, grid: &Grid) -> Verdict {
    let baseline = &grid.runs[0][0][0].params;
    let reports = table2_sweep(baseline, &exp.probe, &advkws::eval::table2_rows(), &exp.probe_config()).unwrap();
    let all = reports.iter().find(|r| r.taps.split('+').count() == 7).unwrap().accuracy;
    let best_single = reports
        .iter()
        .filter(|r| !r.taps.contains('+'))
        .map(|r| r.accuracy)
        .fold(0.0, f64::max);

    let blind = Experiment::new(CorpusSpec {
        artifact_amplitude: 0.0,
        ..exp.cfg.corpus.clone()
    });
    let blind_probe = blind.run(None, 0.0, 1).probe;
    verdict(
        all >= 0.95 && all >= best_single - 0.02 && blind_probe <= 0.55,
        format!(
            "all taps {all:.3}, best single tap {best_single:.3}, without artifact {blind_probe:.3} (gamma {}, sigma {}/{})",
            exp.cfg.corpus.artifact_amplitude, exp.cfg.corpus.noise_sigma_real, exp.cfg.corpus.noise_sigma_syn
        ),
    )
}

fn leakage_reduction(grid: &Grid) -> Verdict {
    let probes = |w: usize, v: usize| grid.runs[w][v].iter().map(|r| r.probe).collect::<Vec<_>>();
    let base = median(&probes(0, 0)).unwrap();
    let adv = median(&probes(0, 2)).unwrap();
    let base1 = median(&probes(1, 0)).unwrap();
    let adv1 = median(&probes(1, 2)).unwrap();
    verdict(
        base - adv >= 0.10 && grid.secs_probe_runs < 900.0,
        format!(
            "real-positive weight 0: probe median {base:.3} -> {adv:.3} ({:+.1} points, {:.0} s); weight 1: {base1:.3} -> {adv1:.3}",
            100.0 * (adv - base),
            grid.secs_probe_runs
        ),
    )
}

fn directional_frr(grid: &Grid) -> Verdict {
    let mut all_ok = true;
    let mut parts = Vec::new();
    for (wi, w) in grid.weights.iter().enumerate() {
        let med = |v: usize| median(&grid.runs[wi][v].iter().map(|r| r.frr).collect::<Vec<_>>()).unwrap();
        let (base, l3, l4) = (med(0), med(1), med(2));
        all_ok &= l3 <= base || l4 <= base;
        parts.push(format!("weight {w}: baseline {base:.3}, lambda 0.3 {l3:.3}, lambda 0.4 {l4:.3}"));
    }
    verdict(all_ok, format!("median FRR {}", parts.join("; ")))
}

const PIPELINE_CONFIG: &str = r#"
[corpus.counts]
real_positive = 60
real_negative = 120
synthetic_positive = 90
synthetic_negative = 75
[train]
steps = 150
[eval]
real_positive = 50
real_negative = 100
[probe]
per_bucket = 30
steps = 300
subsets = [["en_0", "en_1", "en_2", "en_3", "de_0", "de_1", "de_2"], ["en_1"]]
[sweep]
lambdas = [0.4]
real_pos_weights = [0.0, 1.0]
seeds = [1, 2]
"#;

fn pipeline_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("exp.toml"), PIPELINE_CONFIG).unwrap();
    let d = |p: &str| dir.join(p).to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen".into(), "--out".into(), d("corpus")],
        vec!["gen".into(), "--split".into(), "eval".into(), "--out".into(), d("eval_corpus")],
        vec!["train".into(), "--corpus".into(), d("corpus"), "--out".into(), d("train")],
        vec![
            "eval".into(),
            "--checkpoint".into(),
            d("train/checkpoint.svdf"),
            "--eval-corpus".into(),
            d("eval_corpus"),
            "--out".into(),
            d("eval"),
        ],
        vec!["probe".into(), "--checkpoint".into(), d("train/checkpoint.svdf"), "--out".into(), d("probe")],
        vec![
            "sweep".into(),
            "--corpus".into(),
            d("corpus"),
            "--eval-corpus".into(),
            d("eval_corpus"),
            "--out".into(),
            d("sweep"),
        ],
    ];
    for args in steps {
        let status = Command::new(env!("CARGO_BIN_EXE_advkws"))
            .arg("--config")
            .arg(d("exp.toml"))
            .args(&args)
            .env("RUST_LOG", "error")
            .status()
            .unwrap();
        assert!(status.success(), "{args:?}");
    }
    [
        "train/train_log.csv",
        "eval/roc.csv",
        "eval/summary.json",
        "probe/probe.csv",
        "sweep/sweep.csv",
        "sweep/sweep_averaged.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
    .collect()
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline_outputs(a.path());
    let second = pipeline_outputs(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|((_, x), (_, y))| x != y || x.is_empty())
        .map(|((name, _), _)| name.as_str())
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} metric files compared, differing {differing:?}", first.len()),
    )
}

fn endpoint_equivalence() -> Verdict {
    let spec = CorpusSpec {
        counts: BucketCounts::uniform(40),
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let model = ModelConfig::toy(spec.n_phonemes);
    let opts = TrainOptions {
        steps: 200,
        seed: 6,
        ..TrainOptions::default()
    };
    let adam = AdamConfig::default();
    let mut identical = true;
    for lambda in [0.0, 0.4, 1.0] {
        let (base, _) = train_model(&model, &corpus, &LossConfig::baseline(), &adam, &opts).unwrap();
        let zero_beta = LossConfig {
            beta: 0.0,
            lambda,
            ..LossConfig::default()
        };
        let (adv, _) = train_model(&model, &corpus, &zero_beta, &adam, &opts).unwrap();
        identical &= base.checkpoint().to_bytes() == adv.checkpoint().to_bytes();
    }
    verdict(identical, "200 steps, lambda in {0, 0.4, 1}, checkpoint bytes compared")
}

fn main() {
    let start = Instant::now();
    let mut verdicts: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "gradient reversal contract", reversal_contract()),
        (3, "streaming equivalence", streaming_equivalence()),
        (4, "svdf convolution oracle", svdf_oracle()),
        (5, "fa/h anchoring", anchoring()),
    ];
    let exp = Experiment::new(CorpusSpec::default());
    let grid = run_grid(&exp);
    verdicts.push((6, "probe signal", probe_signal(&exp, &grid)));
    verdicts.push((7, "adversarial leakage reduction", leakage_reduction(&grid)));
    verdicts.push((8, "directional frr", directional_frr(&grid)));
    verdicts.push((9, "determinism", determinism()));
    verdicts.push((10, "beta zero endpoint", endpoint_equivalence()));
    verdicts.sort_by_key(|v| v.0);

    let mut failed = 0;
    for (n, name, v) in &verdicts {
        println!("criterion {n:>2} {name}: {} ({})", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    println!(
        "acceptance: {}/{} passed in {:.0} s",
        verdicts.len() - failed,
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
