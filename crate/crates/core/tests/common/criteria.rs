//! Runners for the acceptance criteria. Each returns an [`Outcome`] whose
//! detail line is printed by the acceptance target.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capstext::ablate::COLUMNS;
use capstext::config::RunConfig;
use capstext::diff::{Precision, Real, SquashKind, Tensor};
use capstext::experiment::{evaluate_auto, fit_run, resolve_for_data};
use capstext::routing::{RoutingConfig, RoutingState};
use capstext::synth::{KeywordCorpus, SynthSpec};
use capstext::text::DatasetSplits;
use capstext::train::{
    decode_checkpoint, encode_checkpoint, multi_label_report, prepare_samples, score_samples, single_label_report,
    MetricsReport, TrainHistory,
};

use super::gradients;
use super::invariants;
use super::oracle::{self, OracleSquash};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = gradients::all_checks();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    for (name, r) in &checks {
        match r {
            Ok(err) => {
                if *err > worst.0 {
                    worst = (*err, name.clone());
                }
                if *err > gradients::TOLERANCE {
                    failures.push(format!("{name}: {err:.3e}"));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} checks, max rel err {:.2e} ({}), {secs:.1}s{}",
            checks.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn oracle_squash(kind: SquashKind) -> OracleSquash {
    match kind {
        SquashKind::Ratio => OracleSquash::Ratio,
        SquashKind::Exp => OracleSquash::Exp,
        SquashKind::Tanh => OracleSquash::Tanh,
        SquashKind::None => OracleSquash::Identity,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(b.abs())
}

/// Largest scaled discrepancy between the graph router and the loop oracle
/// over `instances` random problems.
pub fn routing_oracle_discrepancy(instances: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for k in 0..instances {
        let h = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=4);
        let r = [1, 3, 5][k % 3];
        let leaky = (k / 3) % 2 == 1;
        let amend = (k / 6) % 2 == 1;
        let squash = SquashKind::ALL[(k / 12) % 4];
        let votes: Vec<f64> = (0..h * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let probs: Vec<f64> = (0..h).map(|_| rng.gen_range(0.0..=1.0)).collect();

        let cfg = RoutingConfig { iterations: r, leaky, amend, baseline: false };
        let got = RoutingState::run(
            Tensor::from_f64(&[h, n, d], &votes).unwrap(),
            Tensor::from_f64(&[h], &probs).unwrap(),
            &cfg,
            squash,
        )
        .unwrap();
        let nested: Vec<Vec<Vec<f64>>> = (0..h)
            .map(|i| (0..n).map(|j| votes[(i * n + j) * d..(i * n + j + 1) * d].to_vec()).collect())
            .collect();
        let want = oracle::route(&nested, &probs, r, leaky, amend, oracle_squash(squash));

        let mut local = 0.0f64;
        let mut track = |a: f64, b: f64| local = local.max((a - b).abs() / 1f64.max(b.abs()));
        for j in 0..n {
            track(got.probs.data()[j], want.probs[j]);
            for q in 0..d {
                track(got.parents.data()[j * d + q], want.parents[j][q]);
            }
            for i in 0..h {
                track(got.couplings.data()[i * n + j], want.couplings[i][j]);
            }
        }
        if !close(local, 0.0, 1e-9) {
            mismatches += 1;
        }
        worst = worst.max(local);
    }
    (worst, mismatches)
}

pub fn routing_oracle() -> Outcome {
    let (worst, bad) = routing_oracle_discrepancy(200, 2024);
    Outcome::new(bad == 0, format!("200 instances, max scaled diff {worst:.2e}, {bad} over 1e-9"))
}

pub fn invariants() -> Outcome {
    let start = Instant::now();
    let results = invariants::all(invariants::DEFAULT_CASES, 50);
    let failed: Vec<String> = results.iter().filter_map(|(_, r)| r.clone().err()).collect();
    Outcome::new(
        failed.is_empty(),
        format!(
            "{} suites ({} cases each, 50 shape configs), {:.1}s{}",
            results.len(),
            invariants::DEFAULT_CASES,
            start.elapsed().as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }
        ),
    )
}

/// Hand-computed fixture: returns (truth, preds, classes, expected tp/fp/fn,
/// exact match ratio, precision, recall, f1).
#[allow(clippy::type_complexity)]
pub fn metrics_fixture() -> (Vec<BTreeSet<usize>>, Vec<BTreeSet<usize>>, usize, (usize, usize, usize), [f64; 4]) {
    let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
    let truth = vec![s(&[0, 1]), s(&[1]), s(&[2]), s(&[0, 2])];
    let preds = vec![s(&[0, 1]), s(&[0]), s(&[2]), s(&[0])];
    (truth, preds, 3, (4, 1, 2), [0.5, 0.8, 4.0 / 6.0, 8.0 / 11.0])
}

fn compare_report(report: &MetricsReport, want: &oracle::OracleMetrics) -> Result<(), String> {
    match report {
        MetricsReport::Multi { exact_match_ratio, precision, recall, f1, tp, fp, fn_, .. } => {
            let counts = (*tp, *fp, *fn_) == (want.tp, want.fp, want.fn_);
            let ratios = [
                (exact_match_ratio, want.exact_match_ratio),
                (precision, want.precision),
                (recall, want.recall),
                (f1, want.f1),
            ]
            .iter()
            .all(|(a, b)| (**a - b).abs() <= 1e-12);
            if counts && ratios {
                Ok(())
            } else {
                Err(format!("{report:?} vs oracle {want:?}"))
            }
        }
        other => Err(format!("expected a multi-label report, got {other:?}")),
    }
}

pub fn random_label_sets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<BTreeSet<usize>> {
    (0..n).map(|_| (0..classes).filter(|_| rng.gen_bool(0.35)).collect()).collect()
}

pub fn metrics_oracle() -> Outcome {
    let mut problems = Vec::new();
    let (truth, preds, classes, counts, ratios) = metrics_fixture();
    let report = multi_label_report(&truth, &preds, classes, false).unwrap();
    let fixed = oracle::OracleMetrics {
        tp: counts.0,
        fp: counts.1,
        fn_: counts.2,
        exact_match_ratio: ratios[0],
        precision: ratios[1],
        recall: ratios[2],
        f1: ratios[3],
    };
    if let Err(e) = compare_report(&report, &fixed) {
        problems.push(format!("fixture: {e}"));
    }
    let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
    let (t2, p2) = (vec![s(&[0, 1]), s(&[2])], vec![s(&[0]), s(&[2])]);
    let partial = oracle::OracleMetrics {
        tp: 2,
        fp: 0,
        fn_: 1,
        exact_match_ratio: 0.5,
        precision: 1.0,
        recall: 2.0 / 3.0,
        f1: 0.8,
    };
    if let Err(e) = compare_report(&multi_label_report(&t2, &p2, 3, false).unwrap(), &partial) {
        problems.push(format!("partial-match fixture: {e}"));
    }
    let single = single_label_report(&[truth[1].clone(), truth[2].clone()], &[preds[1].clone(), preds[2].clone()]);
    match single {
        Ok(MetricsReport::Single { correct: 1, accuracy: 0.5, .. }) => {}
        other => problems.push(format!("single-label fixture: {other:?}")),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..50 {
        let classes = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=40);
        let truth = random_label_sets(&mut rng, n, classes);
        let preds = random_label_sets(&mut rng, n, classes);
        let report = multi_label_report(&truth, &preds, classes, false).unwrap();
        if let Err(e) = compare_report(&report, &oracle::metrics(&truth, &preds, classes)) {
            problems.push(format!("random set {i}: {e}"));
        }
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() { "both fixtures and 50 random sets agree".to_string() } else { problems.join("; ") },
    )
}

fn apply(run: &mut RunConfig, pairs: &[(&str, &str)]) {
    for (k, v) in pairs {
        run.set(k, v).unwrap_or_else(|e| panic!("setting {k}={v}: {e}"));
    }
}

/// Capsule-A surrogate for the memorization check: two classes, 200
/// sentences of 6 to 20 tokens.
pub fn overfit_setup(seed: u64) -> (RunConfig, DatasetSplits) {
    let mut corpus = KeywordCorpus::new(SynthSpec { classes: 2, seed, ..SynthSpec::default() }).unwrap();
    let splits = corpus.splits(200, 0, 0);
    let mut run = RunConfig::default();
    apply(
        &mut run,
        &[
            ("arch", "capsule-a"),
            ("embed_dim", "16"),
            ("filters", "16"),
            ("channels", "8"),
            ("capsule_dim", "8"),
            ("conv_parents", "8"),
            ("max_len", "20"),
            ("epochs", "30"),
            ("batch_size", "25"),
            ("learning_rate", "0.01"),
            ("precision", "f32"),
        ],
    );
    run.set("seed", &seed.to_string()).unwrap();
    resolve_for_data(&mut run, &splits);
    (run, splits)
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

pub fn overfit() -> Outcome {
    let (run, splits) = overfit_setup(1);
    let start = Instant::now();
    let trained = single_thread(|| fit_run::<f32>(&run, &splits)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let samples = prepare_samples(&trained.model, &trained.vocab, &splits.train).unwrap();
    let acc = evaluate_auto(&trained.model, &samples, 0.5, false).unwrap().headline();
    Outcome::new(
        acc >= 0.99 && secs < 300.0,
        format!("training accuracy {:.1}% after {} epochs, {secs:.1}s on one thread", 100.0 * acc, trained.history.epochs()),
    )
}

/// Four-class transfer surrogate: single-label training sentences of 3 to
/// 20 tokens, two-label test documents built from two halves of at most 10.
pub fn transfer_setup(seed: u64, iterations: usize) -> (RunConfig, DatasetSplits) {
    let spec = SynthSpec { classes: 4, seed, min_len: 3, max_len: 20, ..SynthSpec::default() };
    let splits = KeywordCorpus::new(spec).unwrap().transfer_splits(400, 0, 100).unwrap();
    let mut run = RunConfig::default();
    apply(
        &mut run,
        &[
            ("arch", "capsule-a"),
            ("embed_dim", "32"),
            ("filters", "32"),
            ("channels", "8"),
            ("capsule_dim", "8"),
            ("conv_parents", "8"),
            ("shared_weights", "true"),
            ("max_len", "20"),
            ("epochs", "30"),
            ("batch_size", "25"),
            ("learning_rate", "0.01"),
            ("precision", "f32"),
        ],
    );
    run.set("seed", &seed.to_string()).unwrap();
    run.set("routing_iters", &iterations.to_string()).unwrap();
    resolve_for_data(&mut run, &splits);
    (run, splits)
}

#[derive(Debug, Clone)]
pub struct TransferRun {
    pub seed: u64,
    pub iterations: usize,
    pub report: MetricsReport,
    pub history: TrainHistory,
}

pub fn transfer_run(seed: u64, iterations: usize) -> TransferRun {
    let (run, splits) = transfer_setup(seed, iterations);
    assert!(splits.train.iter().all(|e| !e.is_multi_label()));
    let trained = fit_run::<f32>(&run, &splits).unwrap();
    let test = prepare_samples(&trained.model, &trained.vocab, &splits.test).unwrap();
    let report = evaluate_auto(&trained.model, &test, run.model.threshold, false).unwrap();
    TransferRun { seed, iterations, report, history: trained.history }
}

pub fn transfer(runs: &[TransferRun]) -> Outcome {
    let (mut er, mut f1) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for r in runs {
        match &r.report {
            MetricsReport::Multi { exact_match_ratio, f1: f, .. } => {
                er += exact_match_ratio;
                f1 += f;
                per_seed.push(format!("seed {} ER {:.3} F1 {:.3}", r.seed, exact_match_ratio, f));
            }
            other => return Outcome::new(false, format!("test split was not multi-label: {other:?}")),
        }
    }
    let n = runs.len() as f64;
    let (er, f1) = (er / n, f1 / n);
    Outcome::new(er >= 0.8 && f1 >= 0.9, format!("mean ER {er:.3}, mean F1 {f1:.3} ({})", per_seed.join(", ")))
}

/// Final-epoch mean training loss with three routing iterations against one.
pub fn routing_iterations(three: &[TransferRun], one: &[TransferRun], csv: &Path) -> Outcome {
    let mut lines = vec!["seed,iterations,epoch,mean_loss".to_string()];
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for (a, b) in three.iter().zip(one) {
        for r in [a, b] {
            for (e, l) in r.history.epoch_losses().iter().enumerate() {
                lines.push(format!("{},{},{},{l}", r.seed, r.iterations, e + 1));
            }
        }
        let la = *a.history.epoch_losses().last().unwrap();
        let lb = *b.history.epoch_losses().last().unwrap();
        if la < lb {
            wins += 1;
        }
        per_seed.push(format!("seed {}: {la:.5} vs {lb:.5}", a.seed));
    }
    let written = std::fs::write(csv, lines.join("\n") + "\n");
    Outcome::new(
        wins >= 2 && written.is_ok(),
        format!("r=3 lower in {wins}/{} seeds ({}); curves in {}", three.len(), per_seed.join(", "), csv.display()),
    )
}

pub fn capstext(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_capstext")).args(args).output().expect("run capstext")
}

pub fn ablation(out: &Path) -> Outcome {
    let start = Instant::now();
    let out_s = out.to_str().unwrap();
    let output = capstext(&[
        "ablate",
        "--synthetic",
        "2",
        "--vary",
        "iterations,leaky,orphan,amend,shared",
        "--set",
        "embed_dim=8",
        "--set",
        "filters=8",
        "--set",
        "channels=4",
        "--set",
        "capsule_dim=4",
        "--set",
        "conv_parents=4",
        "--max-len",
        "20",
        "--epochs",
        "2",
        "--learning-rate",
        "0.01",
        "--jobs",
        "4",
        "--out",
        out_s,
    ]);
    if !output.status.success() {
        return Outcome::new(false, format!("ablate exited with {}: {}", output.status, String::from_utf8_lossy(&output.stderr)));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let tsv = std::fs::read_to_string(out.join("ablation.tsv")).unwrap_or_default();
    let mut lines = tsv.lines();
    let header_ok = lines.next().map(|h| h.split('\t').eq(COLUMNS.iter().copied())).unwrap_or(false);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    let rows_ok = rows.len() == 48
        && rows.iter().all(|r| r.len() == COLUMNS.len() && r[8].parse::<f64>().map(|a| (0.0..=100.0).contains(&a)).unwrap_or(false));
    let table_ok = COLUMNS.iter().all(|c| stdout.contains(c));
    Outcome::new(
        header_ok && rows_ok && table_ok,
        format!(
            "{} rows, header {}, printed table {}, {:.1}s",
            rows.len(),
            if header_ok { "ok" } else { "wrong" },
            if table_ok { "ok" } else { "missing columns" },
            start.elapsed().as_secs_f64()
        ),
    )
}

fn determinism_for<F: Real>(precision: Precision) -> Result<String, String> {
    let (mut run, splits) = overfit_setup(5);
    run.train.epochs = 3;
    run.train.precision = precision;
    let a = fit_run::<F>(&run, &splits).map_err(|e| e.to_string())?;
    let b = fit_run::<F>(&run, &splits).map_err(|e| e.to_string())?;
    if !a.history.same_trajectory(&b.history) {
        return Err(format!("{precision:?}: loss trajectories differ"));
    }
    if a.model.params != b.model.params {
        return Err(format!("{precision:?}: final parameters differ"));
    }
    let bytes = encode_checkpoint(&a.model, &a.vocab).map_err(|e| e.to_string())?;
    let (loaded, vocab) = decode_checkpoint::<F>(&bytes).map_err(|e| e.to_string())?;
    if vocab != a.vocab {
        return Err(format!("{precision:?}: vocabulary changed in the round trip"));
    }
    for ((_, p), (_, q)) in a.model.params.iter().zip(loaded.params.iter()) {
        let same = p.name == q.name
            && p.value.shape() == q.value.shape()
            && p.value.to_f64().iter().zip(q.value.to_f64()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("{precision:?}: parameter {} changed in the round trip", p.name));
        }
    }
    let probe = prepare_samples(&a.model, &a.vocab, &splits.train[..20]).map_err(|e| e.to_string())?;
    let before = score_samples(&a.model, &probe).map_err(|e| e.to_string())?;
    let after = score_samples(&loaded, &probe).map_err(|e| e.to_string())?;
    if before != after {
        return Err(format!("{precision:?}: probe outputs differ after reload"));
    }
    Ok(format!("{precision:?} ok"))
}

pub fn determinism() -> Outcome {
    let results = [determinism_for::<f32>(Precision::F32), determinism_for::<f64>(Precision::F64)];
    let passed = results.iter().all(Result::is_ok);
    let detail: Vec<String> = results.into_iter().map(|r| r.unwrap_or_else(|e| e)).collect();
    Outcome::new(passed, format!("repeat runs and checkpoint round trip: {}", detail.join(", ")))
}
