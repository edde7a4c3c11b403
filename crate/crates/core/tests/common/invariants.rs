//! Randomized invariant suites driven by proptest runners with a fixed
//! seed. Each suite returns the first counterexample as an error message.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use capstext::diff::{Graph, SquashKind, Tensor};
use capstext::model::{build_model, predict, Architecture, ModelConfig, PredictMode};
use capstext::routing::{leaky_softmax, RoutingConfig, RoutingState};
use capstext::text::EmbeddingTable;

pub const DEFAULT_CASES: u32 = 256;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn finish<T: std::fmt::Debug>(name: &str, r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

fn bounded_kind() -> impl Strategy<Value = SquashKind> {
    prop_oneof![Just(SquashKind::Ratio), Just(SquashKind::Exp), Just(SquashKind::Tanh)]
}

/// Bounded squash: norm in [0, 1), direction preserved.
pub fn squash_bounds(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(-50.0f64..50.0, 1..9), bounded_kind());
    finish(
        "squash",
        runner(cases).run(&strat, |(s, kind)| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_vec(&[s.len()], s.clone()).unwrap());
            let y = g.squash(x, kind);
            let v = g.value(y).data().to_vec();
            let n_in = s.iter().map(|a| a * a).sum::<f64>().sqrt();
            let n_out = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((0.0..1.0).contains(&n_out), "norm {} for input norm {}", n_out, n_in);
            if n_in > 1e-6 {
                let cos = s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (n_in * n_out);
                prop_assert!((cos - 1.0).abs() < 1e-9, "cosine {}", cos);
            } else {
                prop_assert!(n_out < 1e-6);
            }
            Ok(())
        }),
    )
}

/// Leaky softmax rows are non-negative and sum strictly below one.
pub fn leaky_softmax_mass(cases: u32) -> Result<(), String> {
    let sym = leaky_softmax(&[0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    if sym.iter().any(|&c| (c - 0.25).abs() > 1e-15) {
        return Err(format!("leaky softmax of three zero logits gave {sym:?}"));
    }
    let strat = prop::collection::vec(-30.0f64..30.0, 1..9);
    finish(
        "leaky softmax",
        runner(cases).run(&strat, |logits| {
            let c = leaky_softmax(&logits).unwrap();
            prop_assert!(c.iter().all(|&x| x >= 0.0));
            prop_assert!(c.iter().sum::<f64>() < 1.0, "sum {}", c.iter().sum::<f64>());
            Ok(())
        }),
    )
}

/// Random routing problem: `(H, N, d, votes, child probabilities)`.
fn routing_problem() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..=8, 1usize..=8, 1usize..=4).prop_flat_map(|(h, n, d)| {
        (
            Just(h),
            Just(n),
            Just(d),
            prop::collection::vec(-2.0f64..2.0, h * n * d),
            prop::collection::vec(0.0f64..=1.0, h),
        )
    })
}

fn run_routing(h: usize, n: usize, d: usize, votes: &[f64], probs: &[f64], cfg: &RoutingConfig) -> RoutingState<f64> {
    RoutingState::run(
        Tensor::from_f64(&[h, n, d], votes).unwrap(),
        Tensor::from_f64(&[h], probs).unwrap(),
        cfg,
        SquashKind::Ratio,
    )
    .unwrap()
}

/// Baseline routing coefficients form a distribution over parents.
pub fn baseline_rows_sum_to_one(cases: u32) -> Result<(), String> {
    let strat = (routing_problem(), prop_oneof![Just(1usize), Just(3), Just(5)]);
    finish(
        "baseline rows",
        runner(cases).run(&strat, |((h, n, d, votes, probs), r)| {
            let s = run_routing(h, n, d, &votes, &probs, &RoutingConfig::baseline(r));
            for row in s.couplings.data().chunks(n) {
                let total: f64 = row.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12, "row sums to {}", total);
            }
            Ok(())
        }),
    )
}

/// Reordering the children leaves parents unchanged and permutes the
/// coefficient rows.
pub fn permutation_equivariance(cases: u32) -> Result<(), String> {
    let strat = (routing_problem(), any::<u64>(), any::<bool>(), any::<bool>(), prop_oneof![Just(1usize), Just(3)]);
    finish(
        "permutation",
        runner(cases).run(&strat, |((h, n, d, votes, probs), seed, leaky, amend, r)| {
            let mut perm: Vec<usize> = (0..h).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut pv = Vec::with_capacity(votes.len());
            let mut pp = Vec::with_capacity(h);
            for &i in &perm {
                pv.extend_from_slice(&votes[i * n * d..(i + 1) * n * d]);
                pp.push(probs[i]);
            }
            let cfg = RoutingConfig { iterations: r, leaky, amend, baseline: false };
            let a = run_routing(h, n, d, &votes, &probs, &cfg);
            let b = run_routing(h, n, d, &pv, &pp, &cfg);
            for (x, y) in a.parents.data().iter().zip(b.parents.data()) {
                prop_assert!((x - y).abs() <= 1e-12, "parent {} vs {}", x, y);
            }
            for (x, y) in a.probs.data().iter().zip(b.probs.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (new_row, &old_row) in perm.iter().enumerate() {
                for j in 0..n {
                    let x = a.couplings.data()[old_row * n + j];
                    let y = b.couplings.data()[new_row * n + j];
                    prop_assert!((x - y).abs() <= 1e-12, "coupling {} vs {}", x, y);
                }
            }
            Ok(())
        }),
    )
}

#[derive(Debug, Clone)]
pub struct ShapeCase {
    pub len: usize,
    pub embed: usize,
    pub k1: usize,
    pub k2: usize,
    pub filters: usize,
    pub channels: usize,
    pub parents: usize,
    pub dim: usize,
    pub categories: usize,
    pub orphan: bool,
    pub shared: bool,
}

fn shape_case() -> impl Strategy<Value = ShapeCase> {
    (
        (1usize..=4, 1usize..=3, 0usize..=6),
        (1usize..=4, 1usize..=5, 1usize..=3, 1usize..=3, 1usize..=4),
        (1usize..=4, any::<bool>(), any::<bool>()),
    )
        .prop_map(|((k1, k2, extra), (embed, filters, channels, parents, dim), (categories, orphan, shared))| {
            ShapeCase {
                len: k1 + k2 - 1 + extra,
                embed,
                k1,
                k2,
                filters,
                channels,
                parents,
                dim,
                categories,
                orphan,
                shared,
            }
        })
}

/// `[L, V] -> [L-K1+1, B] -> [L-K1+1, C, d] -> [L-K1-K2+2, D, d] -> [E, d]`.
pub fn check_shape_chain(c: &ShapeCase) -> Result<(), String> {
    let cfg = ModelConfig {
        arch: Architecture::CapsuleA,
        embed_dim: c.embed,
        ngram_sizes: vec![c.k1],
        filters: c.filters,
        channels: c.channels,
        capsule_dim: c.dim,
        conv_window: c.k2,
        conv_parents: c.parents,
        categories: (0..c.categories).map(|k| format!("c{k}")).collect(),
        orphan: c.orphan,
        shared_weights: c.shared,
        max_len: c.len,
        ..ModelConfig::default()
    };
    let vocab = 7;
    let model = build_model(cfg, EmbeddingTable::<f64>::random(vocab, c.embed, 3).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let stack = &model.branches[0];
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let indices: Vec<usize> = (0..c.len).map(|i| i % vocab).collect();
    let x = g.gather_rows(bound.var(model.embedding), &indices).map_err(|e| e.to_string())?;
    let expect = |g: &Graph<f64>, v, want: Vec<usize>, what: &str| {
        if g.shape(v) == want.as_slice() {
            Ok(())
        } else {
            Err(format!("{what}: got {:?}, want {want:?} for {c:?}", g.shape(v)))
        }
    };
    expect(&g, x, vec![c.len, c.embed], "embedded")?;
    let routing = &model.config.routing;
    let squash = model.config.squash;
    let feats = stack.ngram.forward(&mut g, &bound, x).map_err(|e| e.to_string())?;
    let p1 = c.len - c.k1 + 1;
    expect(&g, feats.map, vec![p1, c.filters], "n-gram features")?;
    let prim = stack.primary.forward(&mut g, &bound, feats, squash).map_err(|e| e.to_string())?;
    expect(&g, prim.poses, vec![p1, c.channels, c.dim], "primary capsules")?;
    let conv = stack.conv.as_ref().ok_or("capsule-a stack has no conv capsule layer")?;
    let grid = conv.forward(&mut g, &bound, prim, routing, squash).map_err(|e| e.to_string())?;
    expect(&g, grid.poses, vec![p1 - c.k2 + 1, c.parents, c.dim], "conv capsules")?;
    let fc = stack.fc.forward(&mut g, &bound, grid, routing, squash).map_err(|e| e.to_string())?;
    let e = c.categories + usize::from(c.orphan);
    expect(&g, fc.poses, vec![e, c.dim], "class capsules")?;
    expect(&g, fc.probs, vec![e], "class probabilities")
}

pub fn shape_chain(cases: u32) -> Result<(), String> {
    finish(
        "shape chain",
        runner(cases).run(&shape_case(), |c| check_shape_chain(&c).map_err(TestCaseError::fail)),
    )
}

/// Probabilities on a 1/1000 grid so strictly increasing maps cannot merge
/// distinct values.
fn grid_probs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..=1000).prop_map(|k| f64::from(k) / 1000.0), 2..8)
}

/// The orphan slot is never part of a prediction.
pub fn orphan_never_predicted(cases: u32) -> Result<(), String> {
    let strat = (grid_probs(), 0.0f64..1.0);
    finish(
        "orphan",
        runner(cases).run(&strat, |(mut probs, threshold)| {
            probs.push(1.0);
            let n = probs.len() - 1;
            for mode in [PredictMode::Single, PredictMode::Multi { threshold }] {
                let p = predict(&probs, n, mode);
                prop_assert!(!p.is_empty() && p.iter().all(|&k| k < n), "{:?} predicted {:?}", mode, p);
            }
            Ok(())
        }),
    )
}

/// Single-label predictions depend only on the ordering of the scores.
pub fn argmax_monotone_invariance(cases: u32) -> Result<(), String> {
    let transforms: [fn(f64) -> f64; 4] = [|x| 2.0 * x + 0.5, |x| x.exp(), |x| (x + 1e-3).ln(), |x| x * x * x];
    finish(
        "argmax",
        runner(cases).run(&grid_probs(), |probs| {
            let n = probs.len();
            let base = predict(&probs, n, PredictMode::Single);
            for f in transforms {
                let moved: Vec<f64> = probs.iter().map(|&p| f(p)).collect();
                prop_assert_eq!(&predict(&moved, n, PredictMode::Single), &base);
            }
            Ok(())
        }),
    )
}

/// Every invariant suite, with the shape chain on `shape_cases` configs.
pub fn all(cases: u32, shape_cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("squash", squash_bounds(cases)),
        ("leaky softmax", leaky_softmax_mass(cases)),
        ("baseline rows", baseline_rows_sum_to_one(cases)),
        ("permutation", permutation_equivariance(cases)),
        ("shape chain", shape_chain(shape_cases)),
        ("orphan", orphan_never_predicted(cases)),
        ("argmax", argmax_monotone_invariance(cases)),
    ]
}
