//! Finite-difference checks of every primitive, every layer on its own, and
//! whole models under each loss.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capstext::diff::{finite_diff_check, Graph, SquashKind, Tensor, Var};
use capstext::error::Result;
use capstext::layers::{
    CapsuleGrid, ConvCapsuleLayer, FcCapsuleLayer, FeatureMap, NGramConvLayer, PrimaryCapsuleLayer, TransformMode,
};
use capstext::model::{build_model, loss, Architecture, LossKind, ModelConfig};
use capstext::params::{Bound, ParamStore};
use capstext::routing::{route, RoutingConfig};
use capstext::text::{EmbeddingTable, EncodedSentence};

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Reduces `v` to a scalar through fixed random weights so every output
/// element carries a distinct gradient.
fn weigh(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(v), seed ^ 0xABCD, -1.0, 1.0));
    let p = g.elementwise_mul(v, w)?;
    Ok(g.sum(p))
}

type Check = (String, Result<f64>);

fn check<S>(name: impl Into<String>, params: Vec<Tensor<f64>>, f: S) -> Check
where
    S: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    (name.into(), finite_diff_check(f, &params, EPS))
}

pub fn primitive_checks() -> Vec<Check> {
    let r = |shape: &[usize], seed: u64| random(shape, seed, -1.0, 1.0);
    let mut out = vec![
        check("matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weigh(g, y, 1)
        }),
        check("conv1d_valid", vec![r(&[6, 3], 3), r(&[2, 3, 4], 4)], |g, v| {
            let y = g.conv1d_valid(v[0], v[1])?;
            weigh(g, y, 2)
        }),
        check("relu", vec![r(&[10], 5)], |g, v| {
            let y = g.relu(v[0]);
            weigh(g, y, 3)
        }),
        check("add", vec![r(&[3, 4], 6), r(&[4], 7)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weigh(g, y, 4)
        }),
        check("elementwise_mul", vec![r(&[3, 4], 8), r(&[3], 9)], |g, v| {
            let y = g.elementwise_mul(v[0], v[1])?;
            weigh(g, y, 5)
        }),
        check("scale/add_scalar", vec![r(&[5], 10)], |g, v| {
            let y = g.scale(v[0], -1.7);
            let y = g.add_scalar(y, 0.3);
            let y = g.elementwise_mul(y, y)?;
            weigh(g, y, 6)
        }),
        check("concat", vec![r(&[2, 3], 11), r(&[1, 3], 12), r(&[3, 2], 13)], |g, v| {
            let rows = g.concat(&[v[0], v[1]], 0)?;
            let cols = g.concat(&[rows, v[2]], 1)?;
            weigh(g, cols, 7)
        }),
        check("sum", vec![r(&[4], 14)], |g, v| {
            let sq = g.elementwise_mul(v[0], v[0])?;
            Ok(g.sum(sq))
        }),
        check("gather_rows", vec![r(&[5, 3], 15)], |g, v| {
            let y = g.gather_rows(v[0], &[0, 2, 2, 4])?;
            weigh(g, y, 8)
        }),
        check("reshape/slice_rows", vec![r(&[5, 3], 16)], |g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            let y = g.reshape(y, &[3, 3])?;
            let y = g.matmul(y, y)?;
            weigh(g, y, 9)
        }),
        check("log_softmax", vec![r(&[5], 17)], |g, v| {
            let y = g.log_softmax(v[0]);
            weigh(g, y, 10)
        }),
        check("expand", vec![r(&[1], 18)], |g, v| {
            let y = g.expand(v[0], &[3])?;
            let y = g.elementwise_mul(y, y)?;
            weigh(g, y, 11)
        }),
        check("votes/shared", vec![r(&[3, 2], 19), r(&[4, 2, 2], 20)], |g, v| {
            let y = g.votes(v[0], v[1])?;
            weigh(g, y, 12)
        }),
        check("votes/non-shared", vec![r(&[3, 2], 21), r(&[3, 4, 2, 2], 22)], |g, v| {
            let y = g.votes(v[0], v[1])?;
            weigh(g, y, 13)
        }),
        check("weighted_sum", vec![r(&[3, 4], 23), r(&[3, 4, 2], 24)], |g, v| {
            let y = g.weighted_sum(v[0], v[1])?;
            weigh(g, y, 14)
        }),
        check("agreement", vec![r(&[3, 4, 2], 25), r(&[4, 2], 26)], |g, v| {
            let y = g.agreement(v[0], v[1])?;
            weigh(g, y, 15)
        }),
    ];
    for axis in 0..2 {
        out.push(check(format!("l2_norm/axis{axis}"), vec![r(&[3, 4], 27)], move |g, v| {
            let y = g.l2_norm(v[0], axis)?;
            weigh(g, y, 16)
        }));
        out.push(check(format!("mean/axis{axis}"), vec![r(&[3, 4], 28)], move |g, v| {
            let y = g.mean(v[0], axis)?;
            weigh(g, y, 17)
        }));
    }
    for leaky in [false, true] {
        out.push(check(format!("softmax/leaky={leaky}"), vec![r(&[3, 4], 29)], move |g, v| {
            let y = g.softmax(v[0], leaky);
            weigh(g, y, 18)
        }));
    }
    for kind in SquashKind::ALL {
        out.push(check(format!("squash/{kind}"), vec![r(&[3, 4], 30)], move |g, v| {
            let y = g.squash(v[0], kind);
            weigh(g, y, 19)
        }));
    }
    out
}

fn store_tensors(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

/// Layer parameters (in store order) followed by the layer input.
fn layer_check<S>(name: String, store: &ParamStore<f64>, input: Tensor<f64>, f: S) -> Check
where
    S: Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>,
{
    let mut params = store_tensors(store);
    let n = params.len();
    params.push(input);
    check(name, params, move |g, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        f(g, &bound, v[n])
    })
}

/// Capsule grid with valid existence probabilities derived from a free input.
fn grid_from(g: &mut Graph<f64>, raw: Var, squash: SquashKind) -> Result<CapsuleGrid> {
    let poses = g.squash(raw, squash);
    let activations = g.l2_norm(poses, 2)?;
    Ok(CapsuleGrid { poses, activations })
}

fn routing_configs() -> Vec<RoutingConfig> {
    let mut out = vec![RoutingConfig::baseline(3)];
    for leaky in [false, true] {
        for amend in [false, true] {
            out.push(RoutingConfig { iterations: 3, leaky, amend, baseline: false });
        }
    }
    out
}

fn bias_nudge(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).value.shape().to_vec();
        if store.get(id).name.ends_with("bias") {
            *store.value_mut(id) = random(&shape, seed + k as u64, -0.1, 0.1);
        }
    }
}

pub fn layer_checks() -> Vec<Check> {
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new();
    let ngram = NGramConvLayer::new(&mut store, "ngram", 3, 4, 4, 1).unwrap();
    bias_nudge(&mut store, 40);
    out.push(layer_check("layer/ngram_conv".into(), &store, random(&[8, 4], 41, -1.0, 1.0), move |g, b, x| {
        let m = ngram.forward(g, b, x)?;
        weigh(g, m.map, 20)
    }));

    for squash in SquashKind::ALL {
        let mut store = ParamStore::<f64>::new();
        let primary = PrimaryCapsuleLayer::new(&mut store, "primary", 4, 2, 3, 2).unwrap();
        bias_nudge(&mut store, 42);
        out.push(layer_check(
            format!("layer/primary/{squash}"),
            &store,
            random(&[5, 4], 43, 0.0, 1.0),
            move |g, b, x| {
                let grid = primary.forward(g, b, FeatureMap { map: x }, squash)?;
                let p = weigh(g, grid.poses, 21)?;
                let a = weigh(g, grid.activations, 22)?;
                g.add(p, a)
            },
        ));
    }

    for mode in [TransformMode::Shared, TransformMode::NonShared] {
        for cfg in routing_configs() {
            for squash in [SquashKind::Ratio, SquashKind::None] {
                let mut store = ParamStore::<f64>::new();
                let conv = ConvCapsuleLayer::new(&mut store, "conv", mode, 2, 2, 2, 3, 3).unwrap();
                bias_nudge(&mut store, 44);
                let name = format!("layer/conv_caps/{mode:?}/{cfg:?}/{squash}");
                out.push(layer_check(name, &store, random(&[4, 2, 3], 45, -1.0, 1.0), move |g, b, x| {
                    let grid = grid_from(g, x, SquashKind::Ratio)?;
                    let next = conv.forward(g, b, grid, &cfg, squash)?;
                    let p = weigh(g, next.poses, 23)?;
                    let a = weigh(g, next.activations, 24)?;
                    g.add(p, a)
                }));

                let mut store = ParamStore::<f64>::new();
                let fc = FcCapsuleLayer::new(&mut store, "fc", mode, 6, 3, 3, 4).unwrap();
                bias_nudge(&mut store, 46);
                let name = format!("layer/fc_caps/{mode:?}/{cfg:?}/{squash}");
                out.push(layer_check(name, &store, random(&[3, 2, 3], 47, -1.0, 1.0), move |g, b, x| {
                    let grid = grid_from(g, x, SquashKind::Ratio)?;
                    let o = fc.forward(g, b, grid, &cfg, squash)?;
                    let p = weigh(g, o.poses, 25)?;
                    let a = weigh(g, o.probs, 26)?;
                    g.add(p, a)
                }));
            }
        }
    }

    for cfg in routing_configs() {
        for squash in SquashKind::ALL {
            let params = vec![random(&[4, 3, 2], 48, -1.0, 1.0), random(&[4, 1, 2], 49, -1.0, 1.0)];
            out.push(check(format!("routing/{cfg:?}/{squash}"), params, move |g, v| {
                let probs = grid_from(g, v[1], SquashKind::Ratio)?;
                let probs = g.reshape(probs.activations, &[4])?;
                let r = route(g, v[0], probs, &cfg, squash)?;
                let p = weigh(g, r.parents, 27)?;
                let c = weigh(g, r.couplings, 28)?;
                g.add(p, c)
            }));
        }
    }
    out
}

/// L=8, V=4, B=4, C=2, d=3, two categories plus the orphan.
pub fn small_model_config(arch: Architecture, loss: LossKind) -> ModelConfig {
    ModelConfig {
        arch,
        embed_dim: 4,
        filters: 4,
        channels: 2,
        capsule_dim: 3,
        conv_window: 2,
        conv_parents: 2,
        categories: vec!["a".into(), "b".into()],
        orphan: true,
        loss,
        max_len: 8,
        trainable_embeddings: true,
        ..ModelConfig::default()
    }
}

pub fn model_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let cases = [
        (Architecture::CapsuleA, LossKind::Margin),
        (Architecture::Shortcut, LossKind::Margin),
        (Architecture::CapsuleB, LossKind::Margin),
        (Architecture::Shortcut, LossKind::Spread),
        (Architecture::Shortcut, LossKind::CrossEntropy),
    ];
    for (arch, kind) in cases {
        let mut model = build_model(small_model_config(arch, kind), EmbeddingTable::random(6, 4, 7).unwrap()).unwrap();
        bias_nudge(&mut model.params, 50);
        let params = store_tensors(&model.params);
        let sentence = EncodedSentence { indices: vec![2, 3, 4, 5, 1, 0, 0, 0], original_len: 5 };
        let target = vec![BTreeSet::from([1usize])];
        out.push(check(format!("model/{arch}/{kind}"), params, move |g, v| {
            let bound = Bound::from_vars(v.to_vec());
            let o = model.forward(g, &bound, &sentence)?;
            loss(g, &[o], &target, kind, 2)
        }));
    }
    out
}

/// Every check with its maximum relative error.
pub fn all_checks() -> Vec<Check> {
    let mut all = primitive_checks();
    all.extend(layer_checks());
    all.extend(model_checks());
    all
}
