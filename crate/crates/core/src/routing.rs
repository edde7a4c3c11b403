//! Dynamic routing between capsule layers.
//!
//! Each iteration computes coupling coefficients from the logits (leaky
//! softmax over parents, optionally scaled by the child's existence
//! probability), forms parents as the squashed coefficient-weighted sum of
//! votes, and raises each logit by the agreement `û_{j|i} · v_j`.
//! All iterations are recorded on the graph, so gradients flow through the
//! coefficients as well as the votes.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real, SquashKind, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub leaky: bool,
    /// Scale each child's coefficient row by its existence probability.
    pub amend: bool,
    /// Plain softmax, no amendment, regardless of the two flags above.
    pub baseline: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { iterations: 3, leaky: true, amend: true, baseline: false }
    }
}

impl RoutingConfig {
    pub fn baseline(iterations: usize) -> Self {
        RoutingConfig { iterations, leaky: false, amend: false, baseline: true }
    }

    pub fn uses_leaky(&self) -> bool {
        self.leaky && !self.baseline
    }

    pub fn uses_amend(&self) -> bool {
        self.amend && !self.baseline
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Contract("routing needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Graph handles produced by [`route`].
#[derive(Debug, Clone, Copy)]
pub struct RouteOutput {
    /// Parent capsules `[N, d]`.
    pub parents: Var,
    /// Parent probabilities `|v_j|`, `[N]`.
    pub probs: Var,
    /// Coefficients `[H, N]` used to build the returned parents.
    pub couplings: Var,
    /// Logits `[H, N]` after the final agreement update.
    pub logits: Var,
}

/// Leaky softmax of one logit row: a zero-valued leak logit joins the
/// normalization and its share is discarded.
pub fn leaky_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[logits.len()], logits.to_vec())?);
    let y = g.softmax(x, true);
    Ok(g.value(y).data().to_vec())
}

/// Routes `votes: [H, N, d]` to `N` parents. `child_probs: [H]` holds each
/// child's existence probability and must lie in `[0, 1]`.
pub fn route<F: Real>(
    g: &mut Graph<F>,
    votes: Var,
    child_probs: Var,
    cfg: &RoutingConfig,
    squash: SquashKind,
) -> Result<RouteOutput> {
    cfg.validate()?;
    let (h, n) = match g.shape(votes) {
        &[h, n, _] => (h, n),
        other => return Err(Error::shape("route", format!("votes {other:?} are not [H, N, d]"))),
    };
    if g.shape(child_probs) != [h] {
        return Err(Error::shape(
            "route",
            format!("child probabilities {:?} do not match {h} children", g.shape(child_probs)),
        ));
    }
    if let Some(bad) = g
        .value(child_probs)
        .data()
        .iter()
        .find(|&&p| !(p >= F::zero() && p <= F::one()))
    {
        return Err(Error::Contract(format!("child probability {bad} outside [0, 1]")));
    }

    let mut logits = g.constant(Tensor::zeros(&[h, n])?);
    let mut last = None;
    for _ in 0..cfg.iterations {
        let mut couplings = g.softmax(logits, cfg.uses_leaky());
        if cfg.uses_amend() {
            couplings = g.elementwise_mul(couplings, child_probs)?;
        }
        let summed = g.weighted_sum(couplings, votes)?;
        let parents = g.squash(summed, squash);
        let probs = g.l2_norm(parents, 1)?;
        let agreement = g.agreement(votes, parents)?;
        logits = g.add(logits, agreement)?;
        last = Some((parents, probs, couplings));
    }
    let (parents, probs, couplings) = last.expect("at least one iteration");
    Ok(RouteOutput { parents, probs, couplings, logits })
}

/// Plain-valued snapshot of one routing call.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<F: Real> {
    pub votes: Tensor<F>,
    pub child_probs: Tensor<F>,
    pub logits: Tensor<F>,
    pub couplings: Tensor<F>,
    pub parents: Tensor<F>,
    pub probs: Tensor<F>,
}

impl<F: Real> RoutingState<F> {
    /// Runs [`route`] on a throwaway graph.
    pub fn run(
        votes: Tensor<F>,
        child_probs: Tensor<F>,
        cfg: &RoutingConfig,
        squash: SquashKind,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let u = g.constant(votes.clone());
        let a = g.constant(child_probs.clone());
        let out = route(&mut g, u, a, cfg, squash)?;
        Ok(RoutingState {
            votes,
            child_probs,
            logits: g.value(out.logits).clone(),
            couplings: g.value(out.couplings).clone(),
            parents: g.value(out.parents).clone(),
            probs: g.value(out.probs).clone(),
        })
    }
}

/// Existence probabilities fed to the next routing call. Children of a
/// routing layer carry their pose norms (primary capsules) or the parent
/// probabilities emitted by the previous routing call; both are the norms
/// held in `activations`. Without a bounding squash those norms can exceed
/// one, so they are clipped to `min(a, 1)`.
pub fn child_activation_source<F: Real>(
    g: &mut Graph<F>,
    activations: Var,
    squash: SquashKind,
) -> Var {
    if squash != SquashKind::None {
        return activations;
    }
    // min(a, 1) = 1 - relu(1 - a)
    let flipped = g.scale(activations, -1.0);
    let gap = g.add_scalar(flipped, 1.0);
    let gap = g.relu(gap);
    let neg = g.scale(gap, -1.0);
    g.add_scalar(neg, 1.0)
}
