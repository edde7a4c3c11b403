//! N-gram convolution, primary capsules, convolutional capsules and fully
//! connected capsules.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Init, ParamId, Real, SquashKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::routing::{child_activation_source, route, RoutingConfig};

/// Post-ReLU n-gram features, `[L-K1+1, B]`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub map: Var,
}

/// Capsules on a grid: poses `[positions, channels, d]` and activations
/// `[positions, channels]` holding the pose norms.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleGrid {
    pub poses: Var,
    pub activations: Var,
}

impl CapsuleGrid {
    pub fn dims<F: Real>(&self, g: &Graph<F>) -> (usize, usize, usize) {
        match g.shape(self.poses) {
            &[p, c, d] => (p, c, d),
            other => panic!("capsule grid poses have shape {other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    /// One `d x d` matrix per parent, shared by every child.
    Shared,
    /// One `d x d` matrix per child-parent pair; fixes the child count.
    NonShared,
}

/// Child-to-parent transformation. Weights are `[N, d, d]` (shared) or
/// `[H, N, d, d]` (non-shared); the bias is one `d`-vector per parent.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub mode: TransformMode,
    pub weights: ParamId,
    pub bias: ParamId,
    pub parents: usize,
    pub children: usize,
    pub dim: usize,
}

impl TransformSpec {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        mode: TransformMode,
        children: usize,
        parents: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let shape = match mode {
            TransformMode::Shared => vec![parents, dim, dim],
            TransformMode::NonShared => vec![children, parents, dim, dim],
        };
        let weights = store.add(
            format!("{prefix}.transform"),
            Tensor::new(&shape, Init::GlorotUniform { seed })?,
            true,
        );
        let bias = store.add(format!("{prefix}.vote_bias"), Tensor::zeros(&[parents, dim])?, true);
        Ok(TransformSpec { mode, weights, bias, parents, children, dim })
    }

    /// Votes `[H, N, d]` for children `[H, d]`.
    pub fn votes<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, children: Var) -> Result<Var> {
        let shape = g.shape(children).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("compute_votes", format!("children {shape:?}, capsule dim {}", self.dim)));
        }
        if self.mode == TransformMode::NonShared && shape[0] != self.children {
            return Err(Error::shape(
                "compute_votes",
                format!("{} children but non-shared transform expects {}", shape[0], self.children),
            ));
        }
        let raw = g.votes(children, bound.var(self.weights))?;
        g.add(raw, bound.var(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub ngram: usize,
    pub filters: usize,
}

impl NGramConvLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        ngram: usize,
        embed_dim: usize,
        filters: usize,
        seed: u64,
    ) -> Result<Self> {
        let init = Init::GlorotFans { fan_in: ngram * embed_dim, fan_out: ngram * filters, seed };
        let kernel = store.add(format!("{prefix}.kernel"), Tensor::new(&[ngram, embed_dim, filters], init)?, true);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[filters])?, true);
        Ok(NGramConvLayer { kernel, bias, ngram, filters })
    }

    /// `x: [L, V]` -> ReLU features `[L-K1+1, B]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, x: Var) -> Result<FeatureMap> {
        let len = g.shape(x)[0];
        if len < self.ngram {
            return Err(Error::shape(
                "ngram_conv",
                format!("sentence length {len} is shorter than the {}-gram window", self.ngram),
            ));
        }
        let conv = g.conv1d_valid(x, bound.var(self.kernel))?;
        let biased = g.add(conv, bound.var(self.bias))?;
        Ok(FeatureMap { map: g.relu(biased) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryCapsuleLayer {
    /// `[B, C*d]`: the `C` capsule filters side by side.
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_filters: usize,
    pub channels: usize,
    pub dim: usize,
}

impl PrimaryCapsuleLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_filters: usize,
        channels: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let init = Init::GlorotFans { fan_in: in_filters, fan_out: dim, seed };
        let weight = store.add(format!("{prefix}.weight"), Tensor::new(&[in_filters, channels * dim], init)?, true);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[channels * dim])?, true);
        Ok(PrimaryCapsuleLayer { weight, bias, in_filters, channels, dim })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        features: FeatureMap,
        squash: SquashKind,
    ) -> Result<CapsuleGrid> {
        let shape = g.shape(features.map).to_vec();
        if shape.len() != 2 || shape[1] != self.in_filters {
            return Err(Error::shape(
                "primary_caps",
                format!("feature map {shape:?} does not have {} filters", self.in_filters),
            ));
        }
        let positions = shape[0];
        let lin = g.matmul(features.map, bound.var(self.weight))?;
        let lin = g.add(lin, bound.var(self.bias))?;
        let lin = g.reshape(lin, &[positions, self.channels, self.dim])?;
        let poses = g.squash(lin, squash);
        let activations = g.l2_norm(poses, 2)?;
        Ok(CapsuleGrid { poses, activations })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvCapsuleLayer {
    pub transform: TransformSpec,
    pub window: usize,
    pub in_channels: usize,
    pub parents: usize,
}

impl ConvCapsuleLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        mode: TransformMode,
        window: usize,
        in_channels: usize,
        parents: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let transform = TransformSpec::new(store, prefix, mode, window * in_channels, parents, dim, seed)?;
        Ok(ConvCapsuleLayer { transform, window, in_channels, parents })
    }

    /// Routes every stride-1 window of `window x channels` children to
    /// `parents` capsules, giving a `[P-K2+1, D, d]` grid.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        grid: CapsuleGrid,
        routing: &RoutingConfig,
        squash: SquashKind,
    ) -> Result<CapsuleGrid> {
        let (positions, channels, dim) = grid.dims(g);
        if channels != self.in_channels || dim != self.transform.dim {
            return Err(Error::shape(
                "conv_caps",
                format!("grid [{positions}, {channels}, {dim}] vs layer channels {}", self.in_channels),
            ));
        }
        if positions < self.window {
            return Err(Error::shape(
                "conv_caps",
                format!("{positions} positions is fewer than the window {}", self.window),
            ));
        }
        let out_positions = positions - self.window + 1;
        let flat = g.reshape(grid.poses, &[positions * channels, dim])?;
        let probs = child_activation_source(g, grid.activations, squash);
        let probs = g.reshape(probs, &[positions * channels])?;
        let children = self.window * channels;

        let mut parents = Vec::with_capacity(out_positions);
        let mut parent_probs = Vec::with_capacity(out_positions);
        for t in 0..out_positions {
            let u = g.slice_rows(flat, t * channels, children)?;
            let a = g.slice_rows(probs, t * channels, children)?;
            let votes = self.transform.votes(g, bound, u)?;
            let out = route(g, votes, a, routing, squash)?;
            parents.push(out.parents);
            parent_probs.push(out.probs);
        }
        let poses = g.concat(&parents, 0)?;
        let poses = g.reshape(poses, &[out_positions, self.parents, dim])?;
        let activations = g.concat(&parent_probs, 0)?;
        let activations = g.reshape(activations, &[out_positions, self.parents])?;
        Ok(CapsuleGrid { poses, activations })
    }
}

/// Final capsules of one branch.
#[derive(Debug, Clone, Copy)]
pub struct FcOutput {
    /// `[E, d]`
    pub poses: Var,
    /// `[E]`
    pub probs: Var,
    /// `[H, E]`, final-iteration coefficients
    pub couplings: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcCapsuleLayer {
    pub transform: TransformSpec,
    pub outputs: usize,
}

impl FcCapsuleLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        mode: TransformMode,
        children: usize,
        outputs: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let transform = TransformSpec::new(store, prefix, mode, children, outputs, dim, seed)?;
        Ok(FcCapsuleLayer { transform, outputs })
    }

    /// Flattens the grid into one list of children and routes it to the
    /// output capsules.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        grid: CapsuleGrid,
        routing: &RoutingConfig,
        squash: SquashKind,
    ) -> Result<FcOutput> {
        let (positions, channels, dim) = grid.dims(g);
        let children = positions * channels;
        let flat = g.reshape(grid.poses, &[children, dim])?;
        let probs = child_activation_source(g, grid.activations, squash);
        let probs = g.reshape(probs, &[children])?;
        let votes = self.transform.votes(g, bound, flat)?;
        let out = route(g, votes, probs, routing, squash)?;
        Ok(FcOutput { poses: out.parents, probs: out.probs, couplings: out.couplings })
    }
}

/// The parameterized layers of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub ngram: NGramConvLayer,
    pub primary: PrimaryCapsuleLayer,
    pub conv: Option<ConvCapsuleLayer>,
    pub fc: FcCapsuleLayer,
}

impl LayerStack {
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        embedded: Var,
        routing: &RoutingConfig,
        squash: SquashKind,
    ) -> Result<FcOutput> {
        let features = self.ngram.forward(g, bound, embedded)?;
        let mut grid = self.primary.forward(g, bound, features, squash)?;
        if let Some(conv) = &self.conv {
            grid = conv.forward(g, bound, grid, routing, squash)?;
        }
        self.fc.forward(g, bound, grid, routing, squash)
    }
}
