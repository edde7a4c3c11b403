use crate::diff::{Graph, ParamId, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Named parameter tensors of a model. [`ParamId`]s index into the store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Real> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a value by name, keeping the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                format!("parameter {name:?} is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Puts every parameter on `g`. With `with_grad`, trainable parameters
    /// become differentiable leaves; everything else is a constant. The
    /// returned handles are indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<F>, with_grad: bool) -> Bound {
        Bound(
            self.iter()
                .map(|(id, p)| {
                    if with_grad && p.trainable {
                        g.param(id, p.value.clone())
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in [`ParamId`] order, e.g. the leaves created by
    /// [`crate::diff::finite_diff_check`].
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}
