//! Named learnable tensors and their binding onto a [`Graph`].

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A learnable tensor plus its leaf on the graph currently being recorded.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    var: Option<Var>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { value, var: None }
    }

    /// Leaf recorded by the last [`Param::bind`].
    ///
    /// Panics if the parameter was never bound; forward passes must bind their
    /// modules on the graph they record into.
    pub fn var(&self) -> Var {
        self.var.expect("parameter used before being bound to a graph")
    }

    pub fn bind(&mut self, g: &mut Graph, trainable: bool) -> Var {
        let v = g.param(&self.value, trainable);
        self.var = Some(v);
        v
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Uses an existing node as this parameter's leaf, so a gradient check
    /// can perturb it.
    pub fn rebind(&mut self, v: Var) {
        self.var = Some(v);
    }
}

impl From<Tensor> for Param {
    fn from(t: Tensor) -> Self {
        Self::new(t)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A tree of named parameters.
pub trait Module: Clone {
    /// Visits every parameter with its dotted name under `prefix`, in a fixed
    /// order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn bind(&mut self, g: &mut Graph, trainable: bool) {
        self.visit_mut("", &mut |_, p| {
            p.bind(g, trainable);
        });
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone().visit_mut(prefix, &mut |name, p| out.push((name, p.value.clone())));
        out
    }

    /// Gradients of every bound parameter, keyed by name.
    fn grads(&self, g: &Graph, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.clone().visit_mut(prefix, &mut |name, p| {
            out.insert(name, g.grad_tensor(p.var()));
        });
        out
    }

    fn num_params(&self) -> usize {
        self.named_tensors("").iter().map(|(_, t)| t.numel()).sum()
    }

    /// Overwrites every parameter from `map`; shapes must agree.
    fn load(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut failure = None;
        self.visit_mut(prefix, &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match map.get(&name) {
                Some(t) if t.shape() == p.shape() => p.value = t.clone(),
                Some(t) => {
                    failure = Some(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => failure = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}
