//! Named parameter storage shared by every network role.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass binds the
//! store onto a [`Graph`] and indexes the resulting [`Bound`] with those ids.
//! Checkpointing, averaging, optimisation and finite-difference checks all
//! operate on the store without knowing the architecture.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Every scalar parameter, concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Replace all values from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names || self.shapes() != other.shapes() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// Leaves that receive gradients.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Constant leaves, for frozen networks such as a distillation teacher.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.constant(t.clone())).collect(),
        }
    }
}

/// A [`ParamStore`] laid onto a graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Gradients for every parameter, zero where nothing flowed back.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}

/// Central-difference gradient of `f` with respect to every scalar in `store`.
pub fn numerical_gradient(store: &mut ParamStore, h: f64, mut f: impl FnMut(&ParamStore) -> Result<f64>) -> Result<Vec<f64>> {
    let base = store.flatten();
    let mut out = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + h;
        store.set_flat(&x)?;
        let up = f(store)?;
        x[i] = base[i] - h;
        store.set_flat(&x)?;
        let down = f(store)?;
        x[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    store.set_flat(&base)?;
    Ok(out)
}

/// `max |a - b| / max(1, max |b|)` over paired entries.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Weighted parameter-wise mean of stores sharing one layout.
pub fn weighted_mean(stores: &[&ParamStore], weights: &[f64]) -> Result<ParamStore> {
    let first = stores
        .first()
        .ok_or_else(|| Error::Config("cannot average zero parameter sets".into()))?;
    if stores.len() != weights.len() {
        return Err(Error::Config("one weight per parameter set is required".into()));
    }
    let mut out = (*first).clone();
    for t in out.tensors_mut() {
        t.scale(0.0);
    }
    for (s, &w) in stores.iter().zip(weights) {
        first.check_layout(s)?;
        for (dst, src) in out.tensors_mut().iter_mut().zip(s.tensors()) {
            dst.add_scaled(src, w);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// First-order optimiser over a [`ParamStore`].
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
                v: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            }),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(store.len(), grads.len());
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in store.tensors_mut().iter_mut().zip(grads) {
                    p.add_scaled(g, -*lr);
                }
            }
            Optimizer::Adam(a) => {
                a.step += 1;
                let c1 = 1.0 - a.beta1.powi(a.step);
                let c2 = 1.0 - a.beta2.powi(a.step);
                for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
                    let m = a.m[i].data_mut();
                    let v = a.v[i].data_mut();
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * gv;
                        v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * gv * gv;
                        *pv -= a.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + a.eps);
                    }
                }
            }
        }
    }
}
