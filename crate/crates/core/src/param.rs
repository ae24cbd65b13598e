//! Named parameters with role tags, the AdamW optimizer, and [`Ctx`], which
//! binds stored parameters onto a tape for one forward pass.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Result, VistaError};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Ownership group of a parameter. Base parameters are trainable during
/// stage-1 pretraining and become `frozen-base` once [`ParamStore::freeze_role`]
/// is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Base,
    Adapter,
    Fusion,
    Encoder,
}

impl Role {
    /// Checkpoint tag, taking the frozen flag into account for base weights.
    pub fn tag(self, frozen: bool) -> &'static str {
        match (self, frozen) {
            (Role::Base, true) => "frozen-base",
            (Role::Base, false) => "base",
            (Role::Adapter, _) => "trainable-adapter",
            (Role::Fusion, _) => "trainable-fusion",
            (Role::Encoder, _) => "encoder",
        }
    }

    pub fn from_tag(tag: &str) -> Option<(Role, bool)> {
        Some(match tag {
            "frozen-base" => (Role::Base, true),
            "base" => (Role::Base, false),
            "trainable-adapter" => (Role::Adapter, false),
            "trainable-fusion" => (Role::Fusion, false),
            "encoder" => (Role::Encoder, false),
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub role: Role,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, role: Role) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            role,
            frozen: false,
        }
    }

    /// One decoupled-weight-decay Adam update at step `t >= 1`.
    pub fn adamw_step(&mut self, opt: &AdamW, t: u64) -> Result<()> {
        if self.frozen {
            return Err(VistaError::FrozenViolation(self.name.clone()));
        }
        if t == 0 {
            return Err(VistaError::Config("adamw step index starts at 1".into()));
        }
        let b1 = S::lit(opt.beta1);
        let b2 = S::lit(opt.beta2);
        let one = S::one();
        let bc1 = S::lit(1.0 - opt.beta1.powi(t as i32));
        let bc2 = S::lit(1.0 - opt.beta2.powi(t as i32));
        let lr = S::lit(opt.lr);
        let eps = S::lit(opt.eps);
        let decay = S::lit(1.0 - opt.lr * opt.weight_decay);
        let g = self.grad.data();
        let m = self.m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (one - b1) * gi;
        }
        let v = self.v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (one - b2) * gi * gi;
        }
        let (m, v) = (self.m.data(), self.v.data());
        for ((p, &mi), &vi) in self.value.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Flat registry of every parameter in the system.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>, role: Role) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(name, value, role));
        self.index.insert(name.to_string(), id);
        id
    }

    /// Gaussian-initialized weight with the given standard deviation.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, role: Role, rng: &mut RngStream) -> ParamId {
        let t = rng.normal_tensor_scaled(shape, std);
        self.add(name, t, role)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], role: Role) -> ParamId {
        self.add(name, Tensor::zeros(shape), role)
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize], role: Role) -> ParamId {
        self.add(name, Tensor::full(shape, S::one()), role)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.role == role).map(|(id, _)| id).collect()
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.params.iter().filter(|p| p.role == role).map(|p| p.value.len()).sum()
    }

    pub fn freeze_role(&mut self, role: Role) {
        for p in self.params.iter_mut().filter(|p| p.role == role) {
            p.frozen = true;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor<S>)>) -> Result<()> {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.frozen {
                return Err(VistaError::FrozenViolation(p.name.clone()));
            }
            p.grad.add_assign(&g);
        }
        Ok(())
    }

    /// AdamW step on every parameter whose role is in `roles`. Touching a
    /// frozen parameter aborts with a frozen-violation.
    pub fn step(&mut self, roles: &[Role], opt: &AdamW, t: u64) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| roles.contains(&p.role)) {
            p.adamw_step(opt, t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of the given role.
    pub fn role_hash(&self, role: Role) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.role == role) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out.add(&p.name, p.value.cast(), p.role);
            out.params[id.0].frozen = p.frozen;
        }
        out
    }
}

/// One forward pass: a tape plus lazily-created leaves for parameters.
/// A parameter's leaf requires grad only when gradients are enabled, the
/// parameter is not frozen, and its role is in the trainable set.
pub struct Ctx<'s, S: Scalar> {
    pub tape: Tape<S>,
    store: &'s ParamStore<S>,
    bound: Vec<Option<Var>>,
    trainable: Vec<Role>,
}

impl<'s, S: Scalar> Ctx<'s, S> {
    /// Inference context: nothing requires grad.
    pub fn inference(store: &'s ParamStore<S>) -> Self {
        Self::training(store, &[])
    }

    pub fn training(store: &'s ParamStore<S>, trainable: &[Role]) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: trainable.to_vec(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<S> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let rg = !param.frozen && self.trainable.contains(&param.role);
        let v = self.tape.leaf(param.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of the bound trainable parameters after a backward pass.
    pub fn param_grads(&self, grads: &mut Grads<S>) -> Vec<(ParamId, Tensor<S>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.tape.requires_grad(v) {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    /// Backward from `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<S>)>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self.param_grads(&mut grads))
    }
}
