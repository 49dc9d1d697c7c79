//! Named parameter registry.
//!
//! Models register tensors here under dotted names ("enc.blk0.attn.wq"); a
//! [`ParamSet`] can then be bound into any [`Graph`] as gradient leaves, with
//! freezing expressed as name-prefix predicates at bind time. Iteration order
//! is the BTreeMap name order, so optimizer walks and serialization are
//! deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter is filled at registration time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform { lo: f64, hi: f64 },
    Zeros,
    /// Identity transform: ones for rank-1 (norm scales), a diagonal of ones
    /// for rank-2.
    IdentityLike,
}

/// Uniform bounds +-1/sqrt(fan_in), the usual dense-layer default.
pub fn uniform_fan_in(fan_in: usize) -> Init {
    assert!(fan_in > 0, "uniform_fan_in: zero fan_in");
    let b = 1.0 / (fan_in as f64).sqrt();
    Init::Uniform { lo: -b, hi: b }
}

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub init: Init,
}

fn materialize<S: Scalar>(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor<S> {
    match init {
        Init::Uniform { lo, hi } => Tensor::from_fn(shape, |_| rng.uniform::<S>(lo, hi)),
        Init::Zeros => Tensor::zeros(shape),
        Init::IdentityLike => match shape.len() {
            1 => Tensor::filled(shape, S::one()),
            2 => Tensor::from_fn(shape, |i| {
                let (r, c) = (i / shape[1], i % shape[1]);
                if r == c {
                    S::one()
                } else {
                    S::zero()
                }
            }),
            _ => Tensor::zeros(shape),
        },
    }
}

#[derive(Clone)]
pub struct ParamSet<S: Scalar> {
    map: BTreeMap<String, Parameter<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    /// Create and store a parameter. Names must be unique.
    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut Rng,
    ) -> Result<()> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("parameter {name}: zero extent in {shape:?}")));
        }
        if self.map.contains_key(name) {
            return Err(Error::Consistency(format!("duplicate parameter name {name}")));
        }
        let tensor = materialize(shape, init, rng);
        self.map.insert(name.to_string(), Parameter { name: name.to_string(), tensor, init });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.map.get(name).ok_or_else(|| Error::Consistency(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.map.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.map.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.tensor.numel()).sum()
    }

    /// Bind every parameter into `g`; `trainable` decides per name whether the
    /// leaf is a gradient leaf.
    pub fn bind_where(&self, g: &mut Graph<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = BTreeMap::new();
        for p in self.map.values() {
            let v = g.leaf(p.tensor.clone(), trainable(&p.name));
            vars.insert(p.name.clone(), v);
        }
        Bound { vars }
    }

    /// All parameters trainable.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        self.bind_where(g, |_| true)
    }

    /// All parameters constant (inference / evaluation graphs).
    pub fn bind_const(&self, g: &mut Graph<S>) -> Bound {
        self.bind_where(g, |_| false)
    }

    /// Trainable except names matching any of `frozen_prefixes`.
    pub fn bind_frozen(&self, g: &mut Graph<S>, frozen_prefixes: &[String]) -> Bound {
        self.bind_where(g, |name| !frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())))
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter { name: p.name.clone(), tensor: p.tensor.cast(), init: p.init },
                    )
                })
                .collect(),
        }
    }

    /// True when every tensor matches element-for-element at the bit level.
    pub fn bit_eq(&self, other: &ParamSet<S>) -> bool {
        if self.map.len() != other.map.len() {
            return false;
        }
        self.map.iter().zip(other.map.iter()).all(|((ka, pa), (kb, pb))| {
            ka == kb
                && pa.tensor.shape() == pb.tensor.shape()
                && pa
                    .tensor
                    .data()
                    .iter()
                    .zip(pb.tensor.data())
                    .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        })
    }
}

/// Graph handles for one bound ParamSet.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Consistency(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = Rng::new(0);
        ps.register("w", &[2, 2], Init::Zeros, &mut rng).unwrap();
        assert!(ps.register("w", &[2, 2], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = Rng::new(0);
        assert!(ps.register("w", &[2, 0], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn uniform_respects_bounds_and_seed() {
        let mut a = ParamSet::<f64>::new();
        let mut b = ParamSet::<f64>::new();
        let mut r1 = Rng::new(99);
        let mut r2 = Rng::new(99);
        a.register("w", &[16], Init::Uniform { lo: -0.5, hi: 0.5 }, &mut r1).unwrap();
        b.register("w", &[16], Init::Uniform { lo: -0.5, hi: 0.5 }, &mut r2).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.get("w").unwrap().tensor.data().iter().all(|&v| (-0.5..0.5).contains(&v)));
    }

    #[test]
    fn identity_like_rank2_is_diagonal() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(0);
        ps.register("m", &[2, 3], Init::IdentityLike, &mut rng).unwrap();
        assert_eq!(ps.get("m").unwrap().tensor.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bind_frozen_marks_leaves() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = Rng::new(0);
        ps.register("enc.w", &[2], Init::Zeros, &mut rng).unwrap();
        ps.register("dec.w", &[2], Init::Zeros, &mut rng).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = ps.bind_frozen(&mut g, &["enc.".to_string()]);
        assert!(!g.requires_grad(bound.var("enc.w").unwrap()));
        assert!(g.requires_grad(bound.var("dec.w").unwrap()));
    }

    #[test]
    fn fan_in_bounds() {
        let init = uniform_fan_in(16);
        assert_eq!(init, Init::Uniform { lo: -0.25, hi: 0.25 });
    }
}
