//! Named parameter storage and tape binding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// How a parameter is filled on first creation.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Variance-preserving uniform over (-sqrt(3/fan_in), sqrt(3/fan_in)).
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// All parameters of a model, keyed by unique name. Iteration order is the
/// name order, which keeps every pass over the store deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Parameter<T>>,
    seed: u64,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn insert(&mut self, p: Parameter<T>) {
        self.params.insert(p.name.clone(), p);
    }

    /// Fetch a parameter, creating and initializing it on first use. The
    /// init RNG is seeded from (store seed, name), so values do not depend
    /// on creation order.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> crate::error::Result<&Parameter<T>> {
        if !self.params.contains_key(name) {
            let value = match init {
                Init::FanInUniform { fan_in } => {
                    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                    let mut rng =
                        ChaCha20Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a64(name.as_bytes())));
                    Tensor::uniform(shape.to_vec(), bound, &mut rng)?
                }
                Init::Zeros => Tensor::zeros(shape.to_vec())?,
                Init::Ones => Tensor::ones(shape.to_vec())?,
            };
            let grad = Tensor::zeros(shape.to_vec())?;
            self.params.insert(
                name.to_string(),
                Parameter {
                    name: name.to_string(),
                    value,
                    grad,
                },
            );
        }
        let p = &self.params[name];
        if p.value.shape() != shape {
            return Err(crate::error::Error::ParamShape {
                name: name.to_string(),
                have: p.value.shape().to_vec(),
                want: shape.to_vec(),
            });
        }
        Ok(p)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }
}

/// Tracks which tape leaf each parameter was bound to during one forward
/// pass, so gradients can be routed back by name afterwards.
#[derive(Default)]
pub struct Binder {
    bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: Vec::new() }
    }

    /// Bind (creating if needed) a named parameter as a tracked tape leaf.
    pub fn bind<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> crate::error::Result<Var> {
        let value = store
            .get_or_init(name, shape, init)?
            .value
            .clone()
            .tracked();
        let var = tape.leaf(value);
        self.bound.push((name.to_string(), var));
        Ok(var)
    }

    /// Copy gradients from a backward pass into the store. Parameters the
    /// loss never touched get zero gradients.
    pub fn harvest<T: Scalar>(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        store.zero_grads();
        for (name, var) in &self.bound {
            if let Some(g) = grads.get(*var) {
                let p = store.get_mut(name).expect("bound param exists");
                debug_assert_eq!(p.grad.shape(), g.shape());
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += *src;
                }
            }
        }
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }
}
