//! Named parameter tensors and gradient sets aligned with them.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initialization rule attached to a declared parameter shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Constant fill.
    Const(f64),
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Glorot-uniform over a `[fan_in × fan_out]` matrix.
    Glorot,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// LSTM bias: zeros except the forget-gate block set to one.
    ForgetBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.names.len() - 1)
    }

    pub fn initialize(specs: &[ParamSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        for s in specs {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Const(c) => vec![T::lit(c); n],
                Init::Uniform(a) => (0..n).map(|_| T::lit(rng.random_range(-a..=a))).collect(),
                Init::Glorot => {
                    let fan_in = s.shape[0] as f64;
                    let fan_out = *s.shape.last().expect("shape") as f64;
                    let a = (6.0 / (fan_in + fan_out)).sqrt();
                    (0..n).map(|_| T::lit(rng.random_range(-a..=a))).collect()
                }
                Init::Normal(sd) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::lit(sd * z)
                    })
                    .collect(),
                Init::ForgetBias => {
                    let h = n / 4;
                    (0..n)
                        .map(|i| if (h..2 * h).contains(&i) { T::one() } else { T::zero() })
                        .collect()
                }
            };
            store.insert(s.name.clone(), Tensor::new(s.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// `self += scale · g`.
    pub fn add_scaled(&mut self, g: &Grads<T>, scale: T) {
        for (t, gv) in self.tensors.iter_mut().zip(&g.0) {
            for (p, &d) in t.data_mut().iter_mut().zip(gv) {
                *p += scale * d;
            }
        }
    }

    /// Flattened values, in store order.
    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| (x - y).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads(store.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect())
    }

    pub fn norm(&self) -> T {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, c: T) {
        self.0.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn add_scaled(&mut self, other: &Grads<T>, c: T) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn dot(&self, other: &Grads<T>) -> T {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(&x, &y)| x * y)
            .sum()
    }

    pub fn flat(&self) -> Vec<T> {
        self.0.iter().flatten().copied().collect()
    }
}
