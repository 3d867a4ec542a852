//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use wmlab_tensor::{Element, Tape, Tensor, Var};

use crate::error::{contract_err, Result};
use crate::noise::keyed_rng;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Xavier-uniform over a `(fan_in, fan_out)` matrix.
    Xavier,
    Normal(f64),
}

/// Ordered collection of named tensors. Order is insertion order, which is
/// also the checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract_err!("duplicate parameter {name}"));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Creates a parameter from a deterministic stream keyed by its position.
    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) -> Result<usize> {
        let n: usize = shape.iter().product();
        let mut rng = keyed_rng(seed, &[self.names.len() as u64]);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    _ => return Err(contract_err!("xavier init needs a matrix, got {:?}", shape)),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| contract_err!("{e}"))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        self.insert(name, Tensor::from_f64(shape.to_vec(), &values)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of one store recorded on a tape, addressed by store index.
#[derive(Debug, Clone)]
pub struct Bound<'t, T: Element> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Wraps externally created variables, one per store entry in order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: usize) -> Var<'t, T> {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_names_unique() {
        let mut a = ParamStore::<f32>::new();
        a.init(3, "w", &[4, 5], Init::Xavier).unwrap();
        a.init(3, "b", &[5], Init::Zeros).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.init(3, "w", &[4, 5], Init::Xavier).unwrap();
        b.init(3, "b", &[5], Init::Zeros).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.numel(), 25);
        assert!(a.insert("w", Tensor::zeros([1])).is_err());
        let bound = (6.0f64 / 9.0).sqrt() as f32;
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }
}
