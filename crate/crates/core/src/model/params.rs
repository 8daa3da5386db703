use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TabsError};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    /// Uniform in `[0, sqrt(6 / fan_in))`.
    HeUniformPositive { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Records parameter declarations while a network is laid out. Layout is
/// separate from allocation so parameter counting never touches memory.
#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// 64-bit FNV-1a, used to give every named parameter its own RNG stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for `(seed, name)`. Identical names under the same seed
/// initialize identically across variants.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn materialize<T: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    let n = spec.numel();
    let data: Vec<T> = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::HeUniform { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = named_rng(seed, &spec.name);
            (0..n)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect()
        }
        Init::HeUniformPositive { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = named_rng(seed, &spec.name);
            (0..n).map(|_| T::from_f64(rng.random_range(0.0..bound))).collect()
        }
        Init::Normal { std } => {
            let mut rng = named_rng(seed, &spec.name);
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape matches data")
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        ParamSet {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tensors: specs.iter().map(|s| materialize(s, seed)).collect(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(TabsError::config("parameter names and tensors differ in count"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(TabsError::config(format!("duplicate parameter name `{n}`")));
            }
        }
        Ok(ParamSet { names, tensors })
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

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_name() {
        let specs = vec![
            ParamSpec {
                name: "a.weight".into(),
                shape: vec![4, 3],
                init: Init::HeUniform { fan_in: 3 },
            },
            ParamSpec {
                name: "b.weight".into(),
                shape: vec![4, 3],
                init: Init::HeUniform { fan_in: 3 },
            },
        ];
        let p1 = ParamSet::<f32>::init(&specs, 7);
        let p2 = ParamSet::<f32>::init(&specs[..1], 7);
        assert_eq!(p1.tensors()[0], p2.tensors()[0]);
        assert_ne!(p1.tensors()[0], p1.tensors()[1]);
        let bound = (6.0f32 / 3.0).sqrt();
        assert!(p1.tensors()[0].data().iter().all(|v| v.abs() <= bound));
        let p3 = ParamSet::<f32>::init(&specs, 8);
        assert_ne!(p1.tensors()[0], p3.tensors()[0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        assert!(ParamSet::from_parts(vec!["x".into(), "x".into()], vec![t.clone(), t]).is_err());
    }
}
