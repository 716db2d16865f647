//! Named parameter storage and the forward-pass context that binds stored
//! parameters into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Result, SelicError};

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-b, b]` with `b = sqrt(3 / fan_in)`.
    FanInUniform { fan_in: usize },
    Zeros,
    /// Explicit values, used by the factorized prior.
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }
}

/// 64-bit seed derived from a base seed and a label. Stable across
/// platforms and independent of declaration order.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Parameters keyed by canonical name, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<F> = match &spec.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Values(v) => v.iter().map(|&x| F::from_f64(x)).collect(),
                Init::FanInUniform { fan_in } => {
                    let bound = (3.0 / (*fan_in).max(1) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.name));
                    (0..n).map(|_| F::from_f64(rng.random_range(-bound..bound))).collect()
                }
            };
            let t = Tensor::new(&spec.shape, data).expect("param spec sizes are consistent");
            tensors.insert(spec.name.clone(), t);
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors.get(name).ok_or_else(|| SelicError::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// One forward pass: a graph plus the parameters bound into it so far.
pub struct Ctx<'p, F: Scalar> {
    pub g: Graph<F>,
    params: &'p ParamStore<F>,
    bound: HashMap<String, Var>,
}

impl<'p, F: Scalar> Ctx<'p, F> {
    pub fn new(params: &'p ParamStore<F>, grad_enabled: bool) -> Self {
        Self { g: Graph::new(grad_enabled), params, bound: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    /// Binds parameter `name` (once per pass) and returns its node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.g.leaf(t, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.g.value(v)
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    /// Runs the reverse pass and returns gradients by parameter name for
    /// every parameter that took part in the pass.
    pub fn param_grads(&self, root: Var) -> Result<BTreeMap<String, Tensor<F>>> {
        let mut grads: Gradients<F> = self.g.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let shape = self.g.value(v).shape().to_vec();
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(&shape));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_order_independent() {
        let a = ParamSpec::new("a.w", &[4, 3], Init::FanInUniform { fan_in: 3 });
        let b = ParamSpec::new("b.w", &[2], Init::Zeros);
        let s1 = ParamStore::<f32>::initialize(&[a.clone(), b.clone()], 7);
        let s2 = ParamStore::<f32>::initialize(&[b, a], 7);
        assert_eq!(s1, s2);
        let bound = 1.0f32;
        assert!(s1.get("a.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        let s3 = ParamStore::<f32>::initialize(&[ParamSpec::new("a.w", &[4, 3], Init::FanInUniform { fan_in: 3 })], 8);
        assert_ne!(s1.get("a.w").unwrap(), s3.get("a.w").unwrap());
    }
}
