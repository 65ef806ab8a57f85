use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::diff::float::{lit, Float};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

/// Named model parameters, enumerated in name order.
#[derive(Clone, Debug)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    seed: u64,
}

impl<T: Float> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        ParameterStore { params: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name:?}")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
        }
    }

    /// Overwrites `name` with zeros.
    pub fn zero(&mut self, name: &str) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name:?}")))?;
        t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        Ok(())
    }

    /// Copies every parameter under `from_prefix` in `src` to the same
    /// suffix under `to_prefix` here. Shapes must agree; returns the count.
    pub fn copy_prefix(&mut self, src: &ParameterStore<T>, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in src.iter() {
            let Some(rest) = name.strip_prefix(from_prefix) else { continue };
            let target = format!("{to_prefix}{rest}");
            let dst = self
                .params
                .get_mut(&target)
                .ok_or_else(|| Error::config(format!("no parameter {target:?} to receive {name:?}")))?;
            if dst.shape() != t.shape() {
                return Err(Error::config(format!(
                    "shape mismatch copying {name:?} {:?} into {target:?} {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
            n += 1;
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and values in enumeration order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Seeded parameter initializer.
///
/// Weight matrices draw from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases and layer-norm offsets start at zero, layer-norm gains at one,
/// and embedding tables draw from normal(0, 0.02).
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn weight<T: Float>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| lit(dist.sample(&mut self.rng))).collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("positive extents")
    }

    pub fn embedding<T: Float>(&mut self, rows: usize, dim: usize) -> Tensor<T> {
        let dist = Normal::new(0.0, 0.02).expect("valid normal");
        let data = (0..rows * dim).map(|_| lit(dist.sample(&mut self.rng))).collect();
        Tensor::new(vec![rows, dim], data).expect("positive extents")
    }

    pub fn normal_vector<T: Float>(&mut self, dim: usize, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("valid normal");
        Tensor::vector((0..dim).map(|_| lit(dist.sample(&mut self.rng))).collect())
    }

    pub fn zeros<T: Float>(&mut self, dim: usize) -> Tensor<T> {
        Tensor::zeros(vec![dim])
    }

    pub fn ones<T: Float>(&mut self, dim: usize) -> Tensor<T> {
        Tensor::vector(vec![T::one(); dim])
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}
