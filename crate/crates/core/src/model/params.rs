use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters in registration order.
///
/// Values are kept representable in `f32` so that checkpoints (which store
/// 32-bit reals) round-trip exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

pub(crate) fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        round_f32(&mut value);
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// He-style normal initialization with standard deviation `gain/√fan_in`.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "set_param",
                self.values[id.0].shape(),
                value.shape(),
            ));
        }
        round_f32(&mut value);
        self.values[id.0] = value;
        Ok(())
    }

    /// Applies `f` to a value in place, then rounds back to `f32`.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut [f64])) {
        let t = &mut self.values[id.0];
        f(t.data_mut());
        round_f32(t);
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, value) in self.names.iter().zip(&mut self.values) {
            if name.starts_with(prefix) {
                value.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }

    /// Puts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| g.leaf(v.clone(), trainable))
                .collect(),
        )
    }
}

/// Graph variables for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps vars already in a graph, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients after `backward`, zeros for parameters that did not participate.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.0
            .iter()
            .map(|&v| {
                g.grad_tensor(v)
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn values_are_f32_representable() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap());
        assert!(s.value(id).data().iter().all(|&v| v == v as f32 as f64));
        s.update(id, |d| d[0] += 1e-12);
        assert_eq!(s.value(id).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn normal_init_has_fan_in_scale() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = s.add_normal("w", &[64, 50, 3, 3], 450, 2f64.sqrt(), &mut rng);
        let d = s.value(id).data();
        let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        assert!((var - 2.0 / 450.0).abs() < 0.1 * 2.0 / 450.0, "{var}");
        assert_eq!(s.find("w"), Some(id));
        assert_eq!(s.numel(), 64 * 50 * 9);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add_zeros("a", &[1]);
        s.add_zeros("a", &[1]);
    }
}
