//! Named parameter arrays with stable registration order and optimizer grouping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoders, decoder, attribute MLP — the generation pathway (Adam).
    Generation,
    /// Prototype embedder, feature head, classifier, mixing weight (SGD).
    Feature,
    /// Discriminators (their own Adam).
    Discriminator,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Generation => 1,
            ParamGroup::Feature => 2,
            ParamGroup::Discriminator => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<ParamGroup> {
        match code {
            1 => Some(ParamGroup::Generation),
            2 => Some(ParamGroup::Feature),
            3 => Some(ParamGroup::Discriminator),
            _ => None,
        }
    }
}

/// Index of a parameter inside a [`ParamSet`]; stable for the life of the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<S> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<S>,
}

/// An ordered, name-indexed collection of parameter tensors. Registration
/// order is the serialization and optimizer-state order, so it must be
/// deterministic (network builders register in a fixed sequence).
pub struct ParamSet<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, value: Tensor<S>) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name: name.to_string(), group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].group == group)
            .map(ParamId)
            .collect()
    }

    /// Replaces values from another set, matching by name; shapes must agree.
    pub fn load_values(&mut self, other: &ParamSet<S>) -> Result<(), String> {
        if self.entries.len() != other.entries.len() {
            return Err(format!(
                "parameter count mismatch: expected {}, found {}",
                self.entries.len(),
                other.entries.len()
            ));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name {
                return Err(format!(
                    "parameter name mismatch: expected {}, found {}",
                    mine.name, theirs.name
                ));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(format!(
                    "parameter {} shape mismatch: expected {:?}, found {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.value.shape()
                ));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Leaf handles for every parameter of a set, bound into one graph.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Copies every parameter into `graph` as a leaf (with or without gradients).
pub fn bind<S: Scalar>(graph: &mut Graph<S>, params: &ParamSet<S>, needs_grad: bool) -> Binding {
    let vars = params
        .entries()
        .iter()
        .map(|e| graph.leaf(e.value.clone(), needs_grad))
        .collect();
    Binding { vars }
}

/// He-uniform initialization for a conv weight `[kh, kw, cin, cout]` or a
/// linear weight `[din, dout]` (fan-in = product of all but the last axis).
pub fn he_uniform<S: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_order_is_stable() {
        let mut set = ParamSet::<f32>::new();
        let a = set.register("a.w", ParamGroup::Generation, Tensor::zeros(vec![2]));
        let b = set.register("b.w", ParamGroup::Feature, Tensor::zeros(vec![3]));
        assert_eq!(set.name(a), "a.w");
        assert_eq!(set.name(b), "b.w");
        assert_eq!(set.ids_in_group(ParamGroup::Feature), vec![b]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::<f32>::new();
        set.register("w", ParamGroup::Generation, Tensor::zeros(vec![1]));
        set.register("w", ParamGroup::Generation, Tensor::zeros(vec![1]));
    }

    #[test]
    fn load_values_rejects_shape_mismatch() {
        let mut a = ParamSet::<f32>::new();
        a.register("w", ParamGroup::Generation, Tensor::zeros(vec![2]));
        let mut b = ParamSet::<f32>::new();
        b.register("w", ParamGroup::Generation, Tensor::zeros(vec![3]));
        let err = a.load_values(&b).unwrap_err();
        assert!(err.contains("shape mismatch"), "{err}");
    }

    #[test]
    fn he_uniform_is_seed_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let t1: Tensor<f64> = he_uniform(vec![3, 3, 4, 8], &mut r1);
        let t2: Tensor<f64> = he_uniform(vec![3, 3, 4, 8], &mut r2);
        assert_eq!(t1.data(), t2.data());
        let bound = (6.0f64 / (3.0 * 3.0 * 4.0)).sqrt();
        assert!(t1.data().iter().all(|v| v.abs() <= bound));
    }
}
