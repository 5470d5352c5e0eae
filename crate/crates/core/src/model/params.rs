use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors in a fixed declared order.
///
/// The order is part of the checkpoint format and of the tape binding: the
/// `Var`s returned by [`Params::bind`] line up index-for-index with the
/// entries here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Replaces values with `loaded`, which must have the same names and
    /// shapes in the same order.
    pub fn load_from(&mut self, loaded: Vec<(String, Tensor)>) -> Result<()> {
        if loaded.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                loaded.len()
            )));
        }
        for ((name, tensor), (lname, ltensor)) in self.entries.iter_mut().zip(loaded) {
            if *name != lname {
                return Err(Error::Format(format!("expected parameter `{name}`, found `{lname}`")));
            }
            if tensor.shape() != ltensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    ltensor.shape(),
                    tensor.shape()
                )));
            }
            *tensor = ltensor;
        }
        Ok(())
    }
}

/// Standard transformer initialisation: truncated normal (std 0.02) for
/// weights and tokens, zeros for biases, ones for layer-norm gains.
pub(crate) struct Init {
    rng: SeededRng,
}

impl Init {
    pub(crate) const STD: f64 = 0.02;

    pub(crate) fn new(seed: u64) -> Self {
        Self { rng: SeededRng::new(seed) }
    }

    pub(crate) fn normal(&mut self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.truncated_normal(Self::STD)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    pub(crate) fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::zeros(shape).expect("init shape")
    }

    pub(crate) fn ones(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::full(shape, 1.0).expect("init shape")
    }
}
