use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdsnet_tensor::{Element, Tape, Tensor, Var};

use super::config::ParamSpec;
use super::ModelError;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Which parameters a tape should see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Encoder,
    Fusion,
    All,
}

impl Section {
    fn contains(self, name: &str) -> bool {
        match self {
            Section::Encoder => name.starts_with("enc."),
            Section::Fusion => name.starts_with("fusion."),
            Section::All => true,
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let mut index = HashMap::with_capacity(entries.len());
        let (names, values): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(ModelError::Params(format!("duplicate parameter {n:?}")));
            }
        }
        Ok(ParamStore { names, values, index })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero
    /// biases. Values are drawn in f64 so both precisions start identical.
    pub(crate) fn init(specs: &[ParamSpec], seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = specs
            .iter()
            .map(|s| {
                let n: usize = s.dims.iter().product();
                let data: Vec<f64> = match s.fans {
                    Some((fan_in, fan_out)) => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
                    }
                    None => vec![0.0; n],
                };
                Ok((s.name.clone(), Tensor::from_f64(s.dims.clone(), &data)?))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Self::from_named(entries)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }

    /// Records the parameters of `section` on `tape`, as trainable leaves or
    /// as constants.
    pub fn bind(&self, tape: &mut Tape<T>, section: Section, trainable: bool) -> Result<Bound<'_>, ModelError> {
        let mut vars = vec![None; self.len()];
        for (i, (name, value)) in self.iter().enumerate() {
            if section.contains(name) {
                vars[i] = Some(tape.leaf(value.clone(), trainable)?);
            }
        }
        Ok(Bound { names: &self.names, index: &self.index, vars })
    }

    /// Wraps vars that were recorded by the caller, one per parameter in
    /// store order.
    pub fn bound_from(&self, vars: &[Var]) -> Result<Bound<'_>, ModelError> {
        if vars.len() != self.len() {
            return Err(ModelError::Params(format!("{} vars for {} parameters", vars.len(), self.len())));
        }
        Ok(Bound { names: &self.names, index: &self.index, vars: vars.iter().copied().map(Some).collect() })
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'a> {
    names: &'a [String],
    index: &'a HashMap<String, usize>,
    vars: Vec<Option<Var>>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .and_then(|&i| self.vars[i])
            .ok_or_else(|| ModelError::Params(format!("parameter {name:?} is not bound on this tape")))
    }

    /// `(store index, var)` for every bound parameter.
    pub fn vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }
}
