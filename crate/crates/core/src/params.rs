//! Named parameter storage and initialization.
//!
//! Master copies live in f64; a forward pass binds them onto a tape at the
//! tape's precision.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Optimizer group: the shared encoder (and tokenizers) vs everything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor<f64>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor<f64>, group: ParamGroup) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::Model(format!("duplicate parameter `{name}`")));
        }
        let (index, _) = self
            .entries
            .insert_full(name.to_string(), ParamEntry { value, group });
        Ok(ParamId(index))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f64> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, name, _)| name.starts_with(prefix))
            .map(|(id, _, _)| id)
    }

    /// Overwrite values by name; every stored name must be present with a
    /// matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<f64>)]) -> Result<()> {
        let mut seen = 0;
        for (name, value) in named {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if entry.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: stored shape {:?}, model expects {:?}",
                    value.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = value.clone();
            seen += 1;
        }
        if seen != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} parameters, model has {}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor<f64>)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.value.clone()))
            .collect()
    }

    /// Register every parameter on `tape` (as trainable leaves when `trainable`).
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Bound> {
        let vars = self
            .entries
            .values()
            .map(|e| tape.leaf(e.value.cast(), trainable))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }

    /// Bind with `provided` supplying the var for some parameters; the rest
    /// enter the tape as constants.
    pub fn bind_with<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        provided: impl Fn(ParamId) -> Option<Var>,
    ) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.values().enumerate() {
            vars.push(match provided(ParamId(i)) {
                Some(v) => v,
                None => tape.constant(e.value.cast())?,
            });
        }
        Ok(Bound { vars })
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients per parameter in store order (zeros where nothing flowed).
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(store.entries.values())
            .map(|(&v, e)| match tape.grad(v) {
                Some(g) => g.iter().map(|x| Scalar::to_f64(*x)).collect(),
                None => vec![0.0; e.value.numel()],
            })
            .collect()
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal(0.0, std))
}

/// Helper that prefixes names and draws from one generator.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Initializer<'_> {
    pub fn add(&mut self, name: &str, value: Tensor<f64>) -> Result<ParamId> {
        self.store.add(name, value, self.group)
    }

    /// `[fan_in, fan_out]` weight and `[fan_out]` bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds> {
        let w = uniform_fan_in(&[fan_in, fan_out], fan_in, self.rng);
        let b = uniform_fan_in(&[fan_out], fan_in, self.rng);
        Ok(LinearIds {
            w: self.add(&format!("{name}.w"), w)?,
            b: self.add(&format!("{name}.b"), b)?,
        })
    }

    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.add(&format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?,
            b: self.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Result<NormIds> {
        Ok(NormIds {
            gamma: self.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: self.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    /// `[c_out, c_in, k, k]` kernel and `[c_out]` bias.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<LinearIds> {
        let fan_in = c_in * k * k;
        let w = uniform_fan_in(&[c_out, c_in, k, k], fan_in, self.rng);
        Ok(LinearIds {
            w: self.add(&format!("{name}.w"), w)?,
            b: self.add(&format!("{name}.b"), Tensor::zeros(&[c_out]))?,
        })
    }
}

/// `x · W + b` for `x[N, fan_in]`.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, ids: LinearIds, x: Var) -> Result<Var> {
    let y = tape.matmul(x, bound.var(ids.w))?;
    Ok(tape.add(y, bound.var(ids.b))?)
}

pub fn norm<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, ids: NormIds, x: Var, eps: f64) -> Result<Var> {
    Ok(tape.layer_norm(x, bound.var(ids.gamma), bound.var(ids.beta), eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_by_name() {
        let mut rng = Rng::new(0);
        let mut store = ParamStore::new();
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Rest,
        };
        let ids = init.linear("fc", 3, 2).unwrap();
        assert_eq!(store.get(ids.w).shape(), &[3, 2]);
        assert_eq!(store.name(ids.b), "fc.b");
        let bound = 1.0 / 3f64.sqrt();
        assert!(store.get(ids.w).data().iter().all(|v| v.abs() <= bound));

        let mut other = store.clone();
        other.get_mut(ids.w).data_mut()[0] = 99.0;
        other.load_named(&store.named()).unwrap();
        assert_eq!(other.get(ids.w), store.get(ids.w));

        assert!(store.add("fc.w", Tensor::zeros(&[1]), ParamGroup::Rest).is_err());
        let bad = vec![("fc.w".to_string(), Tensor::zeros(&[2, 3]))];
        assert!(other.load_named(&bad).is_err());
    }
}
