//! Named, stream-tagged parameter storage and its binding into a graph.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Which stream owns a parameter: regular (θ), shape (φ) or fusion (γ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamTag {
    Regular,
    Shape,
    Fusion,
}

impl StreamTag {
    pub fn code(self) -> u8 {
        match self {
            StreamTag::Regular => 0,
            StreamTag::Shape => 1,
            StreamTag::Fusion => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StreamTag::Regular),
            1 => Some(StreamTag::Shape),
            2 => Some(StreamTag::Fusion),
            _ => None,
        }
    }
}

impl fmt::Display for StreamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamTag::Regular => "regular",
            StreamTag::Shape => "shape",
            StreamTag::Fusion => "fusion",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub tag: StreamTag,
    pub tensor: Tensor<T>,
}

/// Parameters keyed by unique name. Iteration order is the name order,
/// which keeps serialization and updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: StreamTag, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("parameter store", format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name,
            Param {
                tag,
                tensor: tensor.with_grad(),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn with_tag(&self, tag: StreamTag) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.iter().filter(move |(_, p)| p.tag == tag)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tag: p.tag,
                            tensor: p.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }
}

/// Deterministic initializer shared by the stream constructors.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Conv kernel `[c_out, c_in, k, k]` drawn from N(0, 2/fan_in), plus a
    /// zero bias when requested.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        store: &mut ParameterStore,
        tag: StreamTag,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
    ) -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..c_out * c_in * k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32
            })
            .collect();
        store.insert(format!("{name}.weight"), tag, Tensor::new(&[c_out, c_in, k, k], data)?)?;
        if bias {
            store.insert(format!("{name}.bias"), tag, Tensor::zeros(&[c_out]))?;
        }
        Ok(())
    }

    /// Normalization scale (ones) and shift (zeros).
    pub fn norm(&mut self, store: &mut ParameterStore, tag: StreamTag, name: &str, c: usize) -> Result<()> {
        store.insert(format!("{name}.scale"), tag, Tensor::full(&[c], 1.0))?;
        store.insert(format!("{name}.shift"), tag, Tensor::zeros(&[c]))?;
        Ok(())
    }
}

/// Parameters of a store lazily materialised as graph leaves.
pub struct Bound<'s, T: Element> {
    store: &'s ParameterStore<T>,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'s, T: Element> Bound<'s, T> {
    /// Binds with gradient tracking on every parameter.
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Bound {
            store,
            vars: HashMap::new(),
            trainable: true,
        }
    }

    /// Binds without gradient tracking (inference).
    pub fn frozen(store: &'s ParameterStore<T>) -> Self {
        Bound {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid("parameters", format!("missing parameter `{name}`")))?;
        let mut t = p.tensor.clone();
        t.clear_grad();
        t.requires_grad = self.trainable;
        let v = g.leaf(&t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn optional(&mut self, g: &mut Graph<T>, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.var(g, name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Variables bound so far, by name.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient of every bound parameter after `g.backward`; parameters the
    /// loss did not reach get zeros.
    pub fn gradients(&self, g: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).len()]);
                (name.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("a", StreamTag::Regular, Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", StreamTag::Shape, Tensor::zeros(&[2])).is_err());
        assert!(s.get("a").unwrap().tensor.requires_grad);
    }

    #[test]
    fn tags_round_trip() {
        for t in [StreamTag::Regular, StreamTag::Shape, StreamTag::Fusion] {
            assert_eq!(StreamTag::from_code(t.code()), Some(t));
        }
        assert_eq!(StreamTag::from_code(9), None);
    }

    #[test]
    fn bound_parameters_collect_gradients() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", StreamTag::Fusion, Tensor::new(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        s.insert("unused", StreamTag::Fusion, Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let mut b = Bound::new(&s);
        let w = b.var(&mut g, "w").unwrap();
        assert_eq!(b.var(&mut g, "w").unwrap(), w, "bound once");
        assert!(b.var(&mut g, "nope").is_err());
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        let grads = b.gradients(&g);
        assert_eq!(grads["w"], vec![2.0, 4.0]);
        assert!(!grads.contains_key("unused"));
    }
}
