//! Named parameter storage shared by model construction, the optimizer, and
//! checkpointing.
//!
//! Model builders register parameters by hierarchical dotted name (for
//! example `stage1.s1.enc0.conv0.weight`); initialization is drawn from a
//! dedicated deterministic stream per name, so adding or reordering other
//! parameters never shifts anyone's initial values. Binding a store onto a
//! tape produces one leaf tensor per parameter with `requires_grad` equal to
//! its `trainable` flag; the trainer reads gradients back off those leaves.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng;
use crate::shape::Shape;
use crate::tensor::{Tape, Tensor};

/// Index of a parameter within its store; stable across binds and
/// checkpoint round-trips (registration order defines it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// How to fill a freshly registered parameter.
#[derive(Clone, Debug)]
pub enum Init {
    /// Normal with Kaiming fan-in std: sqrt(2 / fan_in).
    KaimingNormal { fan_in: usize },
    Zeros,
    Constant(f32),
    /// Explicit values (length must match the shape).
    Given(Vec<f32>),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
    pub master_seed: u64,
}

impl ParamStore {
    pub fn new(master_seed: u64) -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new(), master_seed }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: Shape,
        init: Init,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name: {name}")));
        }
        let n = shape.numel();
        let data = match init {
            Init::KaimingNormal { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::Contract(format!("{name}: zero fan-in")));
                }
                let mut r = rng::stream(self.master_seed, &format!("init:{name}"), 0);
                let std = rng::kaiming_std(fan_in);
                let mut v = vec![0.0f32; n];
                rng::fill_normal(&mut r, std, &mut v);
                v
            }
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Given(v) => {
                if v.len() != n {
                    return Err(Error::Contract(format!(
                        "{name}: init data length {} != shape numel {n}",
                        v.len()
                    )));
                }
                v
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, trainable });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total scalar count (all parameters).
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.shape.numel()).sum()
    }

    /// Scalar count over trainable parameters only.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.shape.numel()).sum()
    }

    pub fn set_data(&mut self, id: ParamId, data: Vec<f32>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if data.len() != e.shape.numel() {
            return Err(Error::Contract(format!(
                "{}: replacement data length {} != shape numel {}",
                e.name,
                data.len(),
                e.shape.numel()
            )));
        }
        e.data = data;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Mark every parameter whose name starts with `prefix` (non-)trainable.
    /// Returns how many entries matched.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut hits = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                hits += 1;
            }
        }
        hits
    }

    /// Copy values from `other` into this store wherever both the name and
    /// the shape match; returns the list of copied names. Used to seed a
    /// cascade stage from a converged earlier stage.
    pub fn adopt_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for e in &mut self.entries {
            if let Some(src) = other.lookup(&e.name) {
                let s = other.entry(src);
                if s.shape == e.shape {
                    e.data = s.data.clone();
                    copied.push(e.name.clone());
                }
            }
        }
        copied
    }

    /// Overwrite every `.s2.` parameter with its `.s1.` twin (same name with
    /// the stream segment swapped). Test scaffolding for degeneracy checks
    /// on weight-tied streams. Errors if a twin is missing or shaped
    /// differently.
    pub fn tie_streams(&mut self) -> Result<()> {
        let mut updates: Vec<(ParamId, Vec<f32>)> = Vec::new();
        for (id, e) in self.iter() {
            if let Some(pos) = e.name.find(".s2.") {
                let twin = format!("{}.s1.{}", &e.name[..pos], &e.name[pos + 4..]);
                let src = self
                    .lookup(&twin)
                    .ok_or_else(|| Error::Contract(format!("{}: no stream twin {twin}", e.name)))?;
                let s = self.entry(src);
                if s.shape != e.shape {
                    return Err(Error::Contract(format!(
                        "{}: twin {twin} has shape {} != {}",
                        e.name, s.shape, e.shape
                    )));
                }
                updates.push((id, s.data.clone()));
            }
        }
        for (id, data) in updates {
            self.entries[id.0].data = data;
        }
        Ok(())
    }

    /// Materialize every parameter as a leaf on `tape`; `requires_grad`
    /// follows the `trainable` flag, so frozen stages stay off the gradient
    /// path entirely.
    pub fn bind<T: Element>(&self, tape: &Tape<T>) -> Result<Bound<T>> {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let data = e.data.iter().map(|&v| T::from_f32(v)).collect();
                tape.leaf(e.shape.clone(), data, e.trainable)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { tensors })
    }
}

/// Per-tape materialization of a store: one leaf per parameter, in
/// registration order.
pub struct Bound<T: Element> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    /// Gradient of one parameter after a backward pass, converted to f32;
    /// `None` when the parameter is frozen or unused by the loss.
    pub fn grad_f32(&self, id: ParamId) -> Option<Vec<f32>> {
        self.tensors[id.0].grad().map(|g| g.iter().map(|&v| Element::to_f64(v) as f32).collect())
    }
}
