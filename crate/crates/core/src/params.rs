//! Named learnable arrays with a frozen/trainable partition.
//!
//! Ownership decides the tag: everything belonging to the foundation segmenter
//! or the semantic encoder is frozen, everything else trains. Frozen entries
//! are bound onto a [`Graph`] as constants, so no gradient can ever reach them.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Frozen,
    Trainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    ImageEncoder,
    PromptEncoder,
    MaskDecoder,
    SemanticEncoder,
    Mcfm,
    MAdapter,
    PromptGen,
    CoarseHead,
}

impl Owner {
    pub const ALL: [Owner; 8] = [
        Owner::ImageEncoder,
        Owner::PromptEncoder,
        Owner::MaskDecoder,
        Owner::SemanticEncoder,
        Owner::Mcfm,
        Owner::MAdapter,
        Owner::PromptGen,
        Owner::CoarseHead,
    ];

    pub fn tag(self) -> Tag {
        match self {
            Owner::ImageEncoder
            | Owner::PromptEncoder
            | Owner::MaskDecoder
            | Owner::SemanticEncoder => Tag::Frozen,
            Owner::Mcfm | Owner::MAdapter | Owner::PromptGen | Owner::CoarseHead => Tag::Trainable,
        }
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Owner::ImageEncoder => "image_encoder",
            Owner::PromptEncoder => "prompt_encoder",
            Owner::MaskDecoder => "mask_decoder",
            Owner::SemanticEncoder => "semantic_encoder",
            Owner::Mcfm => "mcfm",
            Owner::MAdapter => "madapter",
            Owner::PromptGen => "prompt_gen",
            Owner::CoarseHead => "coarse_head",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub owner: Owner,
    pub tag: Tag,
    pub value: Rc<Tensor>,
}

/// How to bind registry entries onto a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable entries become gradient leaves.
    Train,
    /// Everything is a constant.
    Inference,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, owner: Owner, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            owner,
            tag: owner.tag(),
            value: Rc::new(value),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|e| e.value.as_ref())
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    /// Replace a value in place, keeping its shape, owner and tag.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}`: expected {:?}, got {:?}",
                self.entries[i].value.shape(),
                value.shape()
            )));
        }
        self.entries[i].value = Rc::new(value);
        Ok(())
    }

    /// Mutable access to a trainable value; frozen entries are refused.
    pub fn trainable_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let e = &mut self.entries[i];
        if e.tag == Tag::Frozen {
            return Err(Error::invalid(format!("parameter `{name}` is frozen")));
        }
        Ok(Rc::make_mut(&mut e.value))
    }

    pub fn names_with(&self, tag: Tag) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.tag == tag)
            .map(|e| e.name.as_str())
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn count_owner(&self, owner: Owner) -> usize {
        self.entries
            .iter()
            .filter(|e| e.owner == owner)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Snapshot of every value, for bitwise before/after comparisons.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), (*e.value).clone()))
            .collect()
    }

    pub fn bind<'a>(&'a self, graph: &'a Graph, mode: BindMode) -> Binding<'a> {
        Binding {
            graph,
            registry: self,
            mode,
            vars: RefCell::new(BTreeMap::new()),
        }
    }
}

/// Lazily materialises registry entries on a graph.
pub struct Binding<'a> {
    graph: &'a Graph,
    registry: &'a ParameterRegistry,
    mode: BindMode,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binding<'a> {
    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let entry = self
            .registry
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let v = match (self.mode, entry.tag) {
            (BindMode::Train, Tag::Trainable) => self.graph.variable((*entry.value).clone()),
            _ => self.graph.constant((*entry.value).clone()),
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Bind `name` to an existing graph value instead of the stored one.
    /// Gradient checks use this to perturb parameters from outside.
    pub fn insert(&self, name: &str, v: Var) {
        self.vars.borrow_mut().insert(name.to_string(), v);
    }

    pub fn has(&self, name: &str) -> bool {
        self.registry.get(name).is_some()
    }

    /// Gradients of every bound trainable entry, keyed by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Uniform `(-bound, bound)` with `bound = 1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}
