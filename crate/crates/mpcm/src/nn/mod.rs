//! Parameterized layers and the parameter store they draw from.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, Conv2d, ConvSpec, StripConv};
pub use linear::Linear;
pub use norm::{BatchNorm, LayerNorm};
pub use pool::{channel_max, channel_mean, gap, gap_h, gap_w, gmp};
pub use resize::{bilinear_resize, pixel_shuffle, pixel_unshuffle};

use std::cell::RefCell;
use std::collections::HashMap;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Tensor};

/// Fill rule applied when a parameter is registered.
#[derive(Clone, Debug)]
pub enum Init {
    /// Uniform in +-sqrt(1/fan_in).
    FanIn(usize),
    Const(f64),
    /// Explicit per-element values (state-space decay tables etc.).
    Values(Vec<f64>),
}

/// Handle into a [`ModelParams`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry<E: Elem> {
    name: String,
    value: RefCell<Tensor<E>>,
    trainable: bool,
}

/// Ordered name -> tensor map holding every parameter and buffer of a
/// model. Iteration order is registration order and is what the
/// checkpoint manifest, the optimizer state, and initialization draws
/// all key off, so it is stable by construction.
pub struct ModelParams<E: Elem> {
    entries: Vec<Entry<E>>,
    index: HashMap<String, usize>,
    rng: Rng,
}

impl<E: Elem> ModelParams<E> {
    pub fn new(seed: u64) -> Self {
        ModelParams {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: Rng::new(seed),
        }
    }

    fn register(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let value = match init {
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::rand_uniform(&mut self.rng, shape, -bound, bound)
            }
            Init::Const(c) => Tensor::full(shape, E::from_f64(c)),
            Init::Values(vals) => {
                let data: Vec<E> = vals.iter().map(|&v| E::from_f64(v)).collect();
                Tensor::from_vec(shape, data).expect("init value length")
            }
        };
        self.entries.push(Entry {
            name: name.clone(),
            value: RefCell::new(value),
            trainable,
        });
        let id = ParamId(self.entries.len() - 1);
        self.index.insert(name, id.0);
        id
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        self.register(name.into(), shape, init, true)
    }

    /// Registers a non-trainable buffer (running statistics etc.).
    pub fn buffer(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        self.register(name.into(), shape, init, false)
    }

    pub fn get(&self, id: ParamId) -> Tensor<E> {
        self.entries[id.0].value.borrow().clone()
    }

    pub fn set(&self, id: ParamId, t: Tensor<E>) {
        let mut slot = self.entries[id.0].value.borrow_mut();
        assert_eq!(slot.shape(), t.shape(), "set() must preserve shape");
        *slot = t.detach();
    }

    pub fn zero(&self, id: ParamId) {
        let shape = self.entries[id.0].value.borrow().shape().to_vec();
        self.set(id, Tensor::zeros(shape));
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count across all entries.
    pub fn n_scalars(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.value.borrow().len())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward-pass view of a parameter store.
///
/// In train mode parameters come out attached to the tape (one leaf per
/// parameter per pass, however often it is reused) and batch-norm layers
/// may update their running-stat buffers through [`ParamCtx::set_buffer`].
pub struct ParamCtx<'a, E: Elem> {
    params: &'a ModelParams<E>,
    tape: Option<&'a Tape<E>>,
    mode: Mode,
    tracked: RefCell<HashMap<usize, Tensor<E>>>,
}

impl<'a, E: Elem> ParamCtx<'a, E> {
    pub fn train(params: &'a ModelParams<E>, tape: &'a Tape<E>) -> Self {
        ParamCtx {
            params,
            tape: Some(tape),
            mode: Mode::Train,
            tracked: RefCell::new(HashMap::new()),
        }
    }

    pub fn eval(params: &'a ModelParams<E>) -> Self {
        ParamCtx {
            params,
            tape: None,
            mode: Mode::Eval,
            tracked: RefCell::new(HashMap::new()),
        }
    }

    /// Train-mode statistics without recording gradients (used by
    /// evaluation passes that still want batch statistics, e.g. tests).
    pub fn train_detached(params: &'a ModelParams<E>) -> Self {
        ParamCtx {
            params,
            tape: None,
            mode: Mode::Train,
            tracked: RefCell::new(HashMap::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ModelParams<E> {
        self.params
    }

    /// Current value of a parameter, attached to the pass tape when one
    /// is present and the entry is trainable.
    pub fn get(&self, id: ParamId) -> Tensor<E> {
        if let Some(tape) = self.tape {
            if self.params.is_trainable(id) {
                let mut cache = self.tracked.borrow_mut();
                return cache
                    .entry(id.0)
                    .or_insert_with(|| tape.leaf(&self.params.get(id)))
                    .clone();
            }
        }
        self.params.get(id)
    }

    /// Buffer value; never tracked.
    pub fn buffer(&self, id: ParamId) -> Tensor<E> {
        self.params.get(id)
    }

    /// Writes back a buffer (running statistics). Only meaningful in
    /// train mode; caller guards.
    pub fn set_buffer(&self, id: ParamId, t: Tensor<E>) {
        debug_assert!(!self.params.is_trainable(id));
        self.params.set(id, t);
    }

    /// Gradient per trainable entry after a backward pass; entries that
    /// were never touched (or not reached by the loss) yield zeros.
    pub fn gradients(&self, grads: &Gradients<E>) -> Vec<(ParamId, Vec<E>)> {
        let cache = self.tracked.borrow();
        self.params
            .ids()
            .filter(|id| self.params.is_trainable(*id))
            .map(|id| {
                let g = match cache.get(&id.0) {
                    Some(leaf) => grads.get_or_zeros(leaf),
                    None => vec![E::ZERO; self.params.get(id).len()],
                };
                (id, g)
            })
            .collect()
    }
}
