//! Dense row-major tensors with tape-based reverse-mode autodiff.
//!
//! A [`Tensor`] is an immutable shape + `Arc` data buffer. Operations
//! produce new tensors; when any operand is attached to a [`Tape`], the
//! operation records a backward rule so [`Tensor::backward`] can later
//! propagate gradients to every attached leaf.

mod ops;
mod tape;

pub use tape::{trace_nonfinite, Gradients, Tape};

use std::rc::Rc;
use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::rng::Rng;

#[derive(Clone)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    track: Option<Track<E>>,
}

#[derive(Clone)]
pub(crate) struct Track<E: Elem> {
    pub(crate) tape: Tape<E>,
    pub(crate) node: usize,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<E: Elem> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            track: None,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
            track: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
            track: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, E::ZERO)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, E::ONE)
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n = numel(&shape);
        let data: Vec<E> = (0..n).map(&mut f).collect();
        Tensor {
            shape,
            data: Arc::new(data),
            track: None,
        }
    }

    /// Uniform draws in [lo, hi), consumed in row-major order.
    pub fn rand_uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        Self::from_fn(shape, |_| E::from_f64(rng.range_f64(lo, hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at a full multi-index (tests and oracles).
    pub fn at(&self, idx: &[usize]) -> E {
        assert_eq!(idx.len(), self.rank());
        let strides = strides_of(&self.shape);
        let mut off = 0;
        for (i, (&v, &s)) in idx.iter().zip(strides.iter()).enumerate() {
            assert!(v < self.shape[i]);
            off += v * s;
        }
        self.data[off]
    }

    /// Same values, no tape attachment.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            track: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.track.is_some()
    }

    pub(crate) fn track(&self) -> Option<&Track<E>> {
        self.track.as_ref()
    }

    pub(crate) fn with_track(&self, track: Track<E>) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            track: Some(track),
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    /// Records `out = op(inputs)` on the tape of the first tracked input.
    ///
    /// `back` receives the upstream gradient plus a mask saying which
    /// inputs need gradients, and returns one `Some(grad)` per needed
    /// input (aligned with `inputs`). Backward closures must capture raw
    /// data `Arc`s, never tracked tensors, to avoid tape cycles.
    pub(crate) fn from_op(
        inputs: &[&Tensor<E>],
        shape: Vec<usize>,
        data: Vec<E>,
        back: impl Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Tensor<E> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut tape: Option<Tape<E>> = None;
        for t in inputs {
            if let Some(tr) = &t.track {
                match &tape {
                    None => tape = Some(tr.tape.clone()),
                    Some(existing) => debug_assert!(
                        Tape::ptr_eq(existing, &tr.tape),
                        "operands recorded on different tapes"
                    ),
                }
            }
        }
        let out = Tensor {
            shape,
            data: Arc::new(data),
            track: None,
        };
        match tape {
            None => out,
            Some(tape) => {
                let ids: Vec<Option<usize>> =
                    inputs.iter().map(|t| t.track.as_ref().map(|tr| tr.node)).collect();
                let origin = std::any::type_name_of_val(&back);
                let node = tape.record(ids, out.len(), Box::new(back), origin);
                out.with_track(Track { tape, node })
            }
        }
    }

    /// Runs reverse-mode accumulation from this scalar back to every
    /// leaf on its tape. Consumes the tape: a second call errors.
    pub fn backward(&self) -> Result<Gradients<E>> {
        let track = self.track.as_ref().ok_or(TensorError::DetachedBackward)?;
        if self.len() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.shape.clone(),
            });
        }
        track.tape.run_backward(track.node)
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.track.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

/// Leaves can only be created through a tape handle.
impl<E: Elem> Tape<E> {
    /// Attaches `t` to this tape as a differentiable leaf.
    pub fn leaf(&self, t: &Tensor<E>) -> Tensor<E> {
        let node = self.record(vec![], t.len(), Box::new(|_, _| vec![]), "leaf");
        t.detach().with_track(Track {
            tape: self.clone(),
            node,
        })
    }
}

pub(crate) type Back<E> = Box<dyn Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>>>;

#[allow(unused)]
fn _assert_rc_not_send(_: Rc<()>) {}
