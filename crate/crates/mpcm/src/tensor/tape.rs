//! The recording tape: append-only operation log plus the reverse walk.

use std::cell::Cell;
use std::cell::RefCell;
use std::rc::Rc;

use super::{Back, Tensor};
use crate::elem::Elem;
use crate::error::{Result, TensorError};

thread_local! {
    static TRACE_NONFINITE: Cell<bool> = const { Cell::new(false) };
}

/// Debug aid: when enabled, the reverse walk reports the first node
/// whose gradient contribution goes non-finite (by the type name of the
/// closure that recorded it) on stderr.
pub fn trace_nonfinite(enable: bool) {
    TRACE_NONFINITE.with(|f| f.set(enable));
}

pub struct Tape<E: Elem> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Elem> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

struct Node<E: Elem> {
    /// Tape node id per input; `None` marks a constant operand.
    inputs: Vec<Option<usize>>,
    back: Back<E>,
    len: usize,
    is_leaf: bool,
    origin: &'static str,
}

struct TapeInner<E: Elem> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn ptr_eq(a: &Tape<E>, b: &Tape<E>) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub(crate) fn record(
        &self,
        inputs: Vec<Option<usize>>,
        len: usize,
        back: Back<E>,
        origin: &'static str,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        let is_leaf = inputs.is_empty();
        inner.nodes.push(Node {
            inputs,
            back,
            len,
            is_leaf,
            origin,
        });
        inner.nodes.len() - 1
    }

    /// Reverse pass from `root` (a scalar node). Visits nodes exactly
    /// once in reverse append order; leaf gradients are kept, transient
    /// gradients are dropped as soon as they have been propagated.
    pub(crate) fn run_backward(&self, root: usize) -> Result<Gradients<E>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.consumed = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(vec![E::ONE]);

        for id in (0..=root).rev() {
            let node = &inner.nodes[id];
            if node.is_leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|input| input.is_some())
                .collect();
            let contributions = (node.back)(&g, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            if TRACE_NONFINITE.with(|f| f.get()) {
                let g_ok = g.iter().all(|v| v.to_f64().is_finite());
                for c in contributions.iter().flatten() {
                    if c.iter().any(|v| !v.to_f64().is_finite()) {
                        eprintln!(
                            "non-finite grad out of node {id} ({}), upstream finite: {g_ok}",
                            node.origin
                        );
                        TRACE_NONFINITE.with(|f| f.set(false));
                        break;
                    }
                }
            }
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let (Some(src), Some(c)) = (input, contrib) else { continue };
                match &mut grads[*src] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), c.len());
                        for (a, b) in acc.iter_mut().zip(c) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }

        // Unreached leaves hold zero.
        for (id, node) in inner.nodes.iter().enumerate() {
            if node.is_leaf && grads[id].is_none() {
                grads[id] = Some(vec![E::ZERO; node.len]);
            }
        }

        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

/// Per-leaf gradients produced by one backward pass.
pub struct Gradients<E: Elem> {
    tape: Tape<E>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Elem> std::fmt::Debug for Gradients<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gradients")
            .field("nodes", &self.grads.len())
            .finish()
    }
}

impl<E: Elem> Gradients<E> {
    /// Gradient for a tensor attached to the tape this pass ran on.
    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        let track = t.track()?;
        if !Tape::ptr_eq(&track.tape, &self.tape) {
            return None;
        }
        self.grads.get(track.node)?.as_deref()
    }

    /// Like [`Gradients::get`] but materializes zeros for a leaf that no
    /// path reached.
    pub fn get_or_zeros(&self, t: &Tensor<E>) -> Vec<E> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![E::ZERO; t.len()],
        }
    }

}
