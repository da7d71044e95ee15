use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// What a backward rule sees: input values, the forward output and the
/// upstream gradient (same length as the output).
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    /// Whether input `i` wants a gradient; rules may skip work otherwise.
    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Recording of one forward pass. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        })
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Record an operation whose output was computed by the caller. The
    /// backward rule returns one optional gradient per input; it is only kept
    /// when some input requires a gradient.
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t>], output: Tensor, backward: F) -> Var<'t>
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let ids: Vec<usize> = inputs
            .iter()
            .map(|v| {
                assert!(std::ptr::eq(v.tape, self), "operand from a different tape");
                v.id
            })
            .collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Node {
            value: Rc::new(output),
            requires_grad,
            inputs: if requires_grad { ids } else { Vec::new() },
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Accumulate d`output`/d`x` into every reachable node that requires a
    /// gradient. Repeated calls add to the stored gradients.
    pub fn backward(&self, output: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(output.tape, self), "output from a different tape");
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got shape {:?}", out.value.shape()),
            ));
        }
        let mut grads = self.grads.borrow_mut();
        grads.resize_with(nodes.len(), || None);
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        pending[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(rule) = &node.backward {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect(),
                    output: &node.value,
                    grad: &g,
                    needs: node.inputs.iter().map(|&i| nodes[i].requires_grad).collect(),
                };
                let contributions = rule(&ctx);
                debug_assert_eq!(contributions.len(), node.inputs.len());
                for (&input, contribution) in node.inputs.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(c.len(), nodes[input].value.len());
                    accumulate(&mut pending[input], c);
                }
            }
            accumulate(&mut grads[id], g);
        }
        Ok(())
    }

    /// Drop all accumulated gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub(crate) fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_ref())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, or `None` if no backward pass reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Some(Tensor::new(self.shape(), g.clone()).expect("gradient matches value shape"))
    }
}
