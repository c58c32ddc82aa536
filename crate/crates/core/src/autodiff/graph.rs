//! Tape of recorded operations and reverse-mode gradient propagation.
//!
//! Every forward operation appends a node holding its output value and a
//! boxed [`Op`] that knows how to map the output gradient back onto its
//! inputs. Nodes are appended in execution order, so the tape is already a
//! topological order and the backward pass simply walks it in reverse.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Backward rule of a recorded operation.
pub trait Op<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the gradient of the
    /// output. Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;

    /// True when the forward result depends on random draws.
    fn is_stochastic(&self) -> bool {
        false
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn Op<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
    label: Option<String>,
}

/// Batch statistics emitted by a train-mode batch-norm layer, to be folded
/// into the owning model's running statistics once the step is committed.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub slot: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    param_nodes: HashMap<ParamId, NodeId>,
    batch_stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// Graph whose stochastic layers draw from a stream seeded with `seed`.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_nodes: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Input whose gradient is retained by [`Graph::backward`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
            param: None,
            label: None,
        });
        id
    }

    /// Node carrying a parameter's current value. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let p = store.get(id);
        let value = Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("parameter shape");
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: p.trainable,
            param: Some(id),
            label: Some(p.name.clone()),
        });
        self.param_nodes.insert(id, node);
        node
    }

    /// Record the result of an operation over `inputs`.
    pub fn push(&mut self, value: Tensor<T>, inputs: Vec<NodeId>, op: Box<dyn Op<T>>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            inputs,
            op: Some(op),
            requires_grad,
            param: None,
            label: None,
        });
        id
    }

    pub fn set_label(&mut self, node: NodeId, label: impl Into<String>) {
        self.nodes[node.0].label = Some(label.into());
    }

    pub fn label(&self, node: NodeId) -> Option<&str> {
        self.nodes[node.0].label.as_deref()
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        self.nodes[node.0].value.shape()
    }

    pub fn requires_grad(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    pub fn record_batch_stats(&mut self, stats: BatchStats<T>) {
        self.batch_stats.push(stats);
    }

    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.batch_stats
    }

    /// Label (or op name) of the first stochastic operation on the tape.
    pub fn first_stochastic_op(&self) -> Option<String> {
        self.nodes.iter().find_map(|n| {
            n.op.as_ref().filter(|op| op.is_stochastic()).map(|op| {
                n.label.clone().unwrap_or_else(|| op.name().to_string())
            })
        })
    }

    /// Hash of the sign pattern at every rectifier input. Two evaluations
    /// with equal signatures lie on the same linear piece of the network.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            if let Some(op) = &n.op {
                if op.name() == "relu" {
                    let x = &self.nodes[n.inputs[0].0].value;
                    for chunk in x.data().chunks(64) {
                        let mut bits = 0u64;
                        for (i, v) in chunk.iter().enumerate() {
                            if *v > T::zero() {
                                bits |= 1 << i;
                            }
                        }
                        bits.hash(&mut h);
                    }
                }
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of trainable
    /// parameters are added into `store` (accumulating across calls);
    /// gradients of grad-requiring inputs are returned.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    if let Some(pid) = node.param {
                        let p = store.get_mut(pid);
                        if p.trainable {
                            for (acc, v) in p.tensor.grad_mut().iter_mut().zip(&g) {
                                *acc = *acc + *v;
                            }
                        }
                    } else {
                        leaf_grads.insert(NodeId(idx), g);
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
                    let input_grads = op.backward(&inputs, &node.value, &g, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{} backward arity", op.name());
                    for ((input, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                        if !need {
                            continue;
                        }
                        let Some(ig) = ig else { continue };
                        match &mut grads[input.0] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&ig) {
                                    *a = *a + *v;
                                }
                            }
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaf_grads })
    }
}

/// Gradients of the grad-requiring inputs of a graph.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaf_grads: HashMap<NodeId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an input node; `None` if it was not reached.
    pub fn wrt(&self, node: NodeId) -> Option<&[T]> {
        self.leaf_grads.get(&node).map(|v| v.as_slice())
    }
}
