use std::collections::BTreeMap;
use std::sync::Arc;

use super::ops::{Cache, EvalError, Op};
use super::{EngineError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    cache: Cache,
    requires_grad: bool,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in topological order; each op is evaluated when it is
/// added, so `value()` is available immediately.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
}

macro_rules! unary {
    ($($(#[$m:meta])* $name:ident => $op:expr;)*) => {
        $(
            $(#[$m])*
            pub fn $name(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
                self.push($op, &[a])
            }
        )*
    };
}

macro_rules! binary {
    ($($(#[$m:meta])* $name:ident => $op:expr;)*) => {
        $(
            $(#[$m])*
            pub fn $name(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
                self.push($op, &[a, b])
            }
        )*
    };
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
            cache: Cache::None,
            requires_grad,
        });
        id
    }

    /// Named non-differentiable input. Re-registering a name replaces the binding.
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(Op::Input, value, false);
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Named differentiable leaf; returns the existing node when already registered.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.leaf(Op::Param(name.to_string()), value, true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(Op::Constant, value, false)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, EngineError> {
        let node = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|i| i.0 >= node) {
            return Err(EngineError::UnknownNode(bad.0));
        }
        if inputs.len() != op.arity() {
            return Err(EngineError::ShapeMismatch {
                node,
                op: op.name(),
                detail: format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        let values: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let (value, cache) = op.eval(&values).map_err(|e| match e {
            EvalError::Shape(detail) => EngineError::ShapeMismatch {
                node,
                op: op.name(),
                detail,
            },
            EvalError::Numerical(detail) => EngineError::Numerical {
                node,
                op: op.name(),
                detail,
            },
        })?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            cache,
            requires_grad,
        });
        Ok(NodeId(node))
    }

    unary! {
        square => Op::Square;
        exp => Op::Exp;
        log => Op::Log;
        tanh => Op::Tanh;
        sigmoid => Op::Sigmoid;
        relu => Op::Relu;
        sum => Op::Sum;
        mean => Op::Mean;
        mean_rows => Op::MeanRows;
        transpose => Op::Transpose;
        reverse => Op::Reverse;
        softmax => Op::Softmax;
        log_softmax => Op::LogSoftmax;
        trace => Op::Trace;
        inverse => Op::Inverse;
        logdet => Op::LogDet;
        regularize_cov => Op::RegularizeCov;
        median_pair_dist => Op::MedianPairDist;
    }

    binary! {
        add => Op::Add;
        sub => Op::Sub;
        mul => Op::Mul;
        matmul => Op::MatMul;
        concat_cols => Op::ConcatCols;
        concat_rows => Op::ConcatRows;
        pairwise_sq_dist => Op::PairwiseSqDist;
        rbf => Op::Rbf;
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, EngineError> {
        self.push(Op::Scale(k), &[a])
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> Result<NodeId, EngineError> {
        self.push(Op::AddConst(k), &[a])
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.push(Op::Affine, &[x, w, b])
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, EngineError> {
        self.push(Op::Conv1d { stride }, &[x, w, b])
    }

    pub fn max_pool_time(
        &mut self,
        x: NodeId,
        window: usize,
        stride: usize,
    ) -> Result<NodeId, EngineError> {
        self.push(Op::MaxPoolTime { window, stride }, &[x])
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, EngineError> {
        self.push(Op::SliceCols { start, len }, &[x])
    }

    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, EngineError> {
        self.push(Op::SliceRows { start, len }, &[x])
    }

    pub fn center(&mut self, x: NodeId, axis: usize) -> Result<NodeId, EngineError> {
        self.push(Op::Center { axis }, &[x])
    }

    pub fn lstm(
        &mut self,
        x: NodeId,
        wx: NodeId,
        wh: NodeId,
        b: NodeId,
    ) -> Result<NodeId, EngineError> {
        self.push(Op::Lstm, &[x, wx, wh, b])
    }

    pub fn tensor_power_mean(&mut self, x: NodeId, p: usize) -> Result<NodeId, EngineError> {
        self.push(Op::TensorPowerMean { p }, &[x])
    }

    pub fn sampled_monomials(
        &mut self,
        x: NodeId,
        p: usize,
        index: Arc<Vec<usize>>,
    ) -> Result<NodeId, EngineError> {
        self.push(Op::SampledMonomials { p, index }, &[x])
    }

    pub fn block_mmd(&mut self, k: NodeId, ns: usize) -> Result<NodeId, EngineError> {
        self.push(Op::BlockMmd { ns }, &[k])
    }

    pub fn ctc(
        &mut self,
        log_probs: NodeId,
        labels: Arc<Vec<usize>>,
        blank: usize,
    ) -> Result<NodeId, EngineError> {
        self.push(Op::Ctc { labels, blank }, &[log_probs])
    }

    /// Backpropagate from a scalar objective; returns the gradient of every
    /// node that the objective depends on through differentiable paths.
    pub fn backward(&self, objective: NodeId) -> Result<Vec<Option<Tensor>>, EngineError> {
        let obj = self
            .nodes
            .get(objective.0)
            .ok_or(EngineError::UnknownNode(objective.0))?;
        if !obj.value.is_scalar() {
            return Err(EngineError::NonScalarObjective {
                node: objective.0,
                shape: obj.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; objective.0 + 1];
        grads[objective.0] = Some(Tensor::filled(obj.value.shape(), 1.0));
        for id in (0..=objective.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| self.nodes[i.0].requires_grad)
                .collect();
            let values: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = node
                .op
                .backward(&values, &node.value, &node.cache, &g, &need);
            for ((inp, ig), needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                let (Some(ig), true) = (ig, *needed) else {
                    continue;
                };
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of `objective` with respect to the named parameters.
    /// Parameters the objective does not depend on get zero gradients.
    pub fn grad(
        &self,
        objective: NodeId,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>, EngineError> {
        let ids = wrt
            .iter()
            .map(|name| {
                self.param_id(name)
                    .map(|id| (name.to_string(), id))
                    .ok_or_else(|| EngineError::UnknownParameter(name.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut grads = self.backward(objective)?;
        Ok(ids
            .into_iter()
            .map(|(name, id)| {
                let g = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
                (name, g)
            })
            .collect())
    }

    /// Gradients with respect to every registered parameter.
    pub fn param_grads(&self, objective: NodeId) -> Result<BTreeMap<String, Tensor>, EngineError> {
        let names: Vec<String> = self.params.keys().cloned().collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.grad(objective, &refs)
    }
}
