//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; each node's inputs precede it,
//! so the construction order is a topological order. Shapes are checked once
//! when a node is added. Evaluation borrows a [`ParamStore`] read-only and
//! returns [`Values`]; [`Graph::backward`] turns those into [`Gradients`]
//! which the caller folds back into the store. Keeping the store read-only
//! during a pass lets independent samples run in parallel.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, ConvSpec};
use crate::loss;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable sub-networks. Freezing operates on whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Backbone feature extractor.
    Cnn,
    /// Main-net classifier head.
    Cls,
    /// Attention estimator.
    Att,
    /// Per-location label classifier producing confidence maps.
    Conv1,
    /// Spatial regularization sub-network.
    Sr,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Cnn, ParamGroup::Cls, ParamGroup::Att, ParamGroup::Conv1, ParamGroup::Sr];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Cnn => "cnn",
            ParamGroup::Cls => "cls",
            ParamGroup::Att => "att",
            ParamGroup::Conv1 => "conv1",
            ParamGroup::Sr => "sr",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters with their accumulated gradients and per-group freezing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    frozen: BTreeSet<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.to_string(), group, value, grad });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(k, p)| (ParamId(k), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar parameter count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Freezes every group not listed.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        self.frozen = ParamGroup::ALL.into_iter().filter(|g| !groups.contains(g)).collect();
    }

    pub fn is_group_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.params[id.0].group)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// `grad += scale * g` for every parameter that received a gradient.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(&grads.params) {
            if let Some(g) = g {
                p.grad.add_scaled(g, scale)?;
            }
        }
        Ok(())
    }

    /// Rounds every value through `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Per-pass gradients, indexed by parameter and by input slot.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
    pub inputs: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    /// `self += other`, slot by slot.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            accumulate(a, b.as_ref())?;
        }
        for (a, b) in self.inputs.iter_mut().zip(&other.inputs) {
            accumulate(a, b.as_ref())?;
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Option<&Tensor>) -> Result<()> {
    match (slot.as_mut(), g) {
        (_, None) => Ok(()),
        (None, Some(g)) => {
            *slot = Some(g.clone());
            Ok(())
        }
        (Some(t), Some(g)) => t.add_scaled(g, 1.0),
    }
}

fn accumulate_owned(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => {
            *slot = Some(g);
            Ok(())
        }
        Some(t) => t.add_scaled(&g, 1.0),
    }
}

/// The registered operation vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(usize),
    Param(ParamId),
    /// Inputs: `x, weights[, bias]`.
    Conv2d(ConvSpec),
    AvgPool2,
    GlobalAvgPool,
    Relu,
    Sigmoid,
    /// Elementwise product of two equal-shape tensors.
    Mul,
    SpatialSoftmax,
    /// Inputs: `features, attention`.
    WeightedPool,
    /// Inputs: `x, weights, bias`.
    Linear,
    SpatialSumPool,
    Reshape(Vec<usize>),
    /// `a * x + b * y`.
    Axpby(f64, f64),
    Sum,
    /// Inputs: `logits, targets, mask`.
    BceLoss,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_shapes: Vec<Vec<usize>>,
}

/// Node values from one forward pass. Parameter nodes borrow from the store.
pub struct Values<'p> {
    vals: Vec<Option<Cow<'p, Tensor>>>,
}

impl<'p> Values<'p> {
    /// Panics if `id` was not evaluated in this pass.
    pub fn get(&self, id: NodeId) -> &Tensor {
        self.try_get(id).unwrap_or_else(|| panic!("node {} was not evaluated", id.0))
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.vals.get(id.0).and_then(|v| v.as_deref())
    }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn num_inputs(&self) -> usize {
        self.input_shapes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let slot = self.input_shapes.len();
        self.input_shapes.push(shape.to_vec());
        self.push(Op::Input(slot), vec![], shape.to_vec())
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let shape = store.value(id).shape().to_vec();
        self.push(Op::Param(id), vec![], shape)
    }

    fn hwc(&self, op: &'static str, id: NodeId) -> Result<(usize, usize, usize)> {
        match self.shape(id) {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(Error::shape(op, format!("expected an H x W x C operand, got {s:?}"))),
        }
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        spec.validate()?;
        let (h, wd, c) = self.hwc("conv2d", x)?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!("weights {:?}, expected {:?}", self.shape(w), spec.weight_shape()),
            ));
        }
        let mut inputs = vec![x, w];
        match (spec.bias, b) {
            (true, Some(b)) if self.shape(b) == [spec.out_channels] => inputs.push(b),
            (false, None) => {}
            _ => return Err(Error::shape("conv2d", "bias operand does not match spec")),
        }
        let (oh, ow) = spec.output_hw(h, wd)?;
        Ok(self.push(Op::Conv2d(spec), inputs, vec![oh, ow, spec.out_channels]))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.hwc("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("spatial dims {h}x{w} must be even")));
        }
        Ok(self.push(Op::AvgPool2, vec![x], vec![h / 2, w / 2, c]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, _, c) = self.hwc("global_avg_pool", x)?;
        Ok(self.push(Op::GlobalAvgPool, vec![x], vec![c]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu, vec![x], shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid, vec![x], shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "multiply",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn spatial_softmax(&mut self, z: NodeId) -> Result<NodeId> {
        self.hwc("spatial_softmax", z)?;
        let shape = self.shape(z).to_vec();
        Ok(self.push(Op::SpatialSoftmax, vec![z], shape))
    }

    pub fn weighted_pool(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let (h, w, d) = self.hwc("weighted_pool", x)?;
        let (ha, wa, c) = self.hwc("weighted_pool", a)?;
        if (h, w) != (ha, wa) {
            return Err(Error::shape(
                "weighted_pool",
                format!("features {h}x{w} vs attention {ha}x{wa}"),
            ));
        }
        Ok(self.push(Op::WeightedPool, vec![x, a], vec![c, d]))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, d) = match self.shape(w) {
            &[c, d] => (c, d),
            s => return Err(Error::shape("linear", format!("weights must be rank 2, got {s:?}"))),
        };
        if self.shape(x) != [d] || self.shape(b) != [c] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?}, weights [{c}, {d}], bias {:?}",
                    self.shape(x),
                    self.shape(b)
                ),
            ));
        }
        Ok(self.push(Op::Linear, vec![x, w, b], vec![c]))
    }

    pub fn spatial_sum_pool(&mut self, m: NodeId) -> Result<NodeId> {
        let (_, _, c) = self.hwc("spatial_sum_pool", m)?;
        Ok(self.push(Op::SpatialSumPool, vec![m], vec![c]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = self.shape(x).iter().product();
        if n != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        Ok(self.push(Op::Reshape(shape.to_vec()), vec![x], shape.to_vec()))
    }

    pub fn axpby(&mut self, a: f64, x: NodeId, b: f64, y: NodeId) -> Result<NodeId> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::shape("axpby", format!("{:?} vs {:?}", self.shape(x), self.shape(y))));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Axpby(a, b), vec![x, y], shape))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x], vec![1])
    }

    pub fn bce_loss(&mut self, logits: NodeId, targets: NodeId, mask: NodeId) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 1 || self.shape(targets) != s || self.shape(mask) != s {
            return Err(Error::shape(
                "bce_loss",
                format!(
                    "logits {:?}, targets {:?}, mask {:?}",
                    s,
                    self.shape(targets),
                    self.shape(mask)
                ),
            ));
        }
        Ok(self.push(Op::BceLoss, vec![logits, targets, mask], vec![1]))
    }

    fn ancestors(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for r in roots {
            need[r.0] = true;
        }
        for k in (0..self.nodes.len()).rev() {
            if need[k] {
                for i in &self.nodes[k].inputs {
                    need[i.0] = true;
                }
            }
        }
        need
    }

    /// Evaluates `wanted` and everything they depend on.
    /// Sign pattern of every evaluated ReLU input.
    fn relu_pattern(&self, values: &Values<'_>) -> Vec<bool> {
        let mut out = Vec::new();
        for node in self.nodes.iter().filter(|n| matches!(n.op, Op::Relu)) {
            if let Some(x) = values.try_get(node.inputs[0]) {
                out.extend(x.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn forward<'p>(
        &self,
        inputs: &[Tensor],
        params: &'p ParamStore,
        wanted: &[NodeId],
    ) -> Result<Values<'p>> {
        if inputs.len() != self.input_shapes.len() {
            return Err(Error::shape(
                "forward",
                format!("graph takes {} inputs, got {}", self.input_shapes.len(), inputs.len()),
            ));
        }
        for (slot, (t, s)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(
                    "input",
                    format!("slot {slot} expects {s:?}, got {:?}", t.shape()),
                ));
            }
        }
        let need = self.ancestors(wanted);
        let mut vals: Vec<Option<Cow<'p, Tensor>>> = vec![None; self.nodes.len()];
        for (k, node) in self.nodes.iter().enumerate() {
            if !need[k] {
                continue;
            }
            let value = match &node.op {
                Op::Param(id) => {
                    let v = params.value(*id);
                    if v.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            "param",
                            format!("{} has shape {:?}, graph expects {:?}", params.get(*id).name, v.shape(), node.shape),
                        ));
                    }
                    Cow::Borrowed(v)
                }
                op => {
                    let arg = |i: usize| -> &Tensor { vals[node.inputs[i].0].as_deref().expect("topological order") };
                    Cow::Owned(eval(op, &arg, inputs, node.inputs.len())?)
                }
            };
            vals[k] = Some(value);
        }
        Ok(Values { vals })
    }

    /// Reverse pass from the scalar `loss`. Gradients are produced for
    /// unfrozen parameters, and for inputs when `input_grads` is set.
    pub fn backward(
        &self,
        values: &Values<'_>,
        params: &ParamStore,
        loss: NodeId,
        input_grads: bool,
    ) -> Result<Gradients> {
        let lv = values
            .try_get(loss)
            .ok_or_else(|| Error::Compute("loss node was not evaluated".into()))?;
        if !lv.is_scalar() {
            return Err(Error::Compute(format!(
                "backward needs a scalar loss, node has shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut rg = vec![false; n];
        for k in 0..n {
            let node = &self.nodes[k];
            rg[k] = match (&node.op, node.inputs.is_empty()) {
                (Op::Param(id), _) => !params.is_frozen(*id),
                (Op::Input(_), _) => input_grads,
                (Op::BceLoss, _) => rg[node.inputs[0].0],
                (_, _) => node.inputs.iter().any(|i| rg[i.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for k in (0..n).rev() {
            if !rg[k] {
                continue;
            }
            let node = &self.nodes[k];
            if matches!(node.op, Op::Param(_) | Op::Input(_)) {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            let want: Vec<bool> = node.inputs.iter().map(|i| rg[i.0]).collect();
            let arg = |i: usize| values.get(node.inputs[i]);
            let out = values.get(NodeId(k));
            for (slot, gi) in backprop(&node.op, &arg, out, &g, &want)? {
                accumulate_owned(&mut grads[node.inputs[slot].0], gi)?;
            }
            grads[k] = Some(g);
        }

        let mut result = Gradients {
            params: vec![None; params.len()],
            inputs: vec![None; self.input_shapes.len()],
        };
        for (k, node) in self.nodes.iter().enumerate().take(n) {
            match node.op {
                Op::Param(id) if rg[k] => accumulate(&mut result.params[id.0], grads[k].as_ref())?,
                Op::Input(slot) if rg[k] => accumulate(&mut result.inputs[slot], grads[k].as_ref())?,
                _ => {}
            }
        }
        Ok(result)
    }
}

fn eval<'a>(op: &Op, arg: &dyn Fn(usize) -> &'a Tensor, inputs: &[Tensor], arity: usize) -> Result<Tensor> {
    Ok(match op {
        Op::Input(slot) => inputs[*slot].clone(),
        Op::Param(_) => unreachable!("parameters are borrowed"),
        Op::Conv2d(spec) => {
            let bias = (arity == 3).then(|| arg(2));
            layers::conv2d(arg(0), spec, arg(1), bias)?
        }
        Op::AvgPool2 => layers::avg_pool2(arg(0))?,
        Op::GlobalAvgPool => layers::global_avg_pool(arg(0))?,
        Op::Relu => layers::relu(arg(0)),
        Op::Sigmoid => layers::sigmoid(arg(0)),
        Op::Mul => layers::multiply(arg(0), arg(1))?,
        Op::SpatialSoftmax => layers::spatial_softmax(arg(0))?,
        Op::WeightedPool => layers::weighted_pool(arg(0), arg(1))?,
        Op::Linear => layers::linear(arg(0), arg(1), arg(2))?,
        Op::SpatialSumPool => layers::spatial_sum_pool(arg(0))?,
        Op::Reshape(shape) => arg(0).clone().reshape(shape)?,
        Op::Axpby(a, b) => {
            let mut out = arg(0).map(|v| a * v);
            out.add_scaled(arg(1), *b)?;
            out
        }
        Op::Sum => Tensor::scalar(arg(0).sum()),
        Op::BceLoss => Tensor::scalar(loss::bce_loss(arg(0), arg(1), arg(2))?),
    })
}

/// Vector-Jacobian product of one node: `(input slot, gradient)` pairs for
/// each input flagged in `want`.
fn backprop<'a>(
    op: &Op,
    arg: &dyn Fn(usize) -> &'a Tensor,
    out: &Tensor,
    g: &Tensor,
    want: &[bool],
) -> Result<Vec<(usize, Tensor)>> {
    let mut res = Vec::with_capacity(want.len());
    match op {
        Op::Input(_) | Op::Param(_) => {}
        Op::Conv2d(spec) => {
            let grads = layers::conv2d_backward(arg(0), spec, arg(1), g, want[0])?;
            if let Some(gx) = grads.input {
                res.push((0, gx));
            }
            if want[1] {
                res.push((1, grads.weights));
            }
            if let (Some(gb), true) = (grads.bias, want.get(2).copied().unwrap_or(false)) {
                res.push((2, gb));
            }
        }
        Op::AvgPool2 => res.push((0, layers::avg_pool2_backward(arg(0).shape(), g)?)),
        Op::GlobalAvgPool => res.push((0, layers::global_avg_pool_backward(arg(0).shape(), g)?)),
        Op::Relu => res.push((0, layers::relu_backward(arg(0), g)?)),
        Op::Sigmoid => res.push((0, layers::sigmoid_backward(out, g)?)),
        Op::Mul => {
            if want[0] {
                res.push((0, layers::multiply(g, arg(1))?));
            }
            if want[1] {
                res.push((1, layers::multiply(g, arg(0))?));
            }
        }
        Op::SpatialSoftmax => res.push((0, layers::spatial_softmax_backward(out, g)?)),
        Op::WeightedPool => {
            let (gx, ga) = layers::weighted_pool_backward(arg(0), arg(1), g)?;
            res.push((0, gx));
            res.push((1, ga));
        }
        Op::Linear => {
            let (gx, gw, gb) = layers::linear_backward(arg(0), arg(1), g)?;
            res.push((0, gx));
            res.push((1, gw));
            res.push((2, gb));
        }
        Op::SpatialSumPool => res.push((0, layers::spatial_sum_pool_backward(arg(0).shape(), g)?)),
        Op::Reshape(_) => res.push((0, g.clone().reshape(arg(0).shape())?)),
        Op::Axpby(a, b) => {
            res.push((0, g.map(|v| a * v)));
            res.push((1, g.map(|v| b * v)));
        }
        Op::Sum => res.push((0, Tensor::full(arg(0).shape(), g.item()))),
        Op::BceLoss => {
            let gz = loss::bce_loss_backward(arg(0), arg(1), arg(2))?;
            res.push((0, gz.map(|v| v * g.item())));
        }
    }
    res.retain(|(slot, _)| want[*slot]);
    Ok(res)
}

/// Runs forward and backward and adds the gradients of `loss` into the
/// store. Returns the values of `outputs`.
pub fn forward_backward(
    graph: &Graph,
    inputs: &[Tensor],
    params: &mut ParamStore,
    outputs: &[NodeId],
    loss: NodeId,
) -> Result<Vec<Tensor>> {
    let mut wanted = outputs.to_vec();
    wanted.push(loss);
    let (outs, grads) = {
        let values = graph.forward(inputs, params, &wanted)?;
        let grads = graph.backward(&values, params, loss, false)?;
        let outs = outputs.iter().map(|&o| values.get(o).clone()).collect();
        (outs, grads)
    };
    params.accumulate(&grads, 1.0)?;
    Ok(outs)
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor in the relative error.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { step: 1e-4, tolerance: 1e-4, floor: 1e-8, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU and were re-measured
    /// with a smaller step.
    pub kinks: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares reverse-mode gradients of every unfrozen parameter with central
/// differences. Values are perturbed in place and restored afterwards.
pub fn grad_check(
    graph: &Graph,
    inputs: &[Tensor],
    params: &mut ParamStore,
    loss: NodeId,
    opts: &CheckOptions,
) -> Result<CheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    if graph.shape(loss).iter().product::<usize>() != 1 {
        return Err(Error::Compute(format!(
            "gradient check needs a scalar loss, node has shape {:?}",
            graph.shape(loss)
        )));
    }
    let analytic = {
        let values = graph.forward(inputs, params, &[loss])?;
        graph.backward(&values, params, loss, false)?
    };
    let eval_loss = |p: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let v = graph.forward(inputs, p, &[loss])?;
        Ok((v.get(loss).item(), graph.relu_pattern(&v)))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        kinks: 0,
        tolerance: opts.tolerance,
    };
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).filter(|&id| !params.is_frozen(id)).collect();
    for id in ids {
        let n = params.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let zero = Tensor::zeros(params.value(id).shape());
        let grad = analytic.param(id).unwrap_or(&zero).clone();
        for k in coords {
            let orig = params.value(id).data()[k];
            let mut step = opts.step;
            let mut numeric;
            let mut retried = false;
            loop {
                params.value_mut(id).data_mut()[k] = orig + step;
                let (up, up_pattern) = eval_loss(params)?;
                params.value_mut(id).data_mut()[k] = orig - step;
                let (down, down_pattern) = eval_loss(params)?;
                params.value_mut(id).data_mut()[k] = orig;
                numeric = (up - down) / (2.0 * step);
                // A one-sided difference across a ReLU kink measures neither
                // slope, so shrink the step until both sides agree.
                if up_pattern == down_pattern || step < opts.step * 1e-3 {
                    break;
                }
                step /= 10.0;
                retried = true;
            }
            report.kinks += retried as usize;
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
