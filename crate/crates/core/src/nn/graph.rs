use rand::Rng;

use super::ops::{self, BnCache, BnState, Mode};
use super::{Scalar, Tensor};
use crate::error::{config, shape, Result};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Input,
    Conv { weight: usize, bias: usize, cout: usize, kernel: usize },
    BatchNorm { gamma: usize, beta: usize, state: usize },
    Relu,
    Pool,
    Unpool,
    Concat,
    StopGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
    /// Resolution level: 0 at the input, +1 per pooling.
    pub level: usize,
}

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<T>,
}

/// A skip connection from an encoder feature map to a decoder concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Skip {
    pub from: NodeId,
    pub to: NodeId,
    pub level: usize,
}

/// Directed acyclic layer graph with a single input and any number of
/// output heads. Nodes are stored in topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph<T> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    bn_states: Vec<BnState<T>>,
    skips: Vec<Skip>,
    outputs: Vec<NodeId>,
    features: NodeId,
    base_channels: usize,
    depth: usize,
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    values: Vec<Tensor<T>>,
    bn: Vec<Option<BnCache<T>>>,
    outputs: Vec<NodeId>,
    features: NodeId,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self, head: usize) -> &Tensor<T> {
        &self.values[self.outputs[head]]
    }

    pub fn outputs(&self) -> Vec<&Tensor<T>> {
        self.outputs.iter().map(|&id| &self.values[id]).collect()
    }

    /// Last decoder feature map of the backbone.
    pub fn features(&self) -> &Tensor<T> {
        &self.values[self.features]
    }

    pub fn node(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    /// One entry per parameter, in parameter-store order.
    pub params: Vec<Vec<T>>,
    pub input: Tensor<T>,
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
}

impl<T: Scalar> NetworkGraph<T> {
    /// Empty graph holding only an input node.
    pub fn new(in_channels: usize) -> Result<Self> {
        if in_channels == 0 {
            return config("input needs at least one channel");
        }
        Ok(Self {
            nodes: vec![Node { layer: Layer::Input, inputs: vec![], channels: in_channels, level: 0 }],
            params: Vec::new(),
            bn_states: Vec::new(),
            skips: Vec::new(),
            outputs: Vec::new(),
            features: 0,
            base_channels: in_channels,
            depth: 1,
        })
    }

    pub const INPUT: NodeId = 0;

    fn push(&mut self, layer: Layer, inputs: Vec<NodeId>, channels: usize, level: usize) -> NodeId {
        self.nodes.push(Node { layer, inputs, channels, level });
        self.nodes.len() - 1
    }

    fn add_param(&mut self, name: String, dims: Vec<usize>, values: Vec<T>) -> usize {
        self.params.push(Param { name, dims, values });
        self.params.len() - 1
    }

    pub fn add_conv<R: Rng + ?Sized>(&mut self, from: NodeId, cout: usize, kernel: usize, rng: &mut R) -> Result<NodeId> {
        if kernel != 1 && kernel != 3 {
            return config(format!("unsupported kernel size {kernel}"));
        }
        if cout == 0 {
            return config("convolution needs at least one output channel");
        }
        let Node { channels: cin, level, .. } = self.nodes[from];
        let id = self.nodes.len();
        let fan_in = cin * kernel * kernel;
        let w = he_uniform(rng, cout * fan_in, fan_in);
        let weight = self.add_param(format!("n{id}.conv.weight"), vec![cout, cin, kernel, kernel], w);
        let bias = self.add_param(format!("n{id}.conv.bias"), vec![cout], vec![T::zero(); cout]);
        Ok(self.push(Layer::Conv { weight, bias, cout, kernel }, vec![from], cout, level))
    }

    pub fn add_batch_norm(&mut self, from: NodeId) -> NodeId {
        let Node { channels: c, level, .. } = self.nodes[from];
        let id = self.nodes.len();
        let gamma = self.add_param(format!("n{id}.bn.gamma"), vec![c], vec![T::one(); c]);
        let beta = self.add_param(format!("n{id}.bn.beta"), vec![c], vec![T::zero(); c]);
        self.bn_states.push(BnState::new(c));
        let state = self.bn_states.len() - 1;
        self.push(Layer::BatchNorm { gamma, beta, state }, vec![from], c, level)
    }

    pub fn add_relu(&mut self, from: NodeId) -> NodeId {
        let Node { channels, level, .. } = self.nodes[from];
        self.push(Layer::Relu, vec![from], channels, level)
    }

    pub fn add_pool(&mut self, from: NodeId) -> NodeId {
        let Node { channels, level, .. } = self.nodes[from];
        self.push(Layer::Pool, vec![from], channels, level + 1)
    }

    pub fn add_unpool(&mut self, from: NodeId) -> Result<NodeId> {
        let Node { channels, level, .. } = self.nodes[from];
        if level == 0 {
            return config("cannot unpool above the input resolution");
        }
        Ok(self.push(Layer::Unpool, vec![from], channels, level - 1))
    }

    pub fn add_concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        if na.level != nb.level {
            return config(format!("cannot concatenate levels {} and {}", na.level, nb.level));
        }
        let (c, level) = (na.channels + nb.channels, na.level);
        Ok(self.push(Layer::Concat, vec![a, b], c, level))
    }

    /// Identity in the forward pass; blocks all gradient flow backwards.
    pub fn add_stop_gradient(&mut self, from: NodeId) -> NodeId {
        let Node { channels, level, .. } = self.nodes[from];
        self.push(Layer::StopGradient, vec![from], channels, level)
    }

    /// conv3×3 → BN → ReLU.
    pub fn add_basic_block<R: Rng + ?Sized>(&mut self, from: NodeId, cout: usize, rng: &mut R) -> Result<NodeId> {
        let c = self.add_conv(from, cout, 3, rng)?;
        let b = self.add_batch_norm(c);
        Ok(self.add_relu(b))
    }

    /// Marks `node` as an output head and returns the head index.
    pub fn add_output(&mut self, node: NodeId) -> usize {
        self.outputs.push(node);
        self.outputs.len() - 1
    }

    pub fn set_features(&mut self, node: NodeId) {
        self.features = node;
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn_states
    }

    /// Mutable parameters and running statistics at once.
    pub fn state_mut(&mut self) -> (&mut [Param<T>], &mut [BnState<T>]) {
        (&mut self.params, &mut self.bn_states)
    }

    pub fn skips(&self) -> &[Skip] {
        &self.skips
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn features(&self) -> NodeId {
        self.features
    }

    pub fn in_channels(&self) -> usize {
        self.nodes[0].channels
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Spatial dims of the input must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    /// Converts every parameter and running statistic to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        NetworkGraph {
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), dims: p.dims.clone(), values: conv(&p.values) })
                .collect(),
            bn_states: self.bn_states.iter().map(|s| BnState { mean: conv(&s.mean), var: conv(&s.var) }).collect(),
            skips: self.skips.clone(),
            outputs: self.outputs.clone(),
            features: self.features,
            base_channels: self.base_channels,
            depth: self.depth,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = x.dims();
        if c != self.in_channels() {
            return shape(format!("network expects {} input channels, got {c}", self.in_channels()));
        }
        let m = self.size_multiple();
        if n == 0 || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return shape(format!("input {h}x{w} (batch {n}) is not a positive multiple of {m}"));
        }
        if self.outputs.is_empty() {
            return config("network has no output heads");
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Tensor<T>, mode: Mode) -> Result<(Trace<T>, Vec<(usize, Vec<T>, Vec<T>, usize)>)> {
        self.check_input(x)?;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut bn = Vec::with_capacity(self.nodes.len());
        let mut stats = Vec::new();
        for node in &self.nodes {
            let input = |i: usize| &values[node.inputs[i]];
            let mut cache = None;
            let out = match node.layer {
                Layer::Input => x.clone(),
                Layer::Conv { weight, bias, cout, kernel } => {
                    ops::conv2d(input(0), &self.params[weight].values, &self.params[bias].values, cout, kernel)?
                }
                Layer::BatchNorm { gamma, beta, state } => {
                    let src = input(0);
                    let (y, c, s) =
                        ops::batch_norm(src, &self.params[gamma].values, &self.params[beta].values, &self.bn_states[state], mode)?;
                    if let Some((m, v)) = s {
                        stats.push((state, m, v, src.batch() * src.plane()));
                    }
                    cache = Some(c);
                    y
                }
                Layer::Relu => ops::relu(input(0)),
                Layer::Pool => ops::avg_pool2(input(0))?,
                Layer::Unpool => ops::unpool2(input(0)),
                Layer::Concat => ops::concat(input(0), input(1))?,
                Layer::StopGradient => input(0).clone(),
            };
            values.push(out);
            bn.push(cache);
        }
        Ok((Trace { values, bn, outputs: self.outputs.clone(), features: self.features }, stats))
    }

    /// Forward pass. Train mode normalizes with batch statistics and updates
    /// the running statistics; eval mode leaves the graph untouched.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        let (trace, stats) = self.run(x, mode)?;
        for (state, mean, var, count) in stats {
            ops::update_running_stats(&mut self.bn_states[state], &mean, &var, count);
        }
        Ok(trace)
    }

    /// Eval-mode forward; a pure function of weights and input.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        Ok(self.run(x, Mode::Eval)?.0)
    }

    /// Reverse-mode gradients of `Σ_h ⟨output_grads[h], output_h⟩`.
    /// Heads given `None` contribute nothing.
    pub fn backward(&self, trace: &Trace<T>, output_grads: &[Option<&Tensor<T>>]) -> Result<Gradients<T>> {
        if output_grads.len() != self.outputs.len() {
            return shape(format!("{} output gradients for {} heads", output_grads.len(), self.outputs.len()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };
        for (&id, g) in self.outputs.iter().zip(output_grads) {
            if let Some(g) = g {
                if g.dims() != trace.values[id].dims() {
                    return shape(format!("output gradient {:?} for output {:?}", g.dims(), trace.values[id].dims()));
                }
                accumulate(&mut grads[id], (*g).clone());
            }
        }
        let mut pgrads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.values.len()]).collect();
        for id in (1..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match node.layer {
                Layer::Input => unreachable!(),
                Layer::Conv { weight, bias, cout, kernel } => {
                    let x = &trace.values[node.inputs[0]];
                    let cg = ops::conv2d_backward(x, &self.params[weight].values, cout, kernel, &g)?;
                    add_into(&mut pgrads[weight], &cg.weight);
                    add_into(&mut pgrads[bias], &cg.bias);
                    accumulate(&mut grads[node.inputs[0]], cg.input);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    let cache = trace.bn[id].as_ref().expect("batch norm cache");
                    let bg = ops::batch_norm_backward(cache, &self.params[gamma].values, &g);
                    add_into(&mut pgrads[gamma], &bg.gamma);
                    add_into(&mut pgrads[beta], &bg.beta);
                    accumulate(&mut grads[node.inputs[0]], bg.input);
                }
                Layer::Relu => accumulate(&mut grads[node.inputs[0]], ops::relu_backward(&trace.values[id], &g)),
                Layer::Pool => accumulate(&mut grads[node.inputs[0]], ops::avg_pool2_backward(&g)),
                Layer::Unpool => accumulate(&mut grads[node.inputs[0]], ops::unpool2_backward(&g)),
                Layer::Concat => {
                    let ca = self.nodes[node.inputs[0]].channels;
                    let (ga, gb) = ops::concat_backward(&g, ca);
                    accumulate(&mut grads[node.inputs[0]], ga);
                    accumulate(&mut grads[node.inputs[1]], gb);
                }
                Layer::StopGradient => {}
            }
        }
        let input = grads[0].take().unwrap_or_else(|| Tensor::zeros(trace.values[0].dims()));
        Ok(Gradients { params: pgrads, input })
    }

    /// Parameter name and shape, in store order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.dims.clone())).collect()
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

/// U-Net backbone: `depth` encoder levels of two basic blocks with 2×2
/// average pooling between them, channel width doubling per level, and a
/// mirrored decoder (unpool, up-conv block, skip concat, two blocks).
/// The graph ends at the last decoder feature map; attach heads with
/// [`attach_bridge`].
pub fn build_backbone<T: Scalar, R: Rng + ?Sized>(
    in_channels: usize,
    base_channels: usize,
    depth: usize,
    rng: &mut R,
) -> Result<NetworkGraph<T>> {
    if depth == 0 || depth > 8 {
        return config(format!("backbone depth must be in 1..=8, got {depth}"));
    }
    if base_channels == 0 {
        return config("backbone needs at least one base channel");
    }
    let mut net = NetworkGraph::new(in_channels)?;
    net.base_channels = base_channels;
    net.depth = depth;
    let width = |l: usize| base_channels << l;
    let mut cur = NetworkGraph::<T>::INPUT;
    let mut encoder = Vec::with_capacity(depth);
    for l in 0..depth {
        if l > 0 {
            cur = net.add_pool(cur);
        }
        cur = net.add_basic_block(cur, width(l), rng)?;
        cur = net.add_basic_block(cur, width(l), rng)?;
        encoder.push(cur);
    }
    cur = net.add_basic_block(cur, width(depth - 1), rng)?;
    cur = net.add_basic_block(cur, width(depth - 1), rng)?;
    for l in (0..depth - 1).rev() {
        cur = net.add_unpool(cur)?;
        cur = net.add_basic_block(cur, width(l), rng)?;
        let joined = net.add_concat(encoder[l], cur)?;
        net.skips.push(Skip { from: encoder[l], to: joined, level: l });
        cur = net.add_basic_block(joined, width(l), rng)?;
        cur = net.add_basic_block(cur, width(l), rng)?;
    }
    net.features = cur;
    Ok(net)
}

/// Appends a head (two basic blocks and a linear 1×1 conv) on the backbone
/// features and returns its output index.
pub fn attach_bridge<T: Scalar, R: Rng + ?Sized>(net: &mut NetworkGraph<T>, out_channels: usize, rng: &mut R) -> Result<usize> {
    let width = net.base_channels;
    let mut cur = net.add_basic_block(net.features, width, rng)?;
    cur = net.add_basic_block(cur, width, rng)?;
    cur = net.add_conv(cur, out_channels, 1, rng)?;
    Ok(net.add_output(cur))
}
