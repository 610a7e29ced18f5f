//! A named sequence of layers with optional residual blocks.
//!
//! `trace` runs a forward pass and keeps what `backward` needs to pull a
//! gradient at the last traced node back to the network input.

use std::collections::BTreeMap;

use super::layers::{
    conv_output_shape, flatten, linear_output_shape, pool_output_shape, relu, relu_backward, unflatten,
    AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Linear, MaxPool2d, Tensor,
};
use crate::error::{Error, Result};

type Dim3 = (usize, usize, usize);

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm2d),
    MaxPool(MaxPool2d),
    AdaptiveAvgPool(AdaptiveAvgPool2d),
    Relu,
    Flatten,
    /// Identity at inference time.
    Dropout,
    Residual(Box<BasicBlock>),
}

/// `relu(main(x) + shortcut(x))`, with an identity shortcut when `None`.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub main: Network,
    pub shortcut: Option<Network>,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    /// Prefix of this node's tensors in a weight file, e.g. `features.0`.
    pub param_key: Option<String>,
    pub layer: Layer,
}

#[derive(Debug, Clone, Default)]
pub struct Network {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
enum Cache {
    Shape(Dim3),
    Input(Tensor),
    Block(Box<BlockCache>),
}

#[derive(Debug, Clone)]
struct BlockCache {
    main: Trace,
    shortcut: Option<Trace>,
    sum: Tensor,
}

/// Forward-pass record for one input, ending at `last` (inclusive).
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
    outputs: BTreeMap<usize, Tensor>,
    output: Tensor,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }

    /// Output of node `idx`, when it was kept.
    pub fn kept(&self, idx: usize) -> Option<&Tensor> {
        self.outputs.get(&idx)
    }
}

/// Mutable view of one parametric layer, handed to weight loaders.
pub enum ParamsMut<'a> {
    Conv(&'a mut Conv2d),
    Linear(&'a mut Linear),
    BatchNorm(&'a mut BatchNorm2d),
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.nodes.push(Node { name: name.into(), param_key: None, layer });
        self
    }

    pub fn push_param(&mut self, name: impl Into<String>, key: impl Into<String>, layer: Layer) -> &mut Self {
        self.nodes.push(Node { name: name.into(), param_key: Some(key.into()), layer });
        self
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::config(format!("unknown layer '{name}'")))
    }

    /// Output shape of every node for an input of shape `input`.
    pub fn output_shapes(&self, input: Dim3) -> Result<Vec<(String, Dim3)>> {
        let mut dim = input;
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            dim = layer_output_shape(&node.layer, dim)?;
            out.push((node.name.clone(), dim));
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for node in &self.nodes {
            cur = apply(&node.layer, &cur)?;
        }
        Ok(cur)
    }

    /// Forward pass without gradient bookkeeping, returning the outputs of
    /// `nodes` (indices). Stops after the deepest requested node.
    pub fn forward_collect(&self, x: &Tensor, nodes: &[usize]) -> Result<BTreeMap<usize, Tensor>> {
        let mut out = BTreeMap::new();
        let Some(&last) = nodes.iter().max() else {
            return Ok(out);
        };
        let mut cur = x.clone();
        for (i, node) in self.nodes.iter().enumerate().take(last + 1) {
            cur = apply(&node.layer, &cur)?;
            if nodes.contains(&i) {
                out.insert(i, cur.clone());
            }
        }
        Ok(out)
    }

    /// Forward pass through nodes `0..=last` (the whole network when `None`),
    /// keeping the outputs of `keep` in the trace.
    pub fn trace(&self, x: &Tensor, last: Option<usize>, keep: &[usize]) -> Result<Trace> {
        let last = last.unwrap_or(self.nodes.len().saturating_sub(1));
        let mut caches = Vec::with_capacity(last + 1);
        let mut outputs = BTreeMap::new();
        let mut cur = x.clone();
        for (i, node) in self.nodes.iter().enumerate().take(last + 1) {
            let (next, cache) = step(&node.layer, cur)?;
            caches.push(cache);
            if keep.contains(&i) {
                outputs.insert(i, next.clone());
            }
            cur = next;
        }
        Ok(Trace { caches, outputs, output: cur })
    }

    /// Gradient with respect to the network input, given the gradient at the
    /// trace's last node.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.dim() != trace.output.dim() {
            return Err(Error::input(format!(
                "gradient shape {:?} does not match traced output {:?}",
                grad_out.dim(),
                trace.output.dim()
            )));
        }
        let mut g = grad_out.clone();
        for (node, cache) in self.nodes.iter().zip(trace.caches.iter()).rev() {
            g = step_back(&node.layer, cache, &g)?;
        }
        Ok(g)
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamsMut<'_>) -> Result<()>) -> Result<()> {
        for node in &mut self.nodes {
            match &mut node.layer {
                Layer::Conv(c) => {
                    if let Some(k) = &node.param_key {
                        f(k, ParamsMut::Conv(c))?;
                    }
                }
                Layer::Linear(l) => {
                    if let Some(k) = &node.param_key {
                        f(k, ParamsMut::Linear(l))?;
                    }
                }
                Layer::BatchNorm(b) => {
                    if let Some(k) = &node.param_key {
                        f(k, ParamsMut::BatchNorm(b))?;
                    }
                }
                Layer::Residual(block) => {
                    block.main.visit_params_mut(f)?;
                    if let Some(sc) = &mut block.shortcut {
                        sc.visit_params_mut(f)?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn layer_output_shape(layer: &Layer, dim: Dim3) -> Result<Dim3> {
    Ok(match layer {
        Layer::Conv(c) => conv_output_shape(c, dim)?,
        Layer::Linear(l) => linear_output_shape(l, dim)?,
        Layer::BatchNorm(b) => {
            if b.scale.len() != dim.0 {
                return Err(Error::input(format!("batch norm expects {} channels, got {}", b.scale.len(), dim.0)));
            }
            dim
        }
        Layer::MaxPool(p) => pool_output_shape(p, dim)?,
        Layer::AdaptiveAvgPool(p) => (dim.0, p.out_h, p.out_w),
        Layer::Relu | Layer::Dropout => dim,
        Layer::Flatten => (dim.0 * dim.1 * dim.2, 1, 1),
        Layer::Residual(block) => {
            let main = block.main.output_shapes(dim)?.last().map(|(_, d)| *d).unwrap_or(dim);
            let short = match &block.shortcut {
                Some(sc) => sc.output_shapes(dim)?.last().map(|(_, d)| *d).unwrap_or(dim),
                None => dim,
            };
            if main != short {
                return Err(Error::input(format!("residual branch shapes differ: {main:?} vs {short:?}")));
            }
            main
        }
    })
}

fn apply(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    Ok(match layer {
        Layer::Conv(c) => c.forward(x)?,
        Layer::Linear(l) => l.forward(x)?,
        Layer::BatchNorm(b) => b.forward(x)?,
        Layer::MaxPool(p) => p.forward(x)?,
        Layer::AdaptiveAvgPool(p) => p.forward(x),
        Layer::Relu => relu(x),
        Layer::Flatten => flatten(x),
        Layer::Dropout => x.clone(),
        Layer::Residual(block) => {
            let mut sum = block.main.forward(x)?;
            let short = match &block.shortcut {
                Some(sc) => sc.forward(x)?,
                None => x.clone(),
            };
            check_same(&sum, &short)?;
            sum += &short;
            relu(&sum)
        }
    })
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!("residual branch shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn step(layer: &Layer, x: Tensor) -> Result<(Tensor, Cache)> {
    let dim = x.dim();
    Ok(match layer {
        Layer::Conv(c) => (c.forward(&x)?, Cache::Shape(dim)),
        Layer::Linear(l) => (l.forward(&x)?, Cache::Shape(dim)),
        Layer::BatchNorm(b) => (b.forward(&x)?, Cache::Shape(dim)),
        Layer::MaxPool(p) => (p.forward(&x)?, Cache::Input(x)),
        Layer::AdaptiveAvgPool(p) => (p.forward(&x), Cache::Shape(dim)),
        Layer::Relu => (relu(&x), Cache::Input(x)),
        Layer::Flatten => (flatten(&x), Cache::Shape(dim)),
        Layer::Dropout => (x, Cache::Shape(dim)),
        Layer::Residual(block) => {
            let main = block.main.trace(&x, None, &[])?;
            let shortcut = match &block.shortcut {
                Some(sc) => Some(sc.trace(&x, None, &[])?),
                None => None,
            };
            let mut sum = main.output.clone();
            let short = shortcut.as_ref().map(|t| &t.output).unwrap_or(&x);
            check_same(&sum, short)?;
            sum += short;
            (relu(&sum), Cache::Block(Box::new(BlockCache { main, shortcut, sum })))
        }
    })
}

fn step_back(layer: &Layer, cache: &Cache, g: &Tensor) -> Result<Tensor> {
    Ok(match (layer, cache) {
        (Layer::Conv(c), Cache::Shape(dim)) => c.backward(*dim, g),
        (Layer::Linear(l), Cache::Shape(dim)) => unflatten(&l.backward(g), *dim),
        (Layer::BatchNorm(b), Cache::Shape(_)) => b.backward(g),
        (Layer::MaxPool(p), Cache::Input(x)) => p.backward(x, g),
        (Layer::AdaptiveAvgPool(p), Cache::Shape(dim)) => p.backward(*dim, g),
        (Layer::Relu, Cache::Input(x)) => relu_backward(x, g),
        (Layer::Flatten, Cache::Shape(dim)) => unflatten(g, *dim),
        (Layer::Dropout, _) => g.clone(),
        (Layer::Residual(block), Cache::Block(cache)) => {
            let BlockCache { main, shortcut, sum } = cache.as_ref();
            let g_sum = relu_backward(sum, g);
            let mut gx = block.main.backward(main, &g_sum)?;
            match (&block.shortcut, shortcut) {
                (Some(sc), Some(t)) => gx += &sc.backward(t, &g_sum)?,
                _ => gx += &g_sum,
            }
            gx
        }
        _ => unreachable!("cache kind always matches its layer"),
    })
}
