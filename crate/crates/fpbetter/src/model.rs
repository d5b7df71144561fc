//! Residual network construction, masked forward passes implementing
//! stochastic-depth block skipping, and parameter management.
//!
//! A network is stem -> L residual blocks -> head. Each block computes
//! `shortcut(x) + beta_l * branch(x)` where the branch is two layers with a
//! relu between them and beta_l is the block's mask bit. A skipped branch
//! (`beta_l = 0`) is not executed at all: its nodes never enter the graph,
//! its parameters receive no gradient, and its cost is saved. The stem, the
//! head classifier and projection shortcuts are never maskable.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamId};
use crate::tensor::Tensor;

// ── Architecture description ─────────────────────────────────────────

/// One parameterized layer: a fully-connected map or a 2-d convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
}

impl LayerSpec {
    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Affine { inputs, .. } => *inputs,
            LayerSpec::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self {
            LayerSpec::Affine { inputs, outputs } => vec![*inputs, *outputs],
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![*out_ch, *in_ch, *kernel, *kernel],
        }
    }

    fn bias_shape(&self) -> Vec<usize> {
        match self {
            LayerSpec::Affine { outputs, .. } => vec![*outputs],
            LayerSpec::Conv { out_ch, .. } => vec![*out_ch],
        }
    }

    /// Output shape (without the batch axis) for a given input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Affine { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(Error::Shape(format!(
                        "affine layer expects [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                if input.len() != 3 || input[0] != *in_ch {
                    return Err(Error::Shape(format!(
                        "conv layer expects [{in_ch}, h, w], got {input:?}"
                    )));
                }
                let padding = (kernel - 1) / 2;
                Ok(vec![
                    *out_ch,
                    crate::kernels::conv_out_extent(input[1], *kernel, *stride, padding),
                    crate::kernels::conv_out_extent(input[2], *kernel, *stride, padding),
                ])
            }
        }
    }
}

/// One residual block: two layers with a relu between them on the branch,
/// plus an optional projection shortcut when the branch changes shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub first: LayerSpec,
    pub second: LayerSpec,
    /// Present exactly when input and output shapes differ (stride-2 or
    /// width change). Projection shortcuts stay on the shortcut path and
    /// are never masked.
    pub projection: Option<LayerSpec>,
}

/// Full architecture: input shape, stem, residual blocks, classifier head.
/// The head (global average pool for conv features, then an affine
/// classifier) is always present and never maskable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-example input shape: `[features]` or `[channels, h, w]`.
    pub input_shape: Vec<usize>,
    pub stem: LayerSpec,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Number of maskable residual branches.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Validate shape chaining through stem, blocks and head. Returns the
    /// feature shape entering the head.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.blocks.is_empty() {
            return Err(Error::Shape("network needs at least one block".into()));
        }
        if self.classes < 2 {
            return Err(Error::Shape("network needs at least two classes".into()));
        }
        let mut shape = self.stem.output_shape(&self.input_shape)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let mid = block
                .first
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("block {i} first layer: {e}")))?;
            let out = block
                .second
                .output_shape(&mid)
                .map_err(|e| Error::Shape(format!("block {i} second layer: {e}")))?;
            let shortcut_out = match &block.projection {
                Some(p) => p
                    .output_shape(&shape)
                    .map_err(|e| Error::Shape(format!("block {i} projection: {e}")))?,
                None => shape.clone(),
            };
            if shortcut_out != out {
                return Err(Error::Shape(format!(
                    "block {i}: branch yields {out:?} but shortcut yields {shortcut_out:?}"
                )));
            }
            shape = out;
        }
        Ok(shape)
    }

    /// Feature width entering the head classifier (channels are pooled for
    /// conv networks).
    pub fn head_features(&self) -> Result<usize> {
        Ok(self.validate()?[0])
    }

    /// Residual MLP with `depth` identity blocks of the given width.
    pub fn resmlp(input_dim: usize, width: usize, depth: usize, classes: usize) -> Self {
        let block = BlockSpec {
            first: LayerSpec::Affine {
                inputs: width,
                outputs: width,
            },
            second: LayerSpec::Affine {
                inputs: width,
                outputs: width,
            },
            projection: None,
        };
        NetworkSpec {
            input_shape: vec![input_dim],
            stem: LayerSpec::Affine {
                inputs: input_dim,
                outputs: width,
            },
            blocks: vec![block; depth],
            classes,
        }
    }

    /// Preset `resmlp-4`: 4 affine residual blocks of width 64.
    pub fn resmlp4(input_dim: usize, classes: usize) -> Self {
        Self::resmlp(input_dim, 64, 4, classes)
    }

    /// Preset `rescnn-6`: 6 conv blocks in three stages of widths 16/32/64
    /// with stride-2 projection blocks at the stage boundaries.
    pub fn rescnn6(in_ch: usize, side: usize, classes: usize) -> Self {
        let conv = |in_ch, out_ch, stride| LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride,
        };
        let identity_block = |ch| BlockSpec {
            first: conv(ch, ch, 1),
            second: conv(ch, ch, 1),
            projection: None,
        };
        let down_block = |in_ch, out_ch| BlockSpec {
            first: conv(in_ch, out_ch, 2),
            second: conv(out_ch, out_ch, 1),
            projection: Some(LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel: 1,
                stride: 2,
            }),
        };
        NetworkSpec {
            input_shape: vec![in_ch, side, side],
            stem: conv(in_ch, 16, 1),
            blocks: vec![
                identity_block(16),
                identity_block(16),
                down_block(16, 32),
                identity_block(32),
                down_block(32, 64),
                identity_block(64),
            ],
            classes,
        }
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// A named weight-or-bias tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// All trainable weights of one network, in a fixed deterministic order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: Vec<Param>,
    seed: u64,
}

impl ParameterSet {
    pub fn from_params(params: Vec<Param>, seed: u64) -> Result<Self> {
        let mut names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Checkpoint("duplicate parameter names".into()));
        }
        Ok(ParameterSet { params, seed })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Layer identifier of a parameter: its name without the final
    /// `.weight` / `.bias` component.
    pub fn layer_of(name: &str) -> &str {
        name.rsplit_once('.').map(|(l, _)| l).unwrap_or(name)
    }

    /// Distinct layer names in parameter order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            let layer = Self::layer_of(&p.name);
            if out.last().map(String::as_str) != Some(layer) {
                out.push(layer.to_string());
            }
        }
        out
    }
}

/// Bernoulli mask over the residual branches of one network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new(bits: Vec<bool>) -> Self {
        BlockMask { bits }
    }

    pub fn all_ones(len: usize) -> Self {
        BlockMask {
            bits: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of active branches.
    pub fn effective_block_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Number of active branches in a mask.
pub fn effective_block_count(mask: &BlockMask) -> usize {
    mask.effective_block_count()
}

/// Branch scaling applied at evaluation time. The default uses the whole
/// model verbatim; `SurvivalProbability` rescales each executed branch by
/// its survival probability instead.
#[derive(Clone, Debug, PartialEq)]
pub enum Scaling {
    None,
    SurvivalProbability(Vec<f64>),
}

/// Draw fan-in-scaled Gaussian weights (std = sqrt(2 / fan_in)) and zero
/// biases for every layer of the architecture. Deterministic in the seed.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    let head_features = spec.head_features()?;
    let mut stream = Stream::new(seed, StreamId::Init);
    let mut params = Vec::new();
    let mut push_layer = |name: &str, layer: &LayerSpec, stream: &mut Stream| {
        let std = (2.0 / layer.fan_in() as f64).sqrt();
        let wshape = layer.weight_shape();
        let numel: usize = wshape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| std * stream.next_gaussian()).collect();
        params.push(Param {
            name: format!("{name}.weight"),
            tensor: Tensor::from_vec(wshape, data).expect("weight shape"),
        });
        params.push(Param {
            name: format!("{name}.bias"),
            tensor: Tensor::zeros(layer.bias_shape()),
        });
    };

    push_layer("stem", &spec.stem, &mut stream);
    for (i, block) in spec.blocks.iter().enumerate() {
        push_layer(&format!("block{i}.first"), &block.first, &mut stream);
        push_layer(&format!("block{i}.second"), &block.second, &mut stream);
        if let Some(proj) = &block.projection {
            push_layer(&format!("block{i}.proj"), proj, &mut stream);
        }
    }
    let head = LayerSpec::Affine {
        inputs: head_features,
        outputs: spec.classes,
    };
    push_layer("head", &head, &mut stream);
    ParameterSet::from_params(params, seed)
}

/// Parameter names belonging to block `idx`'s maskable branch (the
/// projection shortcut is part of the shortcut path, not the branch).
pub fn branch_param_names(idx: usize) -> [String; 4] {
    [
        format!("block{idx}.first.weight"),
        format!("block{idx}.first.bias"),
        format!("block{idx}.second.weight"),
        format!("block{idx}.second.bias"),
    ]
}

// ── Forward pass ─────────────────────────────────────────────────────

/// A recorded forward pass: the graph plus the node ids needed to attach a
/// loss, differentiate parameters, and attack the input.
pub struct ForwardPass {
    pub graph: Graph,
    /// Leaf id of the input batch.
    pub input: NodeId,
    /// Output logits, shape [batch, classes].
    pub logits: NodeId,
    /// Leaf id of each parameter, aligned with the `ParameterSet` order.
    /// `None` for parameters whose branch was skipped this pass.
    pub param_nodes: Vec<Option<NodeId>>,
    /// Branches actually executed (equals the mask's effective count).
    pub executed_branches: usize,
    /// Total maskable branches (the network's block count).
    pub total_branches: usize,
}

impl ForwardPass {
    pub fn logits_tensor(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    /// Attach the fused mean cross-entropy loss over the batch.
    pub fn loss(&mut self, labels: &[usize]) -> Result<NodeId> {
        self.graph.softmax_cross_entropy(self.logits, labels)
    }

    /// Per-parameter gradients after a backward sweep, aligned with the
    /// `ParameterSet` order. `None` entries are parameters that were not
    /// part of the graph (skipped branches); the optimizer must leave them
    /// untouched. Present entries are exact, including exact zeros for
    /// parameters that are in the graph but unreached by the loss.
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.param_nodes
            .iter()
            .map(|id| id.map(|id| self.graph.grad_or_zeros(grads, id)))
            .collect()
    }
}

struct Builder<'a> {
    graph: Graph,
    params: &'a ParameterSet,
    param_nodes: Vec<Option<NodeId>>,
}

impl Builder<'_> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        if self.param_nodes[idx].is_none() {
            let id = self.graph.leaf(self.params.get(idx).tensor.clone());
            self.param_nodes[idx] = Some(id);
        }
        Ok(self.param_nodes[idx].unwrap())
    }

    fn affine(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.graph.affine(x, w, b)
    }

    fn layer(&mut self, name: &str, layer: &LayerSpec, x: NodeId) -> Result<NodeId> {
        match layer {
            LayerSpec::Affine { .. } => self.affine(name, x),
            LayerSpec::Conv { stride, .. } => {
                let w = self.param(&format!("{name}.weight"))?;
                let b = self.param(&format!("{name}.bias"))?;
                self.graph.conv2d(x, w, b, *stride)
            }
        }
    }
}

/// Run the network on a batch under the given block mask.
///
/// Block `l` computes `shortcut(x) + beta_l * branch(x)`; with
/// `Scaling::SurvivalProbability` an executed branch is additionally scaled
/// by `p_l`. Skipped branches are not executed at all.
pub fn forward(
    params: &ParameterSet,
    spec: &NetworkSpec,
    input: &Tensor,
    mask: &BlockMask,
    scaling: &Scaling,
) -> Result<ForwardPass> {
    if mask.len() != spec.block_count() {
        return Err(Error::Shape(format!(
            "mask has {} bits for {} blocks",
            mask.len(),
            spec.block_count()
        )));
    }
    if input.shape().len() != spec.input_shape.len() + 1
        || input.shape()[1..] != spec.input_shape[..]
    {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match spec input {:?}",
            input.shape(),
            spec.input_shape
        )));
    }
    if let Scaling::SurvivalProbability(p) = scaling {
        if p.len() != spec.block_count() {
            return Err(Error::Shape(format!(
                "survival vector has {} entries for {} blocks",
                p.len(),
                spec.block_count()
            )));
        }
    }

    let mut b = Builder {
        graph: Graph::new(),
        params,
        param_nodes: vec![None; params.len()],
    };
    let input_id = b.graph.leaf(input.clone());
    let mut h = b.layer("stem", &spec.stem, input_id)?;
    let mut executed = 0usize;

    for (i, block) in spec.blocks.iter().enumerate() {
        let shortcut = match &block.projection {
            Some(proj) => b.layer(&format!("block{i}.proj"), proj, h)?,
            None => h,
        };
        if mask.bit(i) {
            executed += 1;
            let first = b.layer(&format!("block{i}.first"), &block.first, h)?;
            let mid = b.graph.relu(first);
            let mut branch = b.layer(&format!("block{i}.second"), &block.second, mid)?;
            if let Scaling::SurvivalProbability(p) = scaling {
                branch = b.graph.scale(branch, p[i])?;
            }
            h = b.graph.add(shortcut, branch)?;
        } else {
            h = shortcut;
        }
    }

    if spec.input_shape.len() == 3 {
        h = b.graph.global_avg_pool(h)?;
    }
    let logits = b.affine("head", h)?;

    Ok(ForwardPass {
        graph: b.graph,
        input: input_id,
        logits,
        param_nodes: b.param_nodes,
        executed_branches: executed,
        total_branches: spec.block_count(),
    })
}
