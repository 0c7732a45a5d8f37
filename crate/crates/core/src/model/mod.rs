//! Model construction over a label tree: the branched phase-1 model with
//! per-level FC stacks and the common-width adapter dense layer in every
//! branch, and the distilled variant where one shared FC stack feeds L
//! separate softmax heads on top of a frozen trunk and frozen adapters.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ArchConfig, TrunkBlock};
use crate::error::{Error, Result};
use crate::nn::{init, Graph, NodeId, NodeKind, Op};
use crate::scalar::Scalar;
use crate::shaw::{self, ShawTensor};
use crate::tensor::Tensor;
use crate::tree::{LabelTree, LevelLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bcnn,
    Sha,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Bcnn => write!(f, "bcnn"),
            Variant::Sha => write!(f, "sha"),
        }
    }
}

/// What part of the architecture a node belongs to. Drives weight
/// extraction, freezing, and per-level cost attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    None,
    Trunk { block: usize },
    Adapter { level: usize },
    BranchFc { level: usize },
    /// Shared-stack application; `level` is `None` on the shared parameters
    /// themselves and `Some` on each per-branch application.
    SharedFc { level: Option<usize> },
    Head { level: usize },
}

impl Role {
    /// Level a compute node's cost is attributed to, if branch-exclusive.
    pub fn cost_level(&self) -> Option<usize> {
        match self {
            Role::Adapter { level } | Role::BranchFc { level } | Role::Head { level } => {
                Some(*level)
            }
            Role::SharedFc { level } => *level,
            _ => None,
        }
    }

    pub fn in_bundle(&self) -> bool {
        matches!(self, Role::Trunk { .. } | Role::Adapter { .. })
    }
}

/// Serialized trunk + adapter weights carried from phase 1 into phase 2.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub tensors: Vec<ShawTensor>,
}

impl WeightBundle {
    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ShawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        shaw::write_file(path, &self.tensors)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(WeightBundle {
            tensors: shaw::read_file(path)?,
        })
    }

    /// The bundle manifest a config implies: names and shapes derived from
    /// the architecture alone, zero-valued. Used to validate extraction and
    /// to build cost-only models.
    pub fn zeroed(arch: &ArchConfig, tree: &LabelTree) -> Result<Self> {
        arch.validate(tree)?;
        let mut tensors = Vec::new();
        let [mut c, mut h, mut w] = arch.input_shape;
        let mut tap_dims: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, block) in arch.trunk.iter().enumerate() {
            match block {
                TrunkBlock::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    batch_norm,
                } => {
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::Config(format!(
                            "trunk block {i}: {kernel}x{kernel} window exceeds {h}x{w} input"
                        )));
                    }
                    tensors.push(ShawTensor::new(
                        format!("trunk.{i}.weight"),
                        &[*out_channels, c, *kernel, *kernel],
                        vec![0.0; out_channels * c * kernel * kernel],
                    ));
                    tensors.push(ShawTensor::new(
                        format!("trunk.{i}.bias"),
                        &[*out_channels],
                        vec![0.0; *out_channels],
                    ));
                    if *batch_norm {
                        for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                            tensors.push(ShawTensor::new(
                                format!("trunk.{i}.bn.{suffix}"),
                                &[*out_channels],
                                vec![0.0; *out_channels],
                            ));
                        }
                    }
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                    c = *out_channels;
                }
                TrunkBlock::Pool { window, stride } => {
                    let s = TrunkBlock::pool_stride(*window, *stride);
                    if *window > h || *window > w {
                        return Err(Error::Config(format!(
                            "trunk block {i}: pool window {window} exceeds {h}x{w} input"
                        )));
                    }
                    h = (h - window) / s + 1;
                    w = (w - window) / s + 1;
                }
            }
            tap_dims.insert(i + 1, c * h * w);
        }
        for (level, &tap) in arch.taps.iter().enumerate() {
            let flat = tap_dims[&tap];
            tensors.push(ShawTensor::new(
                format!("adapter.{level}.weight"),
                &[flat, arch.adapter_units],
                vec![0.0; flat * arch.adapter_units],
            ));
            tensors.push(ShawTensor::new(
                format!("adapter.{level}.bias"),
                &[arch.adapter_units],
                vec![0.0; arch.adapter_units],
            ));
        }
        Ok(WeightBundle { tensors })
    }
}

/// A built model: the layer graph plus metadata for training, prediction,
/// extraction, and cost accounting.
#[derive(Debug)]
pub struct ModelGraph<T: Scalar> {
    pub graph: Graph<T>,
    variant: Variant,
    levels: usize,
    arch: ArchConfig,
    input: NodeId,
    taps: Vec<NodeId>,
    adapters: Vec<NodeId>,
    logits: Vec<NodeId>,
    probs: Vec<NodeId>,
    losses: Vec<NodeId>,
    total_loss: NodeId,
    roles: Vec<Role>,
}

struct NetBuilder<T: Scalar> {
    g: Graph<T>,
    roles: Vec<Role>,
}

impl<T: Scalar> NetBuilder<T> {
    fn new() -> Self {
        NetBuilder {
            g: Graph::new(),
            roles: Vec::new(),
        }
    }

    fn tag(&mut self, id: NodeId, role: Role) -> NodeId {
        self.roles.resize(self.g.len(), Role::None);
        self.roles[id.0] = role;
        id
    }

    fn sync(&mut self, id: NodeId) -> NodeId {
        self.roles.resize(self.g.len(), Role::None);
        id
    }
}

struct TrunkOut {
    input: NodeId,
    block_outs: Vec<NodeId>,
}

fn build_trunk<T: Scalar>(
    b: &mut NetBuilder<T>,
    arch: &ArchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrunkOut> {
    let [c0, h0, w0] = arch.input_shape;
    let input = b.g.input("input", &[1, c0, h0, w0]);
    b.sync(input);
    let mut cur = input;
    let mut channels = c0;
    let mut block_outs = Vec::with_capacity(arch.trunk.len());
    for (i, block) in arch.trunk.iter().enumerate() {
        let role = Role::Trunk { block: i };
        match block {
            TrunkBlock::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                batch_norm,
            } => {
                let fan_in = channels * kernel * kernel;
                let w = b.g.param(
                    &format!("trunk.{i}.weight"),
                    init::kaiming_uniform(rng, &[*out_channels, channels, *kernel, *kernel], fan_in),
                );
                b.tag(w, role);
                let bias = b
                    .g
                    .param(&format!("trunk.{i}.bias"), init::zeros(&[*out_channels]));
                b.tag(bias, role);
                cur = b.g.conv2d(cur, w, bias, *stride, *padding)?;
                b.tag(cur, role);
                if *batch_norm {
                    let gamma = b
                        .g
                        .param(&format!("trunk.{i}.bn.gamma"), init::ones(&[*out_channels]));
                    b.tag(gamma, role);
                    let beta = b
                        .g
                        .param(&format!("trunk.{i}.bn.beta"), init::zeros(&[*out_channels]));
                    b.tag(beta, role);
                    cur = b
                        .g
                        .batchnorm2d(&format!("trunk.{i}.bn"), cur, gamma, beta, 0.1, 1e-5)?;
                    b.tag(cur, role);
                }
                cur = b.g.relu(cur)?;
                b.tag(cur, role);
                channels = *out_channels;
            }
            TrunkBlock::Pool { window, stride } => {
                let s = TrunkBlock::pool_stride(*window, *stride);
                cur = b.g.maxpool2d(cur, *window, s)?;
                b.tag(cur, role);
            }
        }
        block_outs.push(cur);
    }
    Ok(TrunkOut { input, block_outs })
}

/// Flatten the tapped trunk features and apply the common-width adapter
/// dense layer (with the trunk activation) for one branch.
fn build_adapter<T: Scalar>(
    b: &mut NetBuilder<T>,
    arch: &ArchConfig,
    level: usize,
    tap_node: NodeId,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let role = Role::Adapter { level };
    let flat = b.g.flatten(tap_node)?;
    b.tag(flat, role);
    let flat_dim = b.g.value(flat).shape()[1];
    let h = arch.adapter_units;
    let w = b.g.param(
        &format!("adapter.{level}.weight"),
        init::kaiming_uniform(rng, &[flat_dim, h], flat_dim),
    );
    b.tag(w, role);
    let bias = b.g.param(&format!("adapter.{level}.bias"), init::zeros(&[h]));
    b.tag(bias, role);
    let lin = b.g.dense(flat, w, bias)?;
    b.tag(lin, role);
    let act = b.g.relu(lin)?;
    b.tag(act, role);
    Ok(act)
}

fn build_head<T: Scalar>(
    b: &mut NetBuilder<T>,
    name: &str,
    level: usize,
    input: NodeId,
    in_dim: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, NodeId, NodeId)> {
    let role = Role::Head { level };
    let w = b.g.param(
        &format!("{name}.weight"),
        init::kaiming_uniform(rng, &[in_dim, classes], in_dim),
    );
    b.tag(w, role);
    let bias = b.g.param(&format!("{name}.bias"), init::zeros(&[classes]));
    b.tag(bias, role);
    let logits = b.g.dense(input, w, bias)?;
    b.tag(logits, role);
    let probs = b.g.softmax(logits)?;
    b.sync(probs);
    let loss = b.g.softmax_cross_entropy(logits)?;
    b.sync(loss);
    Ok((logits, probs, loss))
}

fn finish<T: Scalar>(
    mut b: NetBuilder<T>,
    variant: Variant,
    arch: &ArchConfig,
    input: NodeId,
    taps: Vec<NodeId>,
    adapters: Vec<NodeId>,
    heads: Vec<(NodeId, NodeId, NodeId)>,
) -> Result<ModelGraph<T>> {
    let levels = heads.len();
    let losses: Vec<NodeId> = heads.iter().map(|h| h.2).collect();
    let uniform = vec![1.0 / levels as f64; levels];
    let total_loss = b.g.weighted_sum(&losses, &uniform)?;
    b.sync(total_loss);
    Ok(ModelGraph {
        graph: b.g,
        variant,
        levels,
        arch: arch.clone(),
        input,
        taps,
        adapters,
        logits: heads.iter().map(|h| h.0).collect(),
        probs: heads.iter().map(|h| h.1).collect(),
        losses,
        total_loss,
        roles: b.roles,
    })
}

/// Build the branched phase-1 model: each level taps the trunk, applies
/// flatten -> adapter dense (h units) -> its own FC stack -> affine ->
/// softmax over that level's classes.
pub fn build_bcnn<T: Scalar>(
    arch: &ArchConfig,
    tree: &LabelTree,
    seed: u64,
) -> Result<ModelGraph<T>> {
    arch.validate(tree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetBuilder::new();
    let trunk = build_trunk(&mut b, arch, &mut rng)?;
    let class_counts = tree.level_class_counts();
    let stacks = arch.branch_stacks();

    let mut taps = Vec::new();
    let mut adapters = Vec::new();
    let mut heads = Vec::new();
    for level in 0..arch.levels() {
        let tap_node = trunk.block_outs[arch.taps[level] - 1];
        taps.push(tap_node);
        let adapter = build_adapter(&mut b, arch, level, tap_node, &mut rng)?;
        adapters.push(adapter);

        let mut cur = adapter;
        let mut dim = arch.adapter_units;
        for (k, &width) in stacks[level].iter().enumerate() {
            if width == 0 {
                return Err(Error::Config(format!(
                    "branch {level} stack layer {k} has zero width"
                )));
            }
            let role = Role::BranchFc { level };
            let w = b.g.param(
                &format!("branch.{level}.fc.{k}.weight"),
                init::kaiming_uniform(&mut rng, &[dim, width], dim),
            );
            b.tag(w, role);
            let bias = b
                .g
                .param(&format!("branch.{level}.fc.{k}.bias"), init::zeros(&[width]));
            b.tag(bias, role);
            cur = b.g.dense(cur, w, bias)?;
            b.tag(cur, role);
            cur = b.g.relu(cur)?;
            b.tag(cur, role);
            dim = width;
        }
        heads.push(build_head(
            &mut b,
            &format!("branch.{level}.head"),
            level,
            cur,
            dim,
            class_counts[level],
            &mut rng,
        )?);
    }
    finish(b, Variant::Bcnn, arch, trunk.input, taps, adapters, heads)
}

/// Options for building the distilled model.
#[derive(Debug, Clone, Copy)]
pub struct ShaOptions {
    /// Freeze the adapter dense layers alongside the trunk.
    pub freeze_adapters: bool,
}

impl Default for ShaOptions {
    fn default() -> Self {
        ShaOptions {
            freeze_adapters: true,
        }
    }
}

/// Build the distilled model: trunk and adapters come frozen from the
/// bundle, one shared FC stack is applied to every branch's adapter output
/// (same weights, different inputs), and L separate heads stay trainable.
pub fn build_sha<T: Scalar>(
    arch: &ArchConfig,
    tree: &LabelTree,
    bundle: &WeightBundle,
    seed: u64,
) -> Result<ModelGraph<T>> {
    build_sha_with(arch, tree, bundle, seed, ShaOptions::default())
}

pub fn build_sha_with<T: Scalar>(
    arch: &ArchConfig,
    tree: &LabelTree,
    bundle: &WeightBundle,
    seed: u64,
    opts: ShaOptions,
) -> Result<ModelGraph<T>> {
    arch.validate(tree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetBuilder::new();
    let trunk = build_trunk(&mut b, arch, &mut rng)?;
    let class_counts = tree.level_class_counts();

    let mut taps = Vec::new();
    let mut adapters = Vec::new();
    for level in 0..arch.levels() {
        let tap_node = trunk.block_outs[arch.taps[level] - 1];
        taps.push(tap_node);
        adapters.push(build_adapter(&mut b, arch, level, tap_node, &mut rng)?);
    }

    // One set of shared parameters, applied once per branch below.
    let mut shared_params = Vec::new();
    let mut dim = arch.adapter_units;
    for (k, &width) in arch.shared_fc.iter().enumerate() {
        if width == 0 {
            return Err(Error::Config(format!("shared stack layer {k} has zero width")));
        }
        let w = b.g.param(
            &format!("shared.fc.{k}.weight"),
            init::kaiming_uniform(&mut rng, &[dim, width], dim),
        );
        b.tag(w, Role::SharedFc { level: None });
        let bias = b
            .g
            .param(&format!("shared.fc.{k}.bias"), init::zeros(&[width]));
        b.tag(bias, Role::SharedFc { level: None });
        shared_params.push((w, bias));
        dim = width;
    }
    let shared_out_dim = dim;

    let mut heads = Vec::new();
    for level in 0..arch.levels() {
        let mut cur = adapters[level];
        for &(w, bias) in &shared_params {
            let role = Role::SharedFc { level: Some(level) };
            cur = b.g.dense(cur, w, bias)?;
            b.tag(cur, role);
            cur = b.g.relu(cur)?;
            b.tag(cur, role);
        }
        heads.push(build_head(
            &mut b,
            &format!("head.{level}"),
            level,
            cur,
            shared_out_dim,
            class_counts[level],
            &mut rng,
        )?);
    }

    let mut model = finish(b, Variant::Sha, arch, trunk.input, taps, adapters, heads)?;
    model.load_bundle(bundle, opts)?;
    Ok(model)
}

impl<T: Scalar> ModelGraph<T> {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn input_id(&self) -> NodeId {
        self.input
    }

    pub fn logits_ids(&self) -> &[NodeId] {
        &self.logits
    }

    pub fn loss_ids(&self) -> &[NodeId] {
        &self.losses
    }

    pub fn total_loss_id(&self) -> NodeId {
        self.total_loss
    }

    pub fn role(&self, id: NodeId) -> Role {
        self.roles[id.0]
    }

    /// Trunk activation feeding branch `level`.
    pub fn tap_activation(&self, level: usize) -> &Tensor<T> {
        self.graph.value(self.taps[level])
    }

    /// Post-activation adapter output of branch `level`.
    pub fn adapter_activation(&self, level: usize) -> &Tensor<T> {
        self.graph.value(self.adapters[level])
    }

    /// Bind an image batch and, optionally, per-level labels (`labels[l]`
    /// lists the level-`l+1` class index of every sample).
    pub fn bind_batch(&mut self, images: Tensor<T>, labels: Option<&[Vec<usize>]>) -> Result<()> {
        self.graph.bind_input(self.input, images)?;
        if let Some(labels) = labels {
            if labels.len() != self.levels {
                return Err(Error::Train(format!(
                    "{} label vectors for {} levels",
                    labels.len(),
                    self.levels
                )));
            }
            for (l, level_labels) in labels.iter().enumerate() {
                self.graph.set_labels(self.losses[l], level_labels)?;
            }
        }
        Ok(())
    }

    /// Forward for training: losses, probabilities, and the combined loss.
    pub fn forward_train(&mut self) -> Result<()> {
        let mut targets = self.probs.clone();
        targets.extend_from_slice(&self.losses);
        targets.push(self.total_loss);
        self.graph.forward_to(&targets)
    }

    /// Forward for inference: per-level probabilities only.
    pub fn forward_eval(&mut self) -> Result<()> {
        let targets = self.probs.clone();
        self.graph.forward_to(&targets)
    }

    /// Per-level probability tensors for a batch; each row sums to one.
    pub fn forward_levels(&mut self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.bind_batch(batch.clone(), None)?;
        self.forward_eval()?;
        Ok(self.probs.iter().map(|&id| self.graph.value(id).clone()).collect())
    }

    /// Per-level argmax predictions (ties to the lowest index) with the
    /// winning probabilities, for a single image [C,H,W].
    pub fn predict(&mut self, image: &Tensor<T>) -> Result<(LevelLabels, Vec<f64>)> {
        if image.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "predict expects one [C,H,W] image, got {:?}",
                image.shape()
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = Tensor::from_vec(&shape, image.data().to_vec())?;
        let level_probs = self.forward_levels(&batch)?;
        let mut per_level = Vec::with_capacity(self.levels);
        let mut confidences = Vec::with_capacity(self.levels);
        for probs in &level_probs {
            let row = probs.data();
            let mut best = 0usize;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            per_level.push(best);
            confidences.push(row[best].as_f64());
        }
        Ok((LevelLabels { per_level }, confidences))
    }

    pub fn set_loss_weights(&mut self, weights: &[f64]) -> Result<()> {
        self.graph
            .set_weighted_sum_weights(self.total_loss, weights)
    }

    pub fn loss_values(&self) -> Vec<T> {
        self.losses
            .iter()
            .map(|&id| self.graph.scalar_value(id))
            .collect()
    }

    pub fn level_probs(&self, level: usize) -> &Tensor<T> {
        self.graph.value(self.probs[level])
    }

    /// All named tensors (parameters, then any normalization buffers) in
    /// graph order, at container precision.
    pub fn named_tensors(&self) -> Vec<ShawTensor> {
        let mut out = Vec::new();
        for (i, node) in self.graph.nodes().iter().enumerate() {
            let id = NodeId(i);
            if matches!(node.kind, NodeKind::Param { .. }) {
                let v = self.graph.value(id);
                out.push(ShawTensor::new(node.name.clone(), v.shape(), v.to_f32_vec()));
            } else if matches!(node.op, Op::BatchNorm2d { .. }) {
                if let Some((mean, var)) = self.graph.bn_buffers(id) {
                    out.push(ShawTensor::new(
                        format!("{}.running_mean", node.name),
                        &[mean.len()],
                        mean.iter().map(|v| v.as_f32()).collect(),
                    ));
                    out.push(ShawTensor::new(
                        format!("{}.running_var", node.name),
                        &[var.len()],
                        var.iter().map(|v| v.as_f32()).collect(),
                    ));
                }
            }
        }
        out
    }

    /// Load a full named-tensor set; the names and shapes must match the
    /// model exactly, in both directions.
    pub fn load_named(&mut self, tensors: &[ShawTensor]) -> Result<()> {
        let own = self.named_tensors();
        let own_names: Vec<&str> = own.iter().map(|t| t.name.as_str()).collect();
        for t in tensors {
            if !own_names.contains(&t.name.as_str()) {
                return Err(Error::WeightFormat(format!(
                    "tensor '{}' does not exist in the model",
                    t.name
                )));
            }
        }
        for name in &own_names {
            if !tensors.iter().any(|t| t.name == *name) {
                return Err(Error::WeightFormat(format!(
                    "model tensor '{name}' missing from the container"
                )));
            }
        }
        for t in tensors {
            self.set_named_tensor(t)?;
        }
        Ok(())
    }

    fn set_named_tensor(&mut self, tensor: &ShawTensor) -> Result<()> {
        for i in 0..self.graph.len() {
            let id = NodeId(i);
            let node = self.graph.node(id);
            if matches!(node.kind, NodeKind::Param { .. }) && node.name == tensor.name {
                let shape = self.graph.value(id).shape().to_vec();
                if shape != tensor.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor '{}': model shape {:?} vs container {:?}",
                        tensor.name,
                        shape,
                        tensor.shape()
                    )));
                }
                *self.graph.value_mut(id) = Tensor::from_f32_slice(&shape, &tensor.data)?;
                return Ok(());
            }
            if matches!(node.op, Op::BatchNorm2d { .. }) {
                let mean_name = format!("{}.running_mean", node.name);
                let var_name = format!("{}.running_var", node.name);
                if tensor.name == mean_name || tensor.name == var_name {
                    let (mean, var) = self.graph.bn_buffers(id).expect("bn has buffers");
                    let mut mean: Vec<T> = mean.to_vec();
                    let mut var: Vec<T> = var.to_vec();
                    let target: Vec<T> = tensor.data.iter().map(|&v| T::from_f32(v)).collect();
                    if tensor.name == mean_name {
                        if target.len() != mean.len() {
                            return Err(Error::ShapeMismatch(format!(
                                "buffer '{}' length",
                                tensor.name
                            )));
                        }
                        mean = target;
                    } else {
                        if target.len() != var.len() {
                            return Err(Error::ShapeMismatch(format!(
                                "buffer '{}' length",
                                tensor.name
                            )));
                        }
                        var = target;
                    }
                    self.graph.set_bn_buffers(id, &mean, &var)?;
                    return Ok(());
                }
            }
        }
        Err(Error::WeightFormat(format!(
            "tensor '{}' does not exist in the model",
            tensor.name
        )))
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        shaw::write_file(path, &self.named_tensors())
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let tensors = shaw::read_file(path)?;
        self.load_named(&tensors)
    }

    /// Names of the tensors a bundle extracted from this architecture
    /// contains: trunk parameters (and normalization buffers) plus the L
    /// adapter dense layers. Branch stacks and heads are excluded.
    fn bundle_tensors(&self) -> Vec<ShawTensor> {
        let mut out = Vec::new();
        for (i, node) in self.graph.nodes().iter().enumerate() {
            let id = NodeId(i);
            if !self.roles[i].in_bundle() {
                continue;
            }
            if matches!(node.kind, NodeKind::Param { .. }) {
                let v = self.graph.value(id);
                out.push(ShawTensor::new(node.name.clone(), v.shape(), v.to_f32_vec()));
            } else if matches!(node.op, Op::BatchNorm2d { .. }) {
                if let Some((mean, var)) = self.graph.bn_buffers(id) {
                    out.push(ShawTensor::new(
                        format!("{}.running_mean", node.name),
                        &[mean.len()],
                        mean.iter().map(|v| v.as_f32()).collect(),
                    ));
                    out.push(ShawTensor::new(
                        format!("{}.running_var", node.name),
                        &[var.len()],
                        var.iter().map(|v| v.as_f32()).collect(),
                    ));
                }
            }
        }
        out
    }

    /// Save-for-phase-2: exactly the trunk and adapter tensors of a trained
    /// (or untrained) branched model.
    pub fn extract_weights(&self) -> Result<WeightBundle> {
        if self.variant != Variant::Bcnn {
            return Err(Error::Train(
                "extract_weights requires the branched variant".into(),
            ));
        }
        Ok(WeightBundle {
            tensors: self.bundle_tensors(),
        })
    }

    /// Load a bundle into the trunk/adapter tensors and freeze them.
    fn load_bundle(&mut self, bundle: &WeightBundle, opts: ShaOptions) -> Result<()> {
        let own = self.bundle_tensors();
        if own.len() != bundle.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "bundle has {} tensors, architecture expects {}",
                bundle.tensors.len(),
                own.len()
            )));
        }
        for t in &own {
            let src = bundle.get(&t.name).ok_or_else(|| {
                Error::ShapeMismatch(format!("bundle is missing tensor '{}'", t.name))
            })?;
            if src.dims != t.dims {
                return Err(Error::ShapeMismatch(format!(
                    "bundle tensor '{}': shape {:?} vs architecture {:?}",
                    t.name, src.dims, t.dims
                )));
            }
            self.set_named_tensor(src)?;
        }
        for i in 0..self.graph.len() {
            let id = NodeId(i);
            let role = self.roles[i];
            let freeze = match role {
                Role::Trunk { .. } => true,
                Role::Adapter { .. } => opts.freeze_adapters,
                _ => false,
            };
            if !freeze {
                continue;
            }
            if matches!(self.graph.node(id).kind, NodeKind::Param { .. }) {
                self.graph.set_frozen(id, true)?;
            } else if matches!(self.graph.node(id).op, Op::BatchNorm2d { .. }) {
                self.graph.set_bn_frozen(id, true)?;
            }
        }
        Ok(())
    }

    pub fn frozen_param_names(&self) -> Vec<String> {
        self.graph
            .param_ids()
            .into_iter()
            .filter(|&id| self.graph.is_frozen(id))
            .map(|id| self.graph.node(id).name.clone())
            .collect()
    }

    pub fn has_frozen_params(&self) -> bool {
        self.graph
            .param_ids()
            .into_iter()
            .any(|id| self.graph.is_frozen(id))
    }
}
