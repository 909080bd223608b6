//! Compiled execution graph and the path-conditioned forward/backward engine.
//!
//! [`compile`] lowers an [`ArchGraph`] into a flat node list where every conv
//! and its fused batchnorm form one unit. Parameters live in a slot arena
//! ([`Params`]); a resolution table maps graph nodes to slots, which is where
//! gating plugs in: a gated node's slot depends on the active gate.

use std::collections::HashMap;

use ndarray::{Array1, Array4, ArrayD, ArrayViewD, ArrayViewMutD};

use crate::arch::{ArchGraph, LayerKind};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BnCache;
use crate::nn::ops;
use crate::nn::{BatchNorm, Conv2d, Feature, Linear, Scalar};

/// One conv layer together with its fused batchnorm, if any. Replicas of a
/// gated block are whole `ConvUnit`s, so each replica owns its own
/// normalization parameters and running statistics.
#[derive(Clone, Debug)]
pub struct ConvUnit<F> {
    pub conv: Conv2d<F>,
    pub bn: Option<BatchNorm<F>>,
}

#[derive(Clone, Debug)]
pub enum Unit<F> {
    Conv(ConvUnit<F>),
    Linear(Linear<F>),
    Bn(BatchNorm<F>),
}

/// Parameter arena: units plus their checkpoint name prefixes.
#[derive(Clone, Debug)]
pub struct Params<F> {
    pub units: Vec<Unit<F>>,
    pub names: Vec<String>,
}

impl<F> Default for Params<F> {
    fn default() -> Self {
        Self { units: Vec::new(), names: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Input,
    /// Conv (+ fused bn); parameter slot resolved per forward.
    ConvUnit,
    /// Standalone batchnorm.
    Bn,
    Linear,
    Relu,
    /// Global average pooling.
    Pool,
    /// Elementwise addition; `skip_pos` is the index (into `inputs`) of the
    /// skip-branch operand, used by skip-gradient attacks.
    Add { skip_pos: usize },
    Output,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    /// Identifier from the architecture file (fused bns keep the conv's id).
    pub arch_id: String,
}

#[derive(Clone, Debug)]
pub struct CompiledGraph {
    pub nodes: Vec<Node>,
    pub input: usize,
    pub output: usize,
    /// Conv-unit nodes in topological order.
    pub conv_nodes: Vec<usize>,
    pub arch_hash: String,
    pub num_classes: usize,
}

impl CompiledGraph {
    pub fn has_skip_connections(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.kind, NodeKind::Add { .. }))
    }

    /// Consumers of a node.
    pub fn consumers(&self, node: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].inputs.contains(&node))
            .collect()
    }
}

/// Lower an architecture graph, folding fused batchnorms into conv units.
pub fn compile(arch: &ArchGraph) -> Result<CompiledGraph> {
    let n = arch.nodes.len();
    // arch index -> compiled index (fused bns map to their conv's node)
    let mut map = vec![usize::MAX; n];
    let fused_of: HashMap<usize, usize> =
        arch.fused_bn.iter().map(|(&c, &b)| (b, c)).collect();

    let mut nodes: Vec<Node> = Vec::new();
    for (i, nd) in arch.nodes.iter().enumerate() {
        if fused_of.contains_key(&i) {
            continue; // folded into its conv
        }
        let kind = match &nd.kind {
            LayerKind::Input { .. } => NodeKind::Input,
            LayerKind::Conv { .. } => NodeKind::ConvUnit,
            LayerKind::BatchNorm { .. } => NodeKind::Bn,
            LayerKind::Linear { .. } => NodeKind::Linear,
            LayerKind::Activation => NodeKind::Relu,
            LayerKind::Pool => NodeKind::Pool,
            LayerKind::Add { .. } => NodeKind::Add { skip_pos: 0 },
            LayerKind::Output => NodeKind::Output,
        };
        map[i] = nodes.len();
        nodes.push(Node { kind, inputs: Vec::new(), arch_id: nd.id.clone() });
    }
    for (i, &conv) in &fused_of {
        map[*i] = map[conv];
    }

    // Rewire edges through the folded bns.
    for (i, nd) in arch.nodes.iter().enumerate() {
        if fused_of.contains_key(&i) {
            continue;
        }
        let ci = map[i];
        let mut sources = arch.inputs_of(i);
        // a fused bn's consumers read from the conv node
        sources = sources
            .into_iter()
            .map(|s| fused_of.get(&s).copied().unwrap_or(s))
            .collect();
        nodes[ci].inputs = sources.into_iter().map(|s| map[s]).collect();
        if let LayerKind::Add { skip: Some(ref skip_id) } = nd.kind {
            let skip_arch = arch
                .node_index(skip_id)
                .ok_or_else(|| Error::Graph(format!("unknown skip node `{skip_id}`")))?;
            let skip_c = map[skip_arch];
            let pos = nodes[ci]
                .inputs
                .iter()
                .position(|&p| p == skip_c)
                .ok_or_else(|| Error::Graph(format!("skip `{skip_id}` not an add input")))?;
            if let NodeKind::Add { skip_pos } = &mut nodes[ci].kind {
                *skip_pos = pos;
            }
        }
    }

    let conv_nodes: Vec<usize> = (0..nodes.len())
        .filter(|&i| matches!(nodes[i].kind, NodeKind::ConvUnit))
        .collect();
    let num_classes = arch
        .nodes
        .iter()
        .rev()
        .find_map(|nd| match nd.kind {
            LayerKind::Linear { out_f, .. } => Some(out_f),
            _ => None,
        })
        .unwrap_or(0);

    Ok(CompiledGraph {
        input: map[arch.input],
        output: map[arch.output],
        nodes,
        conv_nodes,
        arch_hash: arch.content_hash(),
        num_classes,
    })
}

impl<F: Scalar> Params<F> {
    pub fn push(&mut self, name: String, unit: Unit<F>) -> usize {
        self.units.push(unit);
        self.names.push(name);
        self.units.len() - 1
    }

    /// Visit every parameter and statistic, in a stable order.
    pub fn visit(&self, mut f: impl FnMut(&str, ArrayViewD<'_, F>)) {
        for (unit, prefix) in self.units.iter().zip(&self.names) {
            match unit {
                Unit::Conv(u) => {
                    f(&format!("{prefix}.weight"), u.conv.weight.view().into_dyn());
                    if let Some(b) = &u.conv.bias {
                        f(&format!("{prefix}.conv_bias"), b.view().into_dyn());
                    }
                    if let Some(bn) = &u.bn {
                        visit_bn(prefix, bn, &mut f);
                    }
                }
                Unit::Linear(u) => {
                    f(&format!("{prefix}.weight"), u.weight.view().into_dyn());
                    f(&format!("{prefix}.bias"), u.bias.view().into_dyn());
                }
                Unit::Bn(bn) => visit_bn(prefix, bn, &mut f),
            }
        }
    }

    /// Visit trainable parameters only (running statistics excluded).
    pub fn visit_trainable(&self, mut f: impl FnMut(&str, ArrayViewD<'_, F>)) {
        for (unit, prefix) in self.units.iter().zip(&self.names) {
            match unit {
                Unit::Conv(u) => {
                    f(&format!("{prefix}.weight"), u.conv.weight.view().into_dyn());
                    if let Some(b) = &u.conv.bias {
                        f(&format!("{prefix}.conv_bias"), b.view().into_dyn());
                    }
                    if let Some(bn) = &u.bn {
                        f(&format!("{prefix}.bn.gamma"), bn.gamma.view().into_dyn());
                        f(&format!("{prefix}.bn.beta"), bn.beta.view().into_dyn());
                    }
                }
                Unit::Linear(u) => {
                    f(&format!("{prefix}.weight"), u.weight.view().into_dyn());
                    f(&format!("{prefix}.bias"), u.bias.view().into_dyn());
                }
                Unit::Bn(bn) => {
                    f(&format!("{prefix}.bn.gamma"), bn.gamma.view().into_dyn());
                    f(&format!("{prefix}.bn.beta"), bn.beta.view().into_dyn());
                }
            }
        }
    }

    /// Visit trainable parameters mutably (running statistics excluded).
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (unit, prefix) in self.units.iter_mut().zip(&self.names) {
            match unit {
                Unit::Conv(u) => {
                    f(&format!("{prefix}.weight"), u.conv.weight.view_mut().into_dyn());
                    if let Some(b) = &mut u.conv.bias {
                        f(&format!("{prefix}.conv_bias"), b.view_mut().into_dyn());
                    }
                    if let Some(bn) = &mut u.bn {
                        f(&format!("{prefix}.bn.gamma"), bn.gamma.view_mut().into_dyn());
                        f(&format!("{prefix}.bn.beta"), bn.beta.view_mut().into_dyn());
                    }
                }
                Unit::Linear(u) => {
                    f(&format!("{prefix}.weight"), u.weight.view_mut().into_dyn());
                    f(&format!("{prefix}.bias"), u.bias.view_mut().into_dyn());
                }
                Unit::Bn(bn) => {
                    f(&format!("{prefix}.bn.gamma"), bn.gamma.view_mut().into_dyn());
                    f(&format!("{prefix}.bn.beta"), bn.beta.view_mut().into_dyn());
                }
            }
        }
    }

    /// Stable hash over every stored array (parameters and statistics).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit(|name, view| {
            h.update(name.as_bytes());
            for v in view.iter() {
                h.update(Scalar::to_f64(*v).to_le_bytes());
            }
        });
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Visit every stored array mutably (used by checkpoint loading).
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (unit, prefix) in self.units.iter_mut().zip(&self.names) {
            match unit {
                Unit::Conv(u) => {
                    f(&format!("{prefix}.weight"), u.conv.weight.view_mut().into_dyn());
                    if let Some(b) = &mut u.conv.bias {
                        f(&format!("{prefix}.conv_bias"), b.view_mut().into_dyn());
                    }
                    if let Some(bn) = &mut u.bn {
                        visit_bn_mut(prefix, bn, &mut f);
                    }
                }
                Unit::Linear(u) => {
                    f(&format!("{prefix}.weight"), u.weight.view_mut().into_dyn());
                    f(&format!("{prefix}.bias"), u.bias.view_mut().into_dyn());
                }
                Unit::Bn(bn) => visit_bn_mut(prefix, bn, &mut f),
            }
        }
    }
}

fn visit_bn<F: Scalar>(prefix: &str, bn: &BatchNorm<F>, f: &mut impl FnMut(&str, ArrayViewD<'_, F>)) {
    f(&format!("{prefix}.bn.gamma"), bn.gamma.view().into_dyn());
    f(&format!("{prefix}.bn.beta"), bn.beta.view().into_dyn());
    f(&format!("{prefix}.bn.running_mean"), bn.running_mean.view().into_dyn());
    f(&format!("{prefix}.bn.running_var"), bn.running_var.view().into_dyn());
}

fn visit_bn_mut<F: Scalar>(
    prefix: &str,
    bn: &mut BatchNorm<F>,
    f: &mut impl FnMut(&str, ArrayViewMutD<'_, F>),
) {
    f(&format!("{prefix}.bn.gamma"), bn.gamma.view_mut().into_dyn());
    f(&format!("{prefix}.bn.beta"), bn.beta.view_mut().into_dyn());
    f(&format!("{prefix}.bn.running_mean"), bn.running_mean.view_mut().into_dyn());
    f(&format!("{prefix}.bn.running_var"), bn.running_var.view_mut().into_dyn());
}

/// Gradients keyed by parameter name.
pub type GradMap<F> = HashMap<String, ArrayD<F>>;

pub fn grad_accumulate<F: Scalar>(map: &mut GradMap<F>, name: String, grad: ArrayD<F>) {
    map.entry(name)
        .and_modify(|g| *g += &grad)
        .or_insert(grad);
}

/// Merge `src` into `dst`, summing overlapping entries.
pub fn grad_merge<F: Scalar>(dst: &mut GradMap<F>, src: GradMap<F>) {
    for (k, v) in src {
        grad_accumulate(dst, k, v);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics; running statistics of executed units are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOpts {
    pub mode: Mode,
    /// Stop after computing this node (inclusive); later nodes are skipped.
    pub stop_at: Option<usize>,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        Self { mode: Mode::Eval, stop_at: None }
    }
}

/// Activations and caches retained by a forward pass.
pub struct Trace<F> {
    pub acts: Vec<Option<Feature<F>>>,
    pub bn_caches: Vec<Option<BnCache<F>>>,
    /// Pre-batchnorm conv outputs, kept in train mode for the backward pass.
    pub pre_bn: Vec<Option<Array4<F>>>,
    /// Replica executions performed (one per gated block traversed).
    pub replica_forwards: usize,
    pub mode: Mode,
}

impl<F: Scalar> Trace<F> {
    pub fn act(&self, node: usize) -> &Feature<F> {
        self.acts[node].as_ref().expect("activation recorded")
    }
}

/// Run the graph on `x` with node->slot resolution `resolved` (length =
/// node count; `None` for stateless nodes). Returns the last computed
/// feature and the trace. Never mutates parameters: training code applies
/// deferred batchnorm statistics via [`apply_bn_updates`].
pub fn forward<F: Scalar>(
    graph: &CompiledGraph,
    params: &Params<F>,
    resolved: &[Option<usize>],
    gated_mask: &[bool],
    x: &Array4<F>,
    opts: &ForwardOpts,
) -> Result<(Feature<F>, Trace<F>)> {
    let n = graph.nodes.len();
    let mut acts: Vec<Option<Feature<F>>> = vec![None; n];
    let mut bn_caches: Vec<Option<BnCache<F>>> = vec![None; n];
    let mut pre_bn: Vec<Option<Array4<F>>> = vec![None; n];
    let mut replica_forwards = 0usize;
    let mut last = graph.input;

    for i in 0..n {
        let node = &graph.nodes[i];
        let out = match node.kind {
            NodeKind::Input => Feature::Map(x.clone()),
            NodeKind::ConvUnit => {
                let slot = resolved[i].ok_or_else(|| Error::Invalid("unresolved conv".into()))?;
                if gated_mask[i] {
                    replica_forwards += 1;
                }
                let input = acts[node.inputs[0]].as_ref().unwrap().as_map()?;
                let (y, cache) = match &params.units[slot] {
                    Unit::Conv(u) => {
                        let y = u.conv.forward(input)?;
                        match (&u.bn, opts.mode) {
                            (Some(bn), Mode::Train) => {
                                let (normed, c) = bn.forward_train(&y)?;
                                pre_bn[i] = Some(y);
                                (normed, Some(c))
                            }
                            (Some(bn), Mode::Eval) => (bn.forward_eval(&y)?, None),
                            (None, _) => (y, None),
                        }
                    }
                    _ => return Err(Error::Invalid("slot kind mismatch".into())),
                };
                bn_caches[i] = cache;
                Feature::Map(y)
            }
            NodeKind::Bn => {
                let slot = resolved[i].ok_or_else(|| Error::Invalid("unresolved bn".into()))?;
                let input = acts[node.inputs[0]].as_ref().unwrap().as_map()?;
                let (y, cache) = match (&params.units[slot], opts.mode) {
                    (Unit::Bn(bn), Mode::Train) => {
                        let (y, c) = bn.forward_train(input)?;
                        (y, Some(c))
                    }
                    (Unit::Bn(bn), Mode::Eval) => (bn.forward_eval(input)?, None),
                    _ => return Err(Error::Invalid("slot kind mismatch".into())),
                };
                bn_caches[i] = cache;
                Feature::Map(y)
            }
            NodeKind::Linear => {
                let slot = resolved[i].ok_or_else(|| Error::Invalid("unresolved linear".into()))?;
                let input = acts[node.inputs[0]].as_ref().unwrap().to_flat();
                match &params.units[slot] {
                    Unit::Linear(u) => Feature::Flat(u.forward(&input)?),
                    _ => return Err(Error::Invalid("slot kind mismatch".into())),
                }
            }
            NodeKind::Relu => ops::relu(acts[node.inputs[0]].as_ref().unwrap()),
            NodeKind::Pool => {
                let input = acts[node.inputs[0]].as_ref().unwrap().as_map()?;
                Feature::Flat(ops::global_avg_pool(input))
            }
            NodeKind::Add { .. } => {
                let a = acts[node.inputs[0]].as_ref().unwrap().as_map()?;
                let b = acts[node.inputs[1]].as_ref().unwrap().as_map()?;
                if a.shape() != b.shape() {
                    return Err(Error::Shape(format!(
                        "add `{}` operand shapes {:?} vs {:?}",
                        node.arch_id,
                        a.shape(),
                        b.shape()
                    )));
                }
                Feature::Map(a + b)
            }
            NodeKind::Output => acts[node.inputs[0]].as_ref().unwrap().clone(),
        };
        acts[i] = Some(out);
        last = i;
        if opts.stop_at == Some(i) {
            break;
        }
    }

    let out = acts[last].as_ref().unwrap().clone();
    Ok((out, Trace { acts, bn_caches, pre_bn, replica_forwards, mode: opts.mode }))
}

/// Fold the batch statistics recorded by a training-mode forward into the
/// running statistics of the units that executed.
pub fn apply_bn_updates<F: Scalar>(
    graph: &CompiledGraph,
    params: &mut Params<F>,
    resolved: &[Option<usize>],
    trace: &Trace<F>,
) {
    for (i, cache) in trace.bn_caches.iter().enumerate() {
        let Some(cache) = cache else { continue };
        let slot = resolved[i].expect("cached bn node has a slot");
        match (&graph.nodes[i].kind, &mut params.units[slot]) {
            (NodeKind::ConvUnit, Unit::Conv(u)) => {
                if let Some(bn) = &mut u.bn {
                    bn.update_running(cache);
                }
            }
            (NodeKind::Bn, Unit::Bn(bn)) => bn.update_running(cache),
            _ => {}
        }
    }
}

/// Replace the running statistics of every batchnorm reached by `resolved`
/// with exact pooled statistics over the given batches.
///
/// During gated training a replica's running statistics average over random
/// upstream gate draws, so they do not describe the activation distribution
/// of any one fixed path; fixed-path evaluation and derivation need this
/// recalibration pass.
pub fn recalibrate_bn<F: Scalar>(
    graph: &CompiledGraph,
    params: &mut Params<F>,
    resolved: &[Option<usize>],
    gated_mask: &[bool],
    batches: &[Array4<F>],
) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::Invalid("recalibration needs at least one batch".into()));
    }
    // per-node sums of batch means and raw second moments
    let mut acc: HashMap<usize, (ArrayD<F>, ArrayD<F>, usize)> = HashMap::new();
    let opts = ForwardOpts { mode: Mode::Train, stop_at: None };
    for x in batches {
        let (_, trace) = forward(graph, params, resolved, gated_mask, x, &opts)?;
        for (i, cache) in trace.bn_caches.iter().enumerate() {
            let Some(cache) = cache else { continue };
            let mean = cache.mean.view().into_dyn().to_owned();
            let msq = (&cache.var + &cache.mean.mapv(|m| m * m)).into_dyn();
            match acc.get_mut(&i) {
                Some((sm, sq, k)) => {
                    *sm += &mean;
                    *sq += &msq;
                    *k += 1;
                }
                None => {
                    acc.insert(i, (mean, msq, 1));
                }
            }
        }
    }
    for (node, (sm, sq, k)) in acc {
        let kf = F::cast(k as f64);
        let mean = sm.mapv(|v| v / kf);
        let var = ndarray::Zip::from(&sq).and(&mean).map_collect(|&q, &m| {
            (q / kf - m * m).max(F::zero())
        });
        let slot = resolved[node].expect("cached bn node has a slot");
        let bn = match &mut params.units[slot] {
            Unit::Conv(u) => u.bn.as_mut().expect("cache implies bn"),
            Unit::Bn(bn) => bn,
            Unit::Linear(_) => unreachable!("linear units have no bn cache"),
        };
        bn.running_mean.assign(&mean.into_dimensionality::<ndarray::Ix1>().unwrap());
        bn.running_var.assign(&var.into_dimensionality::<ndarray::Ix1>().unwrap());
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BackwardOpts<F> {
    pub param_grads: bool,
    pub input_grad: bool,
    /// Scale gradients of residual (non-skip) add operands during backward;
    /// used by skip-gradient attacks.
    pub sgm_gamma: Option<F>,
}

impl<F> Default for BackwardOpts<F> {
    fn default() -> Self {
        Self { param_grads: true, input_grad: false, sgm_gamma: None }
    }
}

pub struct BackwardResult<F> {
    pub grads: GradMap<F>,
    pub input_grad: Option<Array4<F>>,
}

/// Backpropagate `seed` (gradient at node `seed_node`) through the trace.
pub fn backward<F: Scalar>(
    graph: &CompiledGraph,
    params: &Params<F>,
    resolved: &[Option<usize>],
    trace: &Trace<F>,
    seed_node: usize,
    seed: Feature<F>,
    opts: &BackwardOpts<F>,
) -> Result<BackwardResult<F>> {
    let n = graph.nodes.len();
    let mut grads: Vec<Option<Feature<F>>> = vec![None; n];
    grads[seed_node] = Some(seed);
    let mut out = GradMap::new();
    let mut input_grad: Option<Array4<F>> = None;

    for i in (0..=seed_node).rev() {
        let gy = match grads[i].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &graph.nodes[i];
        match node.kind {
            NodeKind::Input => {
                if opts.input_grad {
                    let g = gy.as_map()?.clone();
                    input_grad = Some(match input_grad {
                        Some(acc) => acc + g,
                        None => g,
                    });
                }
            }
            NodeKind::Output => accumulate(&mut grads, node.inputs[0], gy)?,
            NodeKind::Relu => {
                let dx = ops::relu_backward(trace.act(node.inputs[0]), &gy)?;
                accumulate(&mut grads, node.inputs[0], dx)?;
            }
            NodeKind::Pool => {
                let x = trace.act(node.inputs[0]).as_map()?;
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let dx = ops::global_avg_pool_backward(gy.as_flat()?, h, w);
                accumulate(&mut grads, node.inputs[0], Feature::Map(dx))?;
            }
            NodeKind::Add { skip_pos } => {
                let g = gy.as_map()?;
                for (pos, &src) in node.inputs.iter().enumerate() {
                    let branch = if let (Some(gamma), true) = (opts.sgm_gamma, pos != skip_pos) {
                        g.mapv(|v| v * gamma)
                    } else {
                        g.clone()
                    };
                    accumulate(&mut grads, src, Feature::Map(branch))?;
                }
            }
            NodeKind::Linear => {
                let slot = resolved[i].unwrap();
                let u = match &params.units[slot] {
                    Unit::Linear(u) => u,
                    _ => unreachable!(),
                };
                let input_feat = trace.act(node.inputs[0]);
                let x2 = input_feat.to_flat();
                let want_dx = needs_upstream(graph, node.inputs[0], opts);
                let (dx, dw, db) = u.backward(&x2, gy.as_flat()?, want_dx);
                if opts.param_grads {
                    let prefix = &params.names[slot];
                    grad_accumulate(&mut out, format!("{prefix}.weight"), dw.into_dyn());
                    grad_accumulate(&mut out, format!("{prefix}.bias"), db.into_dyn());
                }
                if let Some(dx) = dx {
                    let back = match input_feat {
                        Feature::Flat(_) => Feature::Flat(dx),
                        Feature::Map(m) => {
                            let dims = (m.shape()[0], m.shape()[1], m.shape()[2], m.shape()[3]);
                            Feature::Map(dx.into_shape_with_order(dims).unwrap())
                        }
                    };
                    accumulate(&mut grads, node.inputs[0], back)?;
                }
            }
            NodeKind::Bn => {
                let slot = resolved[i].unwrap();
                let bn = match &params.units[slot] {
                    Unit::Bn(bn) => bn,
                    _ => unreachable!(),
                };
                let x = trace.act(node.inputs[0]).as_map()?;
                let dy = gy.as_map()?;
                let (dx, dg, db) =
                    bn_backward(bn, Some(x), dy, trace.bn_caches[i].as_ref(), opts.param_grads);
                if opts.param_grads {
                    let prefix = &params.names[slot];
                    if let (Some(dg), Some(db)) = (dg, db) {
                        grad_accumulate(&mut out, format!("{prefix}.bn.gamma"), dg.into_dyn());
                        grad_accumulate(&mut out, format!("{prefix}.bn.beta"), db.into_dyn());
                    }
                }
                accumulate(&mut grads, node.inputs[0], Feature::Map(dx))?;
            }
            NodeKind::ConvUnit => {
                let slot = resolved[i].unwrap();
                let u = match &params.units[slot] {
                    Unit::Conv(u) => u,
                    _ => unreachable!(),
                };
                let x = trace.act(node.inputs[0]).as_map()?;
                let mut dy = gy.as_map()?.clone();
                // backward through the fused bn first
                if let Some(bn) = &u.bn {
                    let recomputed;
                    let conv_out: Option<&Array4<F>> = match &trace.pre_bn[i] {
                        Some(pre) => Some(pre),
                        None if opts.param_grads => {
                            recomputed = u.conv.forward(x)?;
                            Some(&recomputed)
                        }
                        None => None,
                    };
                    let (dx_bn, dg, db) =
                        bn_backward(bn, conv_out, &dy, trace.bn_caches[i].as_ref(), opts.param_grads);
                    if opts.param_grads {
                        let prefix = &params.names[slot];
                        if let (Some(dg), Some(db)) = (dg, db) {
                            grad_accumulate(&mut out, format!("{prefix}.bn.gamma"), dg.into_dyn());
                            grad_accumulate(&mut out, format!("{prefix}.bn.beta"), db.into_dyn());
                        }
                    }
                    dy = dx_bn;
                }
                let want_dx = needs_upstream(graph, node.inputs[0], opts);
                let g = u.conv.backward(x, &dy, want_dx, opts.param_grads)?;
                if opts.param_grads {
                    let prefix = &params.names[slot];
                    if let Some(dw) = g.dw {
                        grad_accumulate(&mut out, format!("{prefix}.weight"), dw.into_dyn());
                    }
                    if let Some(db) = g.db {
                        grad_accumulate(&mut out, format!("{prefix}.conv_bias"), db.into_dyn());
                    }
                }
                if let Some(dx) = g.dx {
                    accumulate(&mut grads, node.inputs[0], Feature::Map(dx))?;
                }
            }
        }
    }

    Ok(BackwardResult { grads: out, input_grad })
}

fn bn_backward<F: Scalar>(
    bn: &BatchNorm<F>,
    x: Option<&Array4<F>>,
    dy: &Array4<F>,
    cache: Option<&BnCache<F>>,
    want_params: bool,
) -> (Array4<F>, Option<Array1<F>>, Option<Array1<F>>) {
    match cache {
        Some(c) => {
            let (dx, dg, db) = bn.backward_train(x.expect("bn input cached"), dy, c);
            (dx, want_params.then_some(dg), want_params.then_some(db))
        }
        None => bn.backward_eval(x, dy, want_params),
    }
}

/// Whether gradients still need to flow upstream of `node`.
fn needs_upstream<F>(graph: &CompiledGraph, node: usize, opts: &BackwardOpts<F>) -> bool {
    if opts.input_grad {
        return true;
    }
    // If the only thing upstream is the input marker, skip the work.
    !matches!(graph.nodes[node].kind, NodeKind::Input)
}

fn accumulate<F: Scalar>(
    grads: &mut [Option<Feature<F>>],
    node: usize,
    g: Feature<F>,
) -> Result<()> {
    match &mut grads[node] {
        None => grads[node] = Some(g),
        Some(acc) => match (acc, g) {
            (Feature::Map(a), Feature::Map(b)) => *a += &b,
            (Feature::Flat(a), Feature::Flat(b)) => *a += &b,
            _ => return Err(Error::Shape("gradient variant mismatch".into())),
        },
    }
    Ok(())
}
