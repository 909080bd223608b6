//! Random gated network runtime: parameter storage, gate and path sampling,
//! path-conditioned execution, path counting, standalone-model derivation and
//! random-gated inference.

use ndarray::{Array2, Array4, Axis};
use num_bigint::BigUint;
use num_traits::One;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchGraph, LayerKind, RgnSpec};
use crate::error::{Error, Result};
use crate::graph::{self, BackwardOpts, BackwardResult, CompiledGraph, ForwardOpts, Mode, NodeKind, Params, Trace, Unit};
use crate::nn::{he_normal_conv, uniform_linear, BatchNorm, Conv2d, Feature, Linear, Scalar};
use crate::rng::Stream;

/// Index of the single open gate in a block, in [0, n).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateIndex(pub u16);

/// One gate per gated block, ordered by topological block position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub gates: Vec<GateIndex>,
}

impl Path {
    pub fn new(gates: Vec<u16>) -> Self {
        Path { gates: gates.into_iter().map(GateIndex).collect() }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn as_u16(&self) -> Vec<u16> {
        self.gates.iter().map(|g| g.0).collect()
    }

    /// Compact display like "0-1-0-1".
    pub fn label(&self) -> String {
        self.gates.iter().map(|g| g.0.to_string()).collect::<Vec<_>>().join("-")
    }
}

/// Uniform gate draw: each of the n gates opens with probability 1/n.
pub fn sample_gate<R: Rng>(n: usize, rng: &mut R) -> Result<GateIndex> {
    if n < 1 {
        return Err(Error::Config("gate count must be >= 1".into()));
    }
    Ok(GateIndex(rng.random_range(0..n) as u16))
}

/// True iff every pair of paths differs in at least one of the first
/// `l` gates.
pub fn paths_distinct_top_l(paths: &[Path], l: usize) -> bool {
    for i in 0..paths.len() {
        for j in (i + 1)..paths.len() {
            let a = &paths[i].gates[..l];
            let b = &paths[j].gates[..l];
            if a == b {
                return false;
            }
        }
    }
    true
}

/// Exact number of instantiable sub-models: n^L.
pub fn count_paths(spec: &RgnSpec) -> BigUint {
    BigUint::from(spec.n).pow(spec.l as u32)
}

fn prefix_to_int(prefix: &[GateIndex], n: usize) -> BigUint {
    let mut acc = BigUint::ZERO;
    for g in prefix.iter().rev() {
        acc = acc * n + BigUint::from(g.0 as usize);
    }
    acc
}

fn int_to_prefix(mut v: BigUint, n: usize, l: usize) -> Vec<GateIndex> {
    let base = BigUint::from(n);
    let mut out = Vec::with_capacity(l);
    for _ in 0..l {
        let digit = (&v % &base).to_u64_digits().first().copied().unwrap_or(0);
        out.push(GateIndex(digit as u16));
        v /= &base;
    }
    out
}

fn sample_biguint_below<R: Rng>(bound: &BigUint, rng: &mut R) -> BigUint {
    let bits = bound.bits();
    loop {
        let mut words = Vec::with_capacity(bits.div_ceil(64) as usize);
        let mut remaining = bits;
        while remaining > 0 {
            let mut w: u64 = rng.random();
            if remaining < 64 {
                w &= (1u64 << remaining) - 1;
            }
            words.push(w);
            remaining = remaining.saturating_sub(64);
        }
        let candidate = BigUint::from_slice(
            &words
                .iter()
                .flat_map(|w| [(*w & 0xffff_ffff) as u32, (*w >> 32) as u32])
                .collect::<Vec<u32>>(),
        );
        if &candidate < bound {
            return candidate;
        }
    }
}

/// Rejection-sample retry budget before switching to exact prefix assignment.
const DISTINCT_RETRY_BUDGET: usize = 1000;

fn sample_distinct(n: usize, l_total: usize, p: usize, l: usize, rng: &mut Stream) -> Result<Vec<Path>> {
    if p < 2 {
        return Err(Error::Config("need at least 2 paths for distinct sampling".into()));
    }
    if l < 1 || l > l_total {
        return Err(Error::Config(format!("distillation layer {l} out of [1, {l_total}]")));
    }
    let capacity = BigUint::from(n).pow(l as u32);
    if capacity < BigUint::from(p) {
        return Err(Error::Infeasible(format!(
            "cannot draw {p} paths with distinct top-{l} prefixes: only n^l = {capacity} exist"
        )));
    }

    let sample_full = |rng: &mut Stream| -> Result<Path> {
        let mut gates = Vec::with_capacity(l_total);
        for _ in 0..l_total {
            gates.push(sample_gate(n, rng)?);
        }
        Ok(Path { gates })
    };

    let mut paths: Vec<Path> = Vec::with_capacity(p);
    let mut used: Vec<BigUint> = Vec::with_capacity(p);
    let mut retries = 0usize;
    while paths.len() < p {
        let candidate = sample_full(rng)?;
        let key = prefix_to_int(&candidate.gates[..l], n);
        if !used.contains(&key) {
            used.push(key);
            paths.push(candidate);
            continue;
        }
        retries += 1;
        if retries > DISTINCT_RETRY_BUDGET {
            // Exact fallback: draw an unused prefix uniformly by integer
            // arithmetic, then fill the tail with fresh gate draws.
            let free = &capacity - BigUint::from(used.len());
            let mut r = sample_biguint_below(&free, rng);
            let mut sorted = used.clone();
            sorted.sort();
            for u in &sorted {
                if &r >= u {
                    r += BigUint::one();
                }
            }
            let mut gates = int_to_prefix(r.clone(), n, l);
            for _ in l..l_total {
                gates.push(sample_gate(n, rng)?);
            }
            used.push(r);
            paths.push(Path { gates });
        }
    }
    debug_assert!(paths_distinct_top_l(&paths, l));
    Ok(paths)
}

/// How a graph node finds its parameters.
#[derive(Clone, Debug)]
enum NodeRes {
    None,
    Fixed(usize),
    Gated(usize),
}

#[derive(Clone, Debug)]
struct Block {
    /// Compiled node index of this gated block.
    node: usize,
    /// First replica slot; replica j lives at base_slot + j.
    base_slot: usize,
}

/// Supernet with n-way gated conv units on the scoped layers.
#[derive(Clone)]
pub struct RgnModel<F> {
    pub spec: RgnSpec,
    pub graph: CompiledGraph,
    pub params: Params<F>,
    node_map: Vec<NodeRes>,
    blocks: Vec<Block>,
    gated_mask: Vec<bool>,
}

/// Where a standalone model came from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub rgn_hash: String,
    pub path: Vec<u16>,
}

/// Plain single-path network (base architecture, no gates).
#[derive(Clone)]
pub struct Network<F> {
    pub graph: CompiledGraph,
    pub params: Params<F>,
    node_map: Vec<NodeRes>,
    gated_mask: Vec<bool>,
}

/// A model derived from a trained RGN by fixing one path.
#[derive(Clone)]
pub struct StandaloneModel<F> {
    pub net: Network<F>,
    pub provenance: Provenance,
}

fn init_conv_unit<F: Scalar>(
    arch: &ArchGraph,
    arch_node: usize,
    fused_bn: bool,
    rng: &mut Stream,
) -> ConvUnitInit<F> {
    let (in_c, out_c, k, stride, pad, bias) = match arch.nodes[arch_node].kind {
        LayerKind::Conv { in_c, out_c, k, stride, pad, bias } => (in_c, out_c, k, stride, pad, bias),
        _ => unreachable!("conv unit init on non-conv node"),
    };
    let weight = he_normal_conv(out_c, in_c, k, rng);
    let conv = Conv2d {
        weight,
        bias: bias.then(|| ndarray::Array1::zeros(out_c)),
        stride,
        padding: pad,
    };
    let bn = fused_bn.then(|| BatchNorm::new(out_c));
    ConvUnitInit { conv, bn }
}

struct ConvUnitInit<F> {
    conv: Conv2d<F>,
    bn: Option<BatchNorm<F>>,
}

fn build_params<F: Scalar>(
    arch: &ArchGraph,
    compiled: &CompiledGraph,
    gated_arch_ids: &[usize],
    n: usize,
    name_for: impl Fn(&str, Option<(usize, usize)>) -> String,
    rng: &mut Stream,
) -> Result<(Params<F>, Vec<NodeRes>, Vec<Block>, Vec<bool>)> {
    let mut params = Params::default();
    let mut node_map = vec![NodeRes::None; compiled.nodes.len()];
    let mut blocks = Vec::new();
    let mut gated_mask = vec![false; compiled.nodes.len()];

    // arch node index by id for scope lookups
    let arch_index_of = |id: &str| arch.node_index(id).expect("compiled id exists in arch");

    for (ci, node) in compiled.nodes.iter().enumerate() {
        match node.kind {
            NodeKind::ConvUnit => {
                let ai = arch_index_of(&node.arch_id);
                let fused = arch.fused_bn.contains_key(&ai);
                if gated_arch_ids.contains(&ai) {
                    let block_idx = blocks.len();
                    let base_slot = params.units.len();
                    for j in 0..n {
                        let unit = init_conv_unit::<F>(arch, ai, fused, rng);
                        params.push(
                            name_for(&node.arch_id, Some((block_idx, j))),
                            Unit::Conv(crate::graph::ConvUnit { conv: unit.conv, bn: unit.bn }),
                        );
                    }
                    node_map[ci] = NodeRes::Gated(block_idx);
                    gated_mask[ci] = true;
                    blocks.push(Block { node: ci, base_slot });
                } else {
                    let unit = init_conv_unit::<F>(arch, ai, fused, rng);
                    let slot = params.push(
                        name_for(&node.arch_id, None),
                        Unit::Conv(crate::graph::ConvUnit { conv: unit.conv, bn: unit.bn }),
                    );
                    node_map[ci] = NodeRes::Fixed(slot);
                }
            }
            NodeKind::Linear => {
                let ai = arch_index_of(&node.arch_id);
                let (in_f, out_f) = match arch.nodes[ai].kind {
                    LayerKind::Linear { in_f, out_f } => (in_f, out_f),
                    _ => unreachable!(),
                };
                let (w, b) = uniform_linear(out_f, in_f, rng);
                let slot = params.push(
                    name_for(&node.arch_id, None),
                    Unit::Linear(Linear { weight: w, bias: b }),
                );
                node_map[ci] = NodeRes::Fixed(slot);
            }
            NodeKind::Bn => {
                let ai = arch_index_of(&node.arch_id);
                let feats = match arch.nodes[ai].kind {
                    LayerKind::BatchNorm { features } => features,
                    _ => unreachable!(),
                };
                let slot = params.push(name_for(&node.arch_id, None), Unit::Bn(BatchNorm::new(feats)));
                node_map[ci] = NodeRes::Fixed(slot);
            }
            _ => {}
        }
    }
    Ok((params, node_map, blocks, gated_mask))
}

impl<F: Scalar> RgnModel<F> {
    /// Build an RGN from a construction plan; replicas are independently
    /// initialized from the seeded stream.
    pub fn init(spec: RgnSpec, rng: &mut Stream) -> Result<Self> {
        let compiled = graph::compile(&spec.base)?;
        let (params, node_map, blocks, gated_mask) = build_params(
            &spec.base,
            &compiled,
            &spec.scope.selected_ids,
            spec.n,
            |arch_id, gated| match gated {
                Some((block, replica)) => format!("block{block}.replica{replica}"),
                None => format!("shared.{arch_id}"),
            },
            rng,
        )?;
        if blocks.len() != spec.l {
            return Err(Error::Invalid(format!(
                "scope selected {} blocks but {} were constructed",
                spec.l,
                blocks.len()
            )));
        }
        Ok(Self { spec, graph: compiled, params, node_map, blocks, gated_mask })
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn gated_depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes
    }

    /// Compiled node index of gated block `l` (1-based).
    pub fn block_node(&self, l: usize) -> Result<usize> {
        if l < 1 || l > self.blocks.len() {
            return Err(Error::Invalid(format!(
                "block index {l} out of [1, {}]",
                self.blocks.len()
            )));
        }
        Ok(self.blocks[l - 1].node)
    }

    /// Node whose activation is "the output of gated block l": the relu
    /// directly consuming the block when one exists, otherwise the block
    /// itself.
    pub fn tap_node(&self, l: usize) -> Result<usize> {
        let node = self.block_node(l)?;
        let consumers = self.graph.consumers(node);
        if consumers.len() == 1 && matches!(self.graph.nodes[consumers[0]].kind, NodeKind::Relu) {
            Ok(consumers[0])
        } else {
            Ok(node)
        }
    }

    pub fn resolve(&self, path: &Path) -> Result<Vec<Option<usize>>> {
        if path.len() != self.blocks.len() {
            return Err(Error::Invalid(format!(
                "path length {} does not match gated depth {}",
                path.len(),
                self.blocks.len()
            )));
        }
        let n = self.spec.n as u16;
        let mut resolved = vec![None; self.graph.nodes.len()];
        for (ci, res) in self.node_map.iter().enumerate() {
            resolved[ci] = match res {
                NodeRes::None => None,
                NodeRes::Fixed(slot) => Some(*slot),
                NodeRes::Gated(block) => {
                    let gate = path.gates[*block];
                    if gate.0 >= n {
                        return Err(Error::Invalid(format!(
                            "gate {} out of range for n={}",
                            gate.0, n
                        )));
                    }
                    Some(self.blocks[*block].base_slot + gate.0 as usize)
                }
            };
        }
        Ok(resolved)
    }

    /// Draw a path: L independent uniform gates in block order.
    pub fn sample_path(&self, rng: &mut Stream) -> Path {
        let mut gates = Vec::with_capacity(self.blocks.len());
        for _ in 0..self.blocks.len() {
            gates.push(sample_gate(self.spec.n, rng).expect("n >= 1 by construction"));
        }
        Path { gates }
    }

    /// Draw `p` paths whose top-`l` prefixes are pairwise distinct.
    pub fn sample_distinct_paths(&self, p: usize, l: usize, rng: &mut Stream) -> Result<Vec<Path>> {
        sample_distinct(self.spec.n, self.blocks.len(), p, l, rng)
    }

    /// Path-conditioned forward. Returns logits, the activation of gated
    /// block `tap_layer` (1-based) when requested, and the trace.
    pub fn forward(
        &self,
        path: &Path,
        x: &Array4<F>,
        tap_layer: Option<usize>,
        mode: Mode,
    ) -> Result<(Array2<F>, Option<Feature<F>>, Trace<F>)> {
        let resolved = self.resolve(path)?;
        let opts = ForwardOpts { mode, stop_at: None };
        let (out, trace) = graph::forward(&self.graph, &self.params, &resolved, &self.gated_mask, x, &opts)?;
        let logits = out.as_flat()?.clone();
        let tap = match tap_layer {
            Some(l) => {
                let node = self.tap_node(l)?;
                Some(trace.act(node).clone())
            }
            None => None,
        };
        Ok((logits, tap, trace))
    }

    /// Forward only as far as the tap node of block `l`; used by feature
    /// distillation. Eval mode.
    pub fn forward_to_tap(&self, path: &Path, x: &Array4<F>, l: usize) -> Result<(Feature<F>, Trace<F>)> {
        let resolved = self.resolve(path)?;
        let node = self.tap_node(l)?;
        let opts = ForwardOpts { mode: Mode::Eval, stop_at: Some(node) };
        let (out, trace) = graph::forward(&self.graph, &self.params, &resolved, &self.gated_mask, x, &opts)?;
        Ok((out, trace))
    }

    pub fn backward_from(
        &self,
        path: &Path,
        trace: &Trace<F>,
        seed_node: usize,
        seed: Feature<F>,
        opts: &BackwardOpts<F>,
    ) -> Result<BackwardResult<F>> {
        let resolved = self.resolve(path)?;
        graph::backward(&self.graph, &self.params, &resolved, trace, seed_node, seed, opts)
    }

    /// Apply deferred batchnorm running-statistics updates after a
    /// training-mode forward along `path`.
    pub fn apply_bn_updates(&mut self, path: &Path, trace: &Trace<F>) -> Result<()> {
        let resolved = self.resolve(path)?;
        graph::apply_bn_updates(&self.graph, &mut self.params, &resolved, trace);
        Ok(())
    }

    /// Re-estimate the running statistics of every batchnorm on `path` from
    /// pooled batch statistics. Shared-weight training averages statistics
    /// over random gate draws, so a fixed path must be recalibrated before
    /// eval-mode use.
    pub fn recalibrate_bn(&mut self, path: &Path, batches: &[Array4<F>]) -> Result<()> {
        let resolved = self.resolve(path)?;
        graph::recalibrate_bn(&self.graph, &mut self.params, &resolved, &self.gated_mask, batches)
    }

    /// Copy one path's parameters into a standalone single-path network.
    pub fn derive_model(&self, path: &Path) -> Result<StandaloneModel<F>> {
        let resolved = self.resolve(path)?;
        let mut params = Params::default();
        let mut node_map = vec![NodeRes::None; self.graph.nodes.len()];
        for (ci, slot) in resolved.iter().enumerate() {
            if let Some(slot) = slot {
                let unit = self.params.units[*slot].clone();
                let new_slot = params.push(self.graph.nodes[ci].arch_id.clone(), unit);
                node_map[ci] = NodeRes::Fixed(new_slot);
            }
        }
        let net = Network {
            graph: self.graph.clone(),
            params,
            node_map,
            gated_mask: vec![false; self.graph.nodes.len()],
        };
        Ok(StandaloneModel {
            net,
            provenance: Provenance { rgn_hash: self.spec.content_hash(), path: path.as_u16() },
        })
    }

    /// Deploy-the-RGN inference mode: sample a fresh path per batch.
    pub fn random_gated_inference(&self, x: &Array4<F>, rng: &mut Stream) -> Result<Array2<F>> {
        let path = self.sample_path(rng);
        let (logits, _, _) = self.forward(&path, x, None, Mode::Eval)?;
        Ok(logits)
    }
}

impl<F: Scalar> Network<F> {
    /// Fresh standard network over a base architecture (used for surrogate
    /// and baseline models).
    pub fn init(arch: &ArchGraph, rng: &mut Stream) -> Result<Self> {
        let compiled = graph::compile(arch)?;
        let (params, node_map, _, gated_mask) =
            build_params(arch, &compiled, &[], 1, |arch_id, _| arch_id.to_string(), rng)?;
        Ok(Self { graph: compiled, params, node_map, gated_mask })
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes
    }

    fn resolved(&self) -> Vec<Option<usize>> {
        self.node_map
            .iter()
            .map(|r| match r {
                NodeRes::None => None,
                NodeRes::Fixed(s) => Some(*s),
                NodeRes::Gated(_) => unreachable!("plain networks have no gated nodes"),
            })
            .collect()
    }

    pub fn forward(&self, x: &Array4<F>, mode: Mode) -> Result<(Array2<F>, Trace<F>)> {
        let resolved = self.resolved();
        let opts = ForwardOpts { mode, stop_at: None };
        let (out, trace) = graph::forward(&self.graph, &self.params, &resolved, &self.gated_mask, x, &opts)?;
        Ok((out.as_flat()?.clone(), trace))
    }

    pub fn logits(&self, x: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn backward_from_output(
        &self,
        trace: &Trace<F>,
        dlogits: Array2<F>,
        opts: &BackwardOpts<F>,
    ) -> Result<BackwardResult<F>> {
        let resolved = self.resolved();
        graph::backward(
            &self.graph,
            &self.params,
            &resolved,
            trace,
            self.graph.output,
            Feature::Flat(dlogits),
            opts,
        )
    }

    pub fn apply_bn_updates(&mut self, trace: &Trace<F>) {
        let resolved = self.resolved();
        graph::apply_bn_updates(&self.graph, &mut self.params, &resolved, trace);
    }

    /// Re-estimate batchnorm running statistics from pooled batch statistics.
    pub fn recalibrate_bn(&mut self, batches: &[Array4<F>]) -> Result<()> {
        let resolved = self.resolved();
        graph::recalibrate_bn(&self.graph, &mut self.params, &resolved, &self.gated_mask, batches)
    }
}

/// Read-only view of an RGN restricted to one path; lets attack code treat
/// (rgn, path) like a plain model.
pub struct PathView<'a, F> {
    pub rgn: &'a RgnModel<F>,
    pub path: Path,
}

/// Differentiable classifier interface used by the attack suite.
pub trait Classifier<F: Scalar>: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Array4<F>) -> Result<Array2<F>>;
    fn has_skip_connections(&self) -> bool;
    /// Eval-mode forward followed by a backward of `dlogits_of(logits)` to
    /// the input. Returns (logits, d objective / d x).
    fn input_grad(
        &self,
        x: &Array4<F>,
        dlogits_of: &dyn Fn(&Array2<F>) -> Array2<F>,
        sgm_gamma: Option<F>,
    ) -> Result<(Array2<F>, Array4<F>)>;
}

fn input_grad_impl<F: Scalar>(
    graph: &CompiledGraph,
    params: &Params<F>,
    resolved: &[Option<usize>],
    gated_mask: &[bool],
    x: &Array4<F>,
    dlogits_of: &dyn Fn(&Array2<F>) -> Array2<F>,
    sgm_gamma: Option<F>,
) -> Result<(Array2<F>, Array4<F>)> {
    let opts = ForwardOpts { mode: Mode::Eval, stop_at: None };
    let (out, trace) = graph::forward(graph, params, resolved, gated_mask, x, &opts)?;
    let logits = out.as_flat()?.clone();
    let dlogits = dlogits_of(&logits);
    let bw = graph::backward(
        graph,
        params,
        resolved,
        &trace,
        graph.output,
        Feature::Flat(dlogits),
        &BackwardOpts { param_grads: false, input_grad: true, sgm_gamma },
    )?;
    let dx = bw.input_grad.ok_or_else(|| Error::Invalid("input gradient missing".into()))?;
    Ok((logits, dx))
}

impl<F: Scalar> Classifier<F> for Network<F> {
    fn num_classes(&self) -> usize {
        self.graph.num_classes
    }

    fn logits(&self, x: &Array4<F>) -> Result<Array2<F>> {
        Network::logits(self, x)
    }

    fn has_skip_connections(&self) -> bool {
        self.graph.has_skip_connections()
    }

    fn input_grad(
        &self,
        x: &Array4<F>,
        dlogits_of: &dyn Fn(&Array2<F>) -> Array2<F>,
        sgm_gamma: Option<F>,
    ) -> Result<(Array2<F>, Array4<F>)> {
        let resolved = self.resolved();
        input_grad_impl(&self.graph, &self.params, &resolved, &self.gated_mask, x, dlogits_of, sgm_gamma)
    }
}

impl<F: Scalar> Classifier<F> for StandaloneModel<F> {
    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn logits(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.net.logits(x)
    }

    fn has_skip_connections(&self) -> bool {
        self.net.graph.has_skip_connections()
    }

    fn input_grad(
        &self,
        x: &Array4<F>,
        dlogits_of: &dyn Fn(&Array2<F>) -> Array2<F>,
        sgm_gamma: Option<F>,
    ) -> Result<(Array2<F>, Array4<F>)> {
        self.net.input_grad(x, dlogits_of, sgm_gamma)
    }
}

impl<F: Scalar> Classifier<F> for PathView<'_, F> {
    fn num_classes(&self) -> usize {
        self.rgn.num_classes()
    }

    fn logits(&self, x: &Array4<F>) -> Result<Array2<F>> {
        let (logits, _, _) = self.rgn.forward(&self.path, x, None, Mode::Eval)?;
        Ok(logits)
    }

    fn has_skip_connections(&self) -> bool {
        self.rgn.graph.has_skip_connections()
    }

    fn input_grad(
        &self,
        x: &Array4<F>,
        dlogits_of: &dyn Fn(&Array2<F>) -> Array2<F>,
        sgm_gamma: Option<F>,
    ) -> Result<(Array2<F>, Array4<F>)> {
        let resolved = self.rgn.resolve(&self.path)?;
        input_grad_impl(
            &self.rgn.graph,
            &self.rgn.params,
            &resolved,
            &self.rgn.gated_mask,
            x,
            dlogits_of,
            sgm_gamma,
        )
    }
}

impl<F: Scalar> std::fmt::Debug for RgnModel<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RgnModel")
            .field("n", &self.spec.n)
            .field("l", &self.spec.l)
            .field("units", &self.params.units.len())
            .finish()
    }
}

/// How ensemble members are combined into one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    /// Arithmetic mean of member probabilities; emitted scores are
    /// log(mean prob), so downstream softmax recovers the mean exactly.
    MeanProb,
    MeanLogit,
    /// Plurality vote (ties break toward the lower class index); not
    /// differentiable, eval only.
    MajorityVote,
}

/// Several frozen models deployed as one classifier.
pub struct Ensemble<'a, F> {
    pub members: Vec<&'a dyn Classifier<F>>,
    pub rule: CombineRule,
}

impl<F: Scalar> Ensemble<'_, F> {
    fn combined_logits(&self, per_member: &[Array2<F>]) -> Array2<F> {
        match self.rule {
            CombineRule::MeanLogit => {
                let mut acc = per_member[0].clone();
                for m in &per_member[1..] {
                    acc += m;
                }
                acc.mapv(|v| v / F::cast(per_member.len() as f64))
            }
            CombineRule::MeanProb => {
                let probs: Vec<Array2<F>> = per_member.iter().map(crate::nn::ops::softmax).collect();
                let mut acc = probs[0].clone();
                for p in &probs[1..] {
                    acc += p;
                }
                let inv = F::one() / F::cast(per_member.len() as f64);
                acc.mapv(|v| (v * inv).max(F::cast(1e-30)).ln())
            }
            CombineRule::MajorityVote => {
                let (b, c) = (per_member[0].shape()[0], per_member[0].shape()[1]);
                let mut votes = Array2::<F>::zeros((b, c));
                for m in per_member {
                    for (i, cls) in crate::nn::ops::argmax_rows(m).into_iter().enumerate() {
                        votes[[i, cls]] = votes[[i, cls]] + F::one();
                    }
                }
                // tie break: subtract a tiny class-index penalty
                for i in 0..b {
                    for cls in 0..c {
                        votes[[i, cls]] =
                            votes[[i, cls]] - F::cast(cls as f64) * F::cast(1e-6);
                    }
                }
                votes
            }
        }
    }
}

impl<F: Scalar> Classifier<F> for Ensemble<'_, F> {
    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn logits(&self, x: &Array4<F>) -> Result<Array2<F>> {
        let per: Vec<Array2<F>> =
            self.members.iter().map(|m| m.logits(x)).collect::<Result<_>>()?;
        Ok(self.combined_logits(&per))
    }

    fn has_skip_connections(&self) -> bool {
        self.members.iter().any(|m| m.has_skip_connections())
    }

    fn input_grad(
        &self,
        x: &Array4<F>,
        dlogits_of: &dyn Fn(&Array2<F>) -> Array2<F>,
        sgm_gamma: Option<F>,
    ) -> Result<(Array2<F>, Array4<F>)> {
        if self.rule == CombineRule::MajorityVote {
            return Err(Error::Invalid(
                "majority-vote ensembles are not differentiable; use mean_prob or mean_logit"
                    .into(),
            ));
        }
        let per: Vec<Array2<F>> =
            self.members.iter().map(|m| m.logits(x)).collect::<Result<_>>()?;
        let combined = self.combined_logits(&per);
        let dout = dlogits_of(&combined);
        let inv_m = F::one() / F::cast(self.members.len() as f64);
        let mut total: Option<Array4<F>> = None;
        for (member, z_m) in self.members.iter().zip(&per) {
            // gradient of the combined scores w.r.t. this member's logits
            let dmember: Array2<F> = match self.rule {
                CombineRule::MeanLogit => dout.mapv(|v| v * inv_m),
                CombineRule::MeanProb => {
                    // combined_c = ln(mean_m p_mc): d/dz_m = J_softmax(z_m)^T (dout / (M * mean_p))
                    let probs: Vec<Array2<F>> =
                        per.iter().map(crate::nn::ops::softmax).collect();
                    let mut mean_p = probs[0].clone();
                    for p in &probs[1..] {
                        mean_p += p;
                    }
                    mean_p.mapv_inplace(|v| (v * inv_m).max(F::cast(1e-30)));
                    let p_m = crate::nn::ops::softmax(z_m);
                    let upstream = &dout / &mean_p;
                    let upstream = upstream.mapv(|v| v * inv_m);
                    // softmax jacobian-transpose: p .* (u - sum(p .* u))
                    let mut out = Array2::zeros(z_m.raw_dim());
                    for bi in 0..z_m.shape()[0] {
                        let p = p_m.index_axis(Axis(0), bi);
                        let u = upstream.index_axis(Axis(0), bi);
                        let dot = p.iter().zip(u.iter()).fold(F::zero(), |a, (&pi, &ui)| a + pi * ui);
                        let mut o = out.index_axis_mut(Axis(0), bi);
                        for ((oi, &pi), &ui) in o.iter_mut().zip(p.iter()).zip(u.iter()) {
                            *oi = pi * (ui - dot);
                        }
                    }
                    out
                }
                CombineRule::MajorityVote => unreachable!(),
            };
            let (_, gx) = member.input_grad(x, &move |_| dmember.clone(), sgm_gamma)?;
            total = Some(match total {
                Some(acc) => acc + gx,
                None => gx,
            });
        }
        Ok((combined, total.expect("at least one member")))
    }
}


#[cfg(test)]
mod ensemble_tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::check::{max_rel_err, numerical_grad};
    use crate::nn::ops;
    use crate::rng::{self, labels};
    use ndarray::Array4;

    const CHAIN: &str = "\
in input shape=3x6x6
c1 conv in=3 out=4 k=3 stride=1 pad=1
r1 activation fn=relu
pool pool kind=global_avg
fc linear in=4 out=3
out output
edge in c1
edge c1 r1
edge r1 pool
edge pool fc
edge fc out
";

    fn members(seed: u64) -> (Network<f64>, Network<f64>) {
        let arch = parse_arch(CHAIN).unwrap();
        let a = Network::init(&arch, &mut rng::stream(seed, labels::INIT, 0)).unwrap();
        let b = Network::init(&arch, &mut rng::stream(seed + 1, labels::INIT, 0)).unwrap();
        (a, b)
    }

    #[test]
    fn mean_prob_logits_recover_mean_probabilities() {
        let (a, b) = members(1);
        let ens = Ensemble { members: vec![&a, &b], rule: CombineRule::MeanProb };
        let mut r = rng::stream(2, labels::DATA, 0);
        let x = Array4::from_shape_simple_fn((3, 3, 6, 6), || f64::sample_unit(&mut r));
        let scores = ens.logits(&x).unwrap();
        let pa = ops::softmax(&a.logits(&x).unwrap());
        let pb = ops::softmax(&b.logits(&x).unwrap());
        let want = (&pa + &pb) * 0.5;
        let got = ops::softmax(&scores);
        let d: f64 = (&want - &got).iter().fold(0.0, |m, v| v.abs().max(m));
        assert!(d < 1e-12, "softmax(log mean prob) != mean prob: {d}");
    }

    #[test]
    fn ensemble_input_gradients_match_finite_differences() {
        let (a, b) = members(3);
        let mut r = rng::stream(4, labels::DATA, 0);
        let x = Array4::from_shape_simple_fn((2, 3, 6, 6), || f64::sample_unit(&mut r));
        let y = vec![0usize, 2];
        for rule in [CombineRule::MeanProb, CombineRule::MeanLogit] {
            let ens = Ensemble { members: vec![&a, &b], rule };
            let dl = |logits: &Array2<f64>| {
                ops::cross_entropy_with_grad(logits, &y).unwrap().1
            };
            let (_, analytic) = ens.input_grad(&x, &dl, None).unwrap();
            let f = |xs: &[f64]| {
                let xa = Array4::from_shape_vec(x.raw_dim(), xs.to_vec()).unwrap();
                let logits = ens.logits(&xa).unwrap();
                ops::cross_entropy(&logits, &y).unwrap()
            };
            let numeric = numerical_grad(f, x.as_slice().unwrap(), 1e-6);
            let err = max_rel_err(analytic.as_slice().unwrap(), &numeric, 1e-6);
            assert!(err < 1e-6, "{rule:?}: rel err {err}");
        }
    }

    #[test]
    fn majority_vote_counts_votes_and_rejects_gradients() {
        let (a, b) = members(5);
        let ens = Ensemble { members: vec![&a, &b], rule: CombineRule::MajorityVote };
        let mut r = rng::stream(6, labels::DATA, 0);
        let x = Array4::from_shape_simple_fn((4, 3, 6, 6), || f64::sample_unit(&mut r));
        let votes = ens.logits(&x).unwrap();
        // each row's votes sum to ~member count (minus tiny tie penalties)
        for row in votes.axis_iter(Axis(0)) {
            let total: f64 = row.iter().sum();
            assert!((total - 2.0).abs() < 1e-3, "vote total {total}");
        }
        let dl = |l: &Array2<f64>| l.clone();
        assert!(ens.input_grad(&x, &dl, None).is_err());
    }
}
