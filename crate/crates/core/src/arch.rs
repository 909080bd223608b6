//! Base-architecture description: parsing, validation, and the plan for
//! turning parameterized layers into random gated blocks.
//!
//! Architectures are described in a flat line-oriented text format:
//! `id kind attr=value ...` declares a node, `edge src dst` connects two.
//! Kinds: input, conv, batchnorm, linear, activation, pool, add, output.
//! A conv whose sole consumer is a batchnorm is folded with it into one
//! parameterized unit, so replica parameters always carry their own
//! normalization statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reference architecture shipped with the crate: ResNet-20 (21 convs).
pub const RESNET20: &str = include_str!("../arch/resnet20.arch");
/// Reference architecture shipped with the crate: 6-conv toy CNN.
pub const TOY6: &str = include_str!("../arch/toy6.arch");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input { channels: usize, height: usize, width: usize },
    Conv { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, bias: bool },
    BatchNorm { features: usize },
    Linear { in_f: usize, out_f: usize },
    Activation,
    /// Global average pooling [B,C,H,W] -> [B,C].
    Pool,
    /// Two-input elementwise addition; `skip` names the skip-branch source.
    Add { skip: Option<String> },
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Activation => "activation",
            LayerKind::Pool => "pool",
            LayerKind::Add { .. } => "add",
            LayerKind::Output => "output",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    /// Source line in the architecture file, for error loci.
    pub line: usize,
}

/// Validated, topologically sorted architecture graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchGraph {
    /// Nodes in topological order.
    pub nodes: Vec<LayerNode>,
    /// Directed edges as (src, dst) indices into `nodes`.
    pub edges: Vec<(usize, usize)>,
    /// Parameterized layers (conv and linear) in topological order.
    pub param_layer_ids: Vec<usize>,
    /// conv node -> its fused batchnorm node.
    pub fused_bn: HashMap<usize, usize>,
    pub input: usize,
    pub output: usize,
}

impl ArchGraph {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Indices (into `nodes`) of conv parameterized layers, topological order.
    /// These are the layers eligible for gating; the final classifier and
    /// other non-conv layers stay shared.
    pub fn conv_param_ids(&self) -> Vec<usize> {
        self.param_layer_ids
            .iter()
            .copied()
            .filter(|&i| matches!(self.nodes[i].kind, LayerKind::Conv { .. }))
            .collect()
    }

    /// Consumers of a node, in topological order.
    pub fn consumers(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter(|(s, _)| *s == node)
            .map(|(_, d)| *d)
            .collect();
        out.sort_unstable();
        out
    }

    pub fn inputs_of(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter(|(_, d)| *d == node)
            .map(|(s, _)| *s)
            .collect();
        out.sort_unstable();
        out
    }

    /// Declared input shape (C, H, W).
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self.nodes[self.input].kind {
            LayerKind::Input { channels, height, width } => (channels, height, width),
            _ => unreachable!("input index always points at an input node"),
        }
    }

    /// Number of operators in the base network (everything between the
    /// input and output markers).
    pub fn operator_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.kind, LayerKind::Input { .. } | LayerKind::Output))
            .count()
    }

    /// Stable content hash of the canonical graph description.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.nodes {
            h.update(n.id.as_bytes());
            h.update(format!("{:?}", n.kind).as_bytes());
        }
        for (s, d) in &self.edges {
            h.update(format!("e{s}-{d}").as_bytes());
        }
        hex(&h.finalize()[..16])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which parameterized layers become gated blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScopeMode {
    All,
    TopK(usize),
    Explicit(Vec<String>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationScope {
    /// Selected conv node indices, topological order.
    pub selected_ids: Vec<usize>,
    pub mode: ScopeMode,
}

impl AugmentationScope {
    pub fn len(&self) -> usize {
        self.selected_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_ids.is_empty()
    }
}

/// Construction plan for a random gated network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RgnSpec {
    pub base: ArchGraph,
    pub scope: AugmentationScope,
    /// Augmentation factor: replicas per gated block.
    pub n: usize,
    /// Gated depth: number of gated blocks.
    pub l: usize,
    /// Operator count of the base network.
    pub m: usize,
}

impl RgnSpec {
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base.content_hash().as_bytes());
        h.update(format!("n={};scope={:?}", self.n, self.scope.selected_ids).as_bytes());
        hex(&h.finalize()[..16])
    }
}

struct RawNode {
    id: String,
    kind: LayerKind,
    line: usize,
}

/// Parse and validate an architecture description.
pub fn parse_arch(spec_text: &str) -> Result<ArchGraph> {
    let mut raw_nodes: Vec<RawNode> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut raw_edges: Vec<(String, String, usize)> = Vec::new();

    for (lineno, line) in spec_text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks[0] == "edge" {
            if toks.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "edge lines must be `edge src dst`".into(),
                });
            }
            raw_edges.push((toks[1].to_string(), toks[2].to_string(), line_no));
            continue;
        }
        if toks.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: "node lines must be `id kind attr=value ...`".into(),
            });
        }
        let id = toks[0].to_string();
        if ids.contains_key(&id) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate node id `{id}`"),
            });
        }
        let attrs = parse_attrs(&toks[2..], line_no)?;
        let kind = parse_kind(toks[1], &attrs, line_no)?;
        ids.insert(id.clone(), raw_nodes.len());
        raw_nodes.push(RawNode { id, kind, line: line_no });
    }

    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(raw_edges.len());
    for (src, dst, line) in &raw_edges {
        let s = *ids.get(src).ok_or_else(|| Error::Parse {
            line: *line,
            msg: format!("edge references missing node `{src}`"),
        })?;
        let d = *ids.get(dst).ok_or_else(|| Error::Parse {
            line: *line,
            msg: format!("edge references missing node `{dst}`"),
        })?;
        edges.push((s, d));
    }

    validate_and_build(raw_nodes, edges)
}

fn parse_attrs(toks: &[&str], line: usize) -> Result<HashMap<String, String>> {
    let mut attrs = HashMap::new();
    for t in toks {
        let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("attribute `{t}` is not key=value"),
        })?;
        attrs.insert(k.to_string(), v.to_string());
    }
    Ok(attrs)
}

fn get_usize(attrs: &HashMap<String, String>, key: &str, line: usize) -> Result<usize> {
    let v = attrs.get(key).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing attribute `{key}`"),
    })?;
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("attribute `{key}={v}` is not an integer"),
    })
}

fn parse_kind(kind: &str, attrs: &HashMap<String, String>, line: usize) -> Result<LayerKind> {
    match kind {
        "input" => {
            let shape = attrs.get("shape").ok_or_else(|| Error::Parse {
                line,
                msg: "input requires shape=CxHxW".into(),
            })?;
            let parts: Vec<&str> = shape.split('x').collect();
            if parts.len() != 3 {
                return Err(Error::Parse { line, msg: format!("bad shape `{shape}`") });
            }
            let dims: Vec<usize> = parts
                .iter()
                .map(|p| {
                    p.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad shape `{shape}`"),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(LayerKind::Input { channels: dims[0], height: dims[1], width: dims[2] })
        }
        "conv" => Ok(LayerKind::Conv {
            in_c: get_usize(attrs, "in", line)?,
            out_c: get_usize(attrs, "out", line)?,
            k: get_usize(attrs, "k", line)?,
            stride: attrs.get("stride").map_or(Ok(1), |_| get_usize(attrs, "stride", line))?,
            pad: attrs.get("pad").map_or(Ok(0), |_| get_usize(attrs, "pad", line))?,
            bias: attrs.get("bias").map(|v| v == "1").unwrap_or(false),
        }),
        "batchnorm" => Ok(LayerKind::BatchNorm { features: get_usize(attrs, "features", line)? }),
        "linear" => Ok(LayerKind::Linear {
            in_f: get_usize(attrs, "in", line)?,
            out_f: get_usize(attrs, "out", line)?,
        }),
        "activation" => {
            let f = attrs.get("fn").map(String::as_str).unwrap_or("relu");
            if f != "relu" {
                return Err(Error::Parse { line, msg: format!("unsupported activation `{f}`") });
            }
            Ok(LayerKind::Activation)
        }
        "pool" => {
            let k = attrs.get("kind").map(String::as_str).unwrap_or("global_avg");
            if k != "global_avg" {
                return Err(Error::Parse { line, msg: format!("unsupported pool kind `{k}`") });
            }
            Ok(LayerKind::Pool)
        }
        "add" => Ok(LayerKind::Add { skip: attrs.get("skip").cloned() }),
        "output" => Ok(LayerKind::Output),
        other => Err(Error::Parse { line, msg: format!("unknown node kind `{other}`") }),
    }
}

fn validate_and_build(raw: Vec<RawNode>, edges: Vec<(usize, usize)>) -> Result<ArchGraph> {
    let n = raw.len();
    if n == 0 {
        return Err(Error::Graph("empty architecture".into()));
    }

    // Kahn topological sort, declaration order as tie-break.
    let mut indeg = vec![0usize; n];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in &edges {
        indeg[d] += 1;
        adj[s].push(d);
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    ready.sort_unstable();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut indeg_w = indeg.clone();
    while let Some(&next) = ready.first() {
        ready.remove(0);
        order.push(next);
        for &d in &adj[next] {
            indeg_w[d] -= 1;
            if indeg_w[d] == 0 {
                let pos = ready.binary_search(&d).unwrap_or_else(|p| p);
                ready.insert(pos, d);
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<&str> = (0..n)
            .filter(|i| !order.contains(i))
            .map(|i| raw[i].id.as_str())
            .collect();
        return Err(Error::Graph(format!("cycle detected involving: {}", stuck.join(", "))));
    }

    // Renumber nodes into topological order.
    let mut new_index = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let mut nodes: Vec<LayerNode> = order
        .iter()
        .map(|&old| LayerNode { id: raw[old].id.clone(), kind: raw[old].kind.clone(), line: raw[old].line })
        .collect();
    let mut edges: Vec<(usize, usize)> =
        edges.iter().map(|&(s, d)| (new_index[s], new_index[d])).collect();
    edges.sort_unstable();
    edges.dedup();

    // Structural checks.
    let inputs: Vec<usize> = nodes
        .iter()
        .enumerate()
        .filter(|(_, nd)| matches!(nd.kind, LayerKind::Input { .. }))
        .map(|(i, _)| i)
        .collect();
    let outputs: Vec<usize> = nodes
        .iter()
        .enumerate()
        .filter(|(_, nd)| matches!(nd.kind, LayerKind::Output))
        .map(|(i, _)| i)
        .collect();
    if inputs.len() != 1 {
        return Err(Error::Graph(format!("expected exactly one input node, found {}", inputs.len())));
    }
    if outputs.len() != 1 {
        return Err(Error::Graph(format!("expected exactly one output node, found {}", outputs.len())));
    }

    let indeg_of = |i: usize| edges.iter().filter(|(_, d)| *d == i).count();
    let outdeg_of = |i: usize| edges.iter().filter(|(s, _)| *s == i).count();
    for (i, nd) in nodes.iter().enumerate() {
        let want_in = match nd.kind {
            LayerKind::Input { .. } => 0,
            LayerKind::Add { .. } => 2,
            _ => 1,
        };
        let got = indeg_of(i);
        if got != want_in {
            return Err(Error::Graph(format!(
                "node `{}` ({}) has {} inputs, expected {}",
                nd.id,
                nd.kind.name(),
                got,
                want_in
            )));
        }
        if !matches!(nd.kind, LayerKind::Output) && outdeg_of(i) == 0 {
            return Err(Error::Graph(format!("node `{}` has no consumers", nd.id)));
        }
    }

    // Resolve add skip attributes and check channel consistency.
    let channels = infer_channels(&nodes, &edges, inputs[0])?;
    for i in 0..nodes.len() {
        if let LayerKind::Add { skip: Some(ref s) } = nodes[i].kind {
            let found = nodes.iter().position(|nd| &nd.id == s);
            match found {
                Some(src) if edges.contains(&(src, i)) => {}
                _ => {
                    return Err(Error::Graph(format!(
                        "add node `{}` names skip `{}` which is not one of its inputs",
                        nodes[i].id, s
                    )))
                }
            }
        }
    }

    // Fuse conv + directly-following batchnorm into one parameterized unit.
    let mut fused_bn: HashMap<usize, usize> = HashMap::new();
    for i in 0..nodes.len() {
        if !matches!(nodes[i].kind, LayerKind::Conv { .. }) {
            continue;
        }
        let cons: Vec<usize> = edges.iter().filter(|(s, _)| *s == i).map(|(_, d)| *d).collect();
        if cons.len() == 1 && matches!(nodes[cons[0]].kind, LayerKind::BatchNorm { .. }) {
            fused_bn.insert(i, cons[0]);
        }
    }
    // A fused bn must match its conv's output width.
    for (&conv, &bn) in &fused_bn {
        let out_c = match nodes[conv].kind {
            LayerKind::Conv { out_c, .. } => out_c,
            _ => unreachable!(),
        };
        let feats = match nodes[bn].kind {
            LayerKind::BatchNorm { features } => features,
            _ => unreachable!(),
        };
        if out_c != feats {
            return Err(Error::Graph(format!(
                "batchnorm `{}` has {} features but conv `{}` outputs {} channels",
                nodes[bn].id, feats, nodes[conv].id, out_c
            )));
        }
    }
    let _ = channels;

    let param_layer_ids: Vec<usize> = nodes
        .iter()
        .enumerate()
        .filter(|(_, nd)| matches!(nd.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. }))
        .map(|(i, _)| i)
        .collect();
    if param_layer_ids.is_empty() {
        return Err(Error::Graph("architecture has no parameterized layers".into()));
    }

    for nd in nodes.iter_mut() {
        if let LayerKind::Conv { k, stride, .. } = nd.kind {
            if k == 0 || stride == 0 {
                return Err(Error::Graph(format!("conv `{}` has zero kernel or stride", nd.id)));
            }
        }
    }

    Ok(ArchGraph {
        input: inputs[0],
        output: outputs[0],
        nodes,
        edges,
        param_layer_ids,
        fused_bn,
    })
}

/// Walk the graph checking channel consistency; returns per-node channel
/// count (features for flat nodes).
fn infer_channels(nodes: &[LayerNode], edges: &[(usize, usize)], input: usize) -> Result<Vec<usize>> {
    let mut ch = vec![0usize; nodes.len()];
    for i in 0..nodes.len() {
        let ins: Vec<usize> = edges.iter().filter(|(_, d)| *d == i).map(|(s, _)| *s).collect();
        let got = |j: usize| ch[j];
        ch[i] = match &nodes[i].kind {
            LayerKind::Input { channels, .. } => {
                if i != input {
                    0
                } else {
                    *channels
                }
            }
            LayerKind::Conv { in_c, out_c, .. } => {
                if got(ins[0]) != *in_c {
                    return Err(Error::Graph(format!(
                        "conv `{}` expects {} input channels but receives {}",
                        nodes[i].id, in_c, got(ins[0])
                    )));
                }
                *out_c
            }
            LayerKind::BatchNorm { features } => {
                if got(ins[0]) != *features {
                    return Err(Error::Graph(format!(
                        "batchnorm `{}` expects {} features but receives {}",
                        nodes[i].id, features, got(ins[0])
                    )));
                }
                *features
            }
            LayerKind::Linear { in_f, out_f } => {
                if got(ins[0]) != *in_f {
                    return Err(Error::Graph(format!(
                        "linear `{}` expects {} features but receives {}",
                        nodes[i].id, in_f, got(ins[0])
                    )));
                }
                *out_f
            }
            LayerKind::Activation | LayerKind::Pool => got(ins[0]),
            LayerKind::Add { .. } => {
                if got(ins[0]) != got(ins[1]) {
                    return Err(Error::Graph(format!(
                        "add `{}` receives mismatched channel counts {} and {}",
                        nodes[i].id,
                        got(ins[0]),
                        got(ins[1])
                    )));
                }
                got(ins[0])
            }
            LayerKind::Output => got(ins[0]),
        };
    }
    Ok(ch)
}

/// Deterministically select the gated layers.
pub fn make_scope(arch: &ArchGraph, mode: ScopeMode) -> Result<AugmentationScope> {
    let convs = arch.conv_param_ids();
    let selected = match &mode {
        ScopeMode::All => convs,
        ScopeMode::TopK(k) => {
            if *k < 1 || *k > convs.len() {
                return Err(Error::Config(format!(
                    "top_k={} out of range [1, {}]",
                    k,
                    convs.len()
                )));
            }
            convs[..*k].to_vec()
        }
        ScopeMode::Explicit(ids) => {
            let mut sel = Vec::with_capacity(ids.len());
            for id in ids {
                let idx = arch
                    .node_index(id)
                    .ok_or_else(|| Error::Config(format!("scope names unknown layer `{id}`")))?;
                if !convs.contains(&idx) {
                    return Err(Error::Config(format!(
                        "scope layer `{id}` is not an augmentable conv layer"
                    )));
                }
                sel.push(idx);
            }
            sel.sort_unstable();
            sel.dedup();
            sel
        }
    };
    if selected.is_empty() {
        return Err(Error::Config("scope selects no layers".into()));
    }
    Ok(AugmentationScope { selected_ids: selected, mode })
}

/// Combine an architecture and scope into an RGN construction plan.
pub fn build_rgn_spec(arch: &ArchGraph, scope: AugmentationScope, n: usize) -> Result<RgnSpec> {
    if n < 1 {
        return Err(Error::Config("augmentation factor n must be >= 1".into()));
    }
    for &id in &scope.selected_ids {
        if !arch.conv_param_ids().contains(&id) {
            return Err(Error::Config(format!(
                "scope id {id} is not a conv parameterized layer"
            )));
        }
    }
    let l = scope.len();
    let m = arch.operator_count();
    Ok(RgnSpec { base: arch.clone(), scope, n, l, m })
}
