//! Checkpoint container: one file holding a JSON manifest plus named
//! parameter arrays with dtype/shape headers. Round-trips bit-exactly.
//!
//! Layout: magic `EIOC`, format version u32 LE, header length u64 LE, JSON
//! header, then the concatenated raw little-endian array data. The header
//! carries the manifest and an index of (name, dtype, shape, offset).

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path as FsPath;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::arch::RgnSpec;
use crate::error::{Error, Result};
use crate::graph::Params;
use crate::nn::Scalar;
use crate::rgn::{Network, Path, Provenance, RgnModel, StandaloneModel};
use crate::rng;
use crate::trainer::{Sgd, TrainPosition};

const MAGIC: &[u8; 4] = b"EIOC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayIndex {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    manifest: Value,
    arrays: Vec<ArrayIndex>,
}

/// Manifest carried by model checkpoints. `spec` makes RGN checkpoints
/// self-contained; `arch` does the same for plain networks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub dtype: String,
    pub spec_hash: String,
    pub n: usize,
    pub l: usize,
    /// Experiment seed; together with the position this reproduces every
    /// derived random stream.
    pub seed: u64,
    pub position: Option<TrainPosition>,
    pub spec: Option<RgnSpec>,
    pub arch: Option<crate::arch::ArchGraph>,
    pub provenance: Option<Provenance>,
    pub config_hash: Option<String>,
    pub params_hash: String,
    /// Free-form extras (command provenance, dataset descriptor, notes).
    #[serde(default)]
    pub extra: Value,
}

fn dtype_of<F: Scalar>() -> &'static str {
    match std::mem::size_of::<F>() {
        4 => "f32",
        8 => "f64",
        _ => unreachable!("only f32/f64 scalars"),
    }
}

fn to_bytes<F: Scalar>(values: impl Iterator<Item = F>) -> Vec<u8> {
    let mut out = Vec::new();
    match dtype_of::<F>() {
        "f32" => {
            for v in values {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        _ => {
            for v in values {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
    out
}

fn from_bytes<F: Scalar>(bytes: &[u8]) -> Vec<F> {
    match dtype_of::<F>() {
        "f32" => bytes
            .chunks_exact(4)
            .map(|c| F::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => bytes
            .chunks_exact(8)
            .map(|c| F::cast(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

/// Low-level writer: manifest plus (name, shape, data) arrays.
pub fn write_container<F: Scalar>(
    path: &FsPath,
    manifest: &Value,
    arrays: &[(String, Vec<usize>, Vec<F>)],
) -> Result<()> {
    let mut index = Vec::with_capacity(arrays.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in arrays {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "array {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        let bytes = to_bytes(data.iter().cloned());
        index.push(ArrayIndex {
            name: name.clone(),
            dtype: dtype_of::<F>().into(),
            shape: shape.clone(),
            offset: blob.len() as u64,
            bytes: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let header = Header { manifest: manifest.clone(), arrays: index };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&blob)?;
    Ok(())
}

/// Low-level reader; returns the manifest and named arrays.
pub fn read_container<F: Scalar>(path: &FsPath) -> Result<(Value, HashMap<String, ArrayD<F>>)> {
    let mut f = fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint container", path.display())));
    }
    let mut v = [0u8; 4];
    f.read_exact(&mut v)?;
    if u32::from_le_bytes(v) != VERSION {
        return Err(Error::Checkpoint("unsupported container version".into()));
    }
    let mut hl = [0u8; 8];
    f.read_exact(&mut hl)?;
    let mut header_json = vec![0u8; u64::from_le_bytes(hl) as usize];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;

    let mut arrays = HashMap::with_capacity(header.arrays.len());
    for a in &header.arrays {
        if a.dtype != dtype_of::<F>() {
            return Err(Error::Checkpoint(format!(
                "array {} has dtype {}, expected {}",
                a.name,
                a.dtype,
                dtype_of::<F>()
            )));
        }
        let start = a.offset as usize;
        let end = start + a.bytes as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("array {} extends past file end", a.name)));
        }
        let data = from_bytes::<F>(&blob[start..end]);
        let arr = ArrayD::from_shape_vec(a.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", a.name)))?;
        arrays.insert(a.name.clone(), arr);
    }
    Ok((header.manifest, arrays))
}

fn params_to_arrays<F: Scalar>(params: &Params<F>) -> Vec<(String, Vec<usize>, Vec<F>)> {
    let mut out = Vec::new();
    params.visit(|name, view| {
        out.push((name.to_string(), view.shape().to_vec(), view.iter().cloned().collect()));
    });
    out
}

fn load_params_from<F: Scalar>(
    params: &mut Params<F>,
    arrays: &HashMap<String, ArrayD<F>>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut seen = 0usize;
    params.visit_mut(|name, mut view| {
        match arrays.get(name) {
            Some(a) if a.shape() == view.shape() => {
                view.assign(a);
                seen += 1;
            }
            Some(a) => missing.push(format!("{name}: shape {:?} vs {:?}", a.shape(), view.shape())),
            None => missing.push(format!("{name}: missing")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("parameter mismatch: {}", missing.join("; "))));
    }
    // extra arrays (e.g. optimizer state) are fine; extra *parameters* are not
    let param_count = arrays.keys().filter(|k| !k.starts_with("optim.")).count();
    if param_count != seen {
        return Err(Error::Checkpoint(format!(
            "container holds {param_count} parameter arrays, model expects {seen}"
        )));
    }
    Ok(())
}

fn optimizer_arrays<F: Scalar>(opt: &Sgd<F>) -> Vec<(String, Vec<usize>, Vec<F>)> {
    let mut out: Vec<_> = opt
        .velocity
        .iter()
        .map(|(name, v)| {
            (format!("optim.velocity.{name}"), v.shape().to_vec(), v.iter().cloned().collect())
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn load_optimizer<F: Scalar>(
    manifest: &Manifest,
    arrays: &HashMap<String, ArrayD<F>>,
) -> Option<Sgd<F>> {
    let extra = manifest.extra.as_object()?;
    let momentum = extra.get("optim_momentum")?.as_f64()?;
    let wd = extra.get("optim_weight_decay")?.as_f64()?;
    let steps = extra.get("optim_steps")?.as_u64()?;
    let mut opt = Sgd::<F>::new(momentum, wd);
    opt.steps = steps;
    for (name, arr) in arrays {
        if let Some(pname) = name.strip_prefix("optim.velocity.") {
            opt.velocity.insert(pname.to_string(), arr.clone());
        }
    }
    Some(opt)
}

/// Save an RGN checkpoint (optionally with optimizer state for resume).
pub fn save_rgn<F: Scalar>(
    path: &FsPath,
    rgn: &RgnModel<F>,
    opt: Option<&Sgd<F>>,
    position: TrainPosition,
    seed: u64,
    config_hash: Option<String>,
    extra: Value,
) -> Result<()> {
    let mut extra_map = match extra {
        Value::Object(m) => m,
        Value::Null => serde_json::Map::new(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("note".into(), other);
            m
        }
    };
    let mut arrays = params_to_arrays(&rgn.params);
    if let Some(opt) = opt {
        extra_map.insert("optim_momentum".into(), opt.momentum.to_f64().into());
        extra_map.insert("optim_weight_decay".into(), opt.weight_decay.to_f64().into());
        extra_map.insert("optim_steps".into(), opt.steps.into());
        arrays.extend(optimizer_arrays(opt));
    }
    let manifest = Manifest {
        kind: "rgn".into(),
        dtype: dtype_of::<F>().into(),
        spec_hash: rgn.spec.content_hash(),
        n: rgn.spec.n,
        l: rgn.spec.l,
        seed,
        position: Some(position),
        spec: Some(rgn.spec.clone()),
        arch: None,
        provenance: None,
        config_hash,
        params_hash: rgn.params.content_hash(),
        extra: Value::Object(extra_map),
    };
    let mv = serde_json::to_value(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    write_container(path, &mv, &arrays)
}

fn parse_manifest(value: &Value) -> Result<Manifest> {
    serde_json::from_value(value.clone())
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))
}

/// Load an RGN checkpoint; verifies spec hash and parameter hash.
pub fn load_rgn<F: Scalar>(path: &FsPath) -> Result<(RgnModel<F>, Option<Sgd<F>>, Manifest)> {
    let (mv, arrays) = read_container::<F>(path)?;
    let manifest = parse_manifest(&mv)?;
    if manifest.kind != "rgn" {
        return Err(Error::Checkpoint(format!(
            "expected an rgn checkpoint, found kind `{}`",
            manifest.kind
        )));
    }
    let spec = manifest
        .spec
        .clone()
        .ok_or_else(|| Error::Checkpoint("rgn checkpoint lacks its spec".into()))?;
    if spec.content_hash() != manifest.spec_hash {
        return Err(Error::Checkpoint("spec hash mismatch in manifest".into()));
    }
    let mut rgn = RgnModel::<F>::init(spec, &mut rng::stream(0, "checkpoint.load", 0))?;
    load_params_from(&mut rgn.params, &arrays)?;
    if rgn.params.content_hash() != manifest.params_hash {
        return Err(Error::Checkpoint("parameter hash mismatch after load".into()));
    }
    let opt = load_optimizer(&manifest, &arrays);
    Ok((rgn, opt, manifest))
}

/// Save a plain network (surrogate / baseline).
pub fn save_network<F: Scalar>(
    path: &FsPath,
    net: &Network<F>,
    arch: &crate::arch::ArchGraph,
    seed: u64,
    extra: Value,
) -> Result<()> {
    let manifest = Manifest {
        kind: "network".into(),
        dtype: dtype_of::<F>().into(),
        spec_hash: arch.content_hash(),
        n: 1,
        l: 0,
        seed,
        position: None,
        spec: None,
        arch: Some(arch.clone()),
        provenance: None,
        config_hash: None,
        params_hash: net.params.content_hash(),
        extra,
    };
    let mv = serde_json::to_value(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    write_container(path, &mv, &params_to_arrays(&net.params))
}

pub fn load_network<F: Scalar>(path: &FsPath) -> Result<(Network<F>, Manifest)> {
    let (mv, arrays) = read_container::<F>(path)?;
    let manifest = parse_manifest(&mv)?;
    if manifest.kind != "network" {
        return Err(Error::Checkpoint(format!(
            "expected a network checkpoint, found kind `{}`",
            manifest.kind
        )));
    }
    let arch = manifest
        .arch
        .clone()
        .ok_or_else(|| Error::Checkpoint("network checkpoint lacks its architecture".into()))?;
    let mut net = Network::<F>::init(&arch, &mut rng::stream(0, "checkpoint.load", 0))?;
    load_params_from(&mut net.params, &arrays)?;
    if net.params.content_hash() != manifest.params_hash {
        return Err(Error::Checkpoint("parameter hash mismatch after load".into()));
    }
    Ok((net, manifest))
}

/// Save a derived standalone model with its provenance.
pub fn save_standalone<F: Scalar>(
    path: &FsPath,
    model: &StandaloneModel<F>,
    arch: &crate::arch::ArchGraph,
    seed: u64,
    extra: Value,
) -> Result<()> {
    let manifest = Manifest {
        kind: "standalone".into(),
        dtype: dtype_of::<F>().into(),
        spec_hash: arch.content_hash(),
        n: 1,
        l: 0,
        seed,
        position: None,
        spec: None,
        arch: Some(arch.clone()),
        provenance: Some(model.provenance.clone()),
        config_hash: None,
        params_hash: model.net.params.content_hash(),
        extra,
    };
    let mv = serde_json::to_value(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    write_container(path, &mv, &params_to_arrays(&model.net.params))
}

pub fn load_standalone<F: Scalar>(path: &FsPath) -> Result<(StandaloneModel<F>, Manifest)> {
    let (mv, arrays) = read_container::<F>(path)?;
    let manifest = parse_manifest(&mv)?;
    if manifest.kind != "standalone" {
        return Err(Error::Checkpoint(format!(
            "expected a standalone checkpoint, found kind `{}`",
            manifest.kind
        )));
    }
    let arch = manifest
        .arch
        .clone()
        .ok_or_else(|| Error::Checkpoint("standalone checkpoint lacks its architecture".into()))?;
    let provenance = manifest
        .provenance
        .clone()
        .ok_or_else(|| Error::Checkpoint("standalone checkpoint lacks provenance".into()))?;
    let mut net = Network::<F>::init(&arch, &mut rng::stream(0, "checkpoint.load", 0))?;
    load_params_from(&mut net.params, &arrays)?;
    if net.params.content_hash() != manifest.params_hash {
        return Err(Error::Checkpoint("parameter hash mismatch after load".into()));
    }
    Ok((StandaloneModel { net, provenance }, manifest))
}

/// Load any model checkpoint as an evaluable classifier (network or
/// standalone), with its manifest.
pub enum AnyModel<F> {
    Network(Network<F>),
    Standalone(StandaloneModel<F>),
}

impl<F: Scalar> AnyModel<F> {
    pub fn classifier(&self) -> &dyn crate::rgn::Classifier<F> {
        match self {
            AnyModel::Network(n) => n,
            AnyModel::Standalone(s) => s,
        }
    }
}

pub fn load_model<F: Scalar>(path: &FsPath) -> Result<(AnyModel<F>, Manifest)> {
    let (mv, _) = read_container::<F>(path)?;
    let manifest = parse_manifest(&mv)?;
    match manifest.kind.as_str() {
        "network" => load_network(path).map(|(n, m)| (AnyModel::Network(n), m)),
        "standalone" => load_standalone(path).map(|(s, m)| (AnyModel::Standalone(s), m)),
        other => Err(Error::Checkpoint(format!("cannot evaluate checkpoint of kind `{other}`"))),
    }
}

impl Path {
    /// Short stable identifier of a path for filenames.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for g in &self.gates {
            h.update(g.0.to_le_bytes());
        }
        h.finalize()[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_rgn_spec, make_scope, parse_arch, ScopeMode, TOY6};
    use crate::rng::labels;
    use serde_json::json;

    fn toy_rgn(seed: u64) -> RgnModel<f32> {
        let arch = parse_arch(TOY6).unwrap();
        let scope = make_scope(&arch, ScopeMode::All).unwrap();
        let spec = build_rgn_spec(&arch, scope, 2).unwrap();
        RgnModel::init(spec, &mut rng::stream(seed, labels::INIT, 0)).unwrap()
    }

    #[test]
    fn rgn_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgn.eio");
        let rgn = toy_rgn(1);
        let mut opt = Sgd::<f32>::new(0.9, 1e-4);
        opt.velocity.insert(
            "block0.replica0.weight".into(),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[8, 3, 3, 3]), 0.25f32),
        );
        opt.steps = 17;
        let pos = TrainPosition { phase: crate::trainer::Phase::Diversify, epoch: 3 };
        save_rgn(&p, &rgn, Some(&opt), pos, 42, Some("cfg".into()), json!({"k": 1}))
            .unwrap();
        let (loaded, opt2, manifest) = load_rgn::<f32>(&p).unwrap();
        assert_eq!(loaded.params.content_hash(), rgn.params.content_hash());
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.position, Some(pos));
        assert_eq!(manifest.n, 2);
        assert_eq!(manifest.l, 6);
        let opt2 = opt2.unwrap();
        assert_eq!(opt2.steps, 17);
        assert_eq!(
            opt2.velocity["block0.replica0.weight"],
            opt.velocity["block0.replica0.weight"]
        );
    }

    #[test]
    fn standalone_checkpoint_keeps_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("derived.eio");
        let rgn = toy_rgn(2);
        let path = Path::new(vec![0, 1, 0, 1, 1, 0]);
        let model = rgn.derive_model(&path).unwrap();
        save_standalone(&p, &model, &rgn.spec.base, 7, Value::Null).unwrap();
        let (loaded, manifest) = load_standalone::<f32>(&p).unwrap();
        assert_eq!(loaded.provenance.path, path.as_u16());
        assert_eq!(loaded.provenance.rgn_hash, rgn.spec.content_hash());
        assert_eq!(manifest.params_hash, model.net.params.content_hash());
        // forward equivalence after the round trip
        let mut r = rng::stream(8, labels::DATA, 0);
        let x = ndarray::Array4::from_shape_simple_fn((2, 3, 32, 32), || {
            f32::sample_unit(&mut r)
        });
        let a = model.net.logits(&x).unwrap();
        let b = loaded.net.logits(&x).unwrap();
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgn.eio");
        let rgn = toy_rgn(3);
        save_rgn(&p, &rgn, None, TrainPosition::start(), 0, None, Value::Null).unwrap();
        let err = load_rgn::<f64>(&p).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err:?}");
    }

    #[test]
    fn truncated_container_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgn.eio");
        let rgn = toy_rgn(4);
        save_rgn(&p, &rgn, None, TrainPosition::start(), 0, None, Value::Null).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 64]).unwrap();
        assert!(load_rgn::<f32>(&p).is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgn.eio");
        let rgn = toy_rgn(5);
        save_rgn(&p, &rgn, None, TrainPosition::start(), 0, None, Value::Null).unwrap();
        assert!(load_network::<f32>(&p).is_err());
        assert!(load_standalone::<f32>(&p).is_err());
    }
}
