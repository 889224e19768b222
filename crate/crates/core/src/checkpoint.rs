//! Checkpoint file format.
//!
//! Layout: the magic bytes "STGAN1", a little-endian u32 header length, a
//! UTF-8 JSON header (version, iteration, loop kind, model config, Adam step
//! counts, tensor manifest), then the payload of raw little-endian f64s. The
//! manifest orders tensors by name, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"STGAN1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: u64,
    loop_kind: String,
    model: serde_json::Value,
    adam_t: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub loop_kind: String,
    /// The model section of the run config, kept for tooling and so `predict`
    /// and `eval` can rebuild the architecture without the original config.
    pub model: serde_json::Value,
    pub nets: BTreeMap<String, ParamSet>,
    pub opt: BTreeMap<String, OptimizerState>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    // flat tensor table: params/<net>/<param>, adam/<net>/{m,v}/<param>
    let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (net, ps) in &ckpt.nets {
        for (name, t) in ps.iter() {
            entries.push((format!("params/{net}/{name}"), t.shape().to_vec(), t.data()));
        }
    }
    let mut adam_t = BTreeMap::new();
    for (net, state) in &ckpt.opt {
        adam_t.insert(net.clone(), state.t);
        let shape_of = |pname: &str| -> Vec<usize> {
            ckpt.nets
                .get(net)
                .and_then(|ps| ps.get(pname))
                .map(|t| t.shape().to_vec())
                .unwrap_or_default()
        };
        for (pname, m) in &state.m {
            let shape = shape_of(pname);
            entries.push((format!("adam/{net}/m/{pname}"), shape, m));
        }
        for (pname, v) in &state.v {
            let shape = shape_of(pname);
            entries.push((format!("adam/{net}/v/{pname}"), shape, v));
        }
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, shape, data) in &entries {
        manifest.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += (data.len() * 8) as u64;
    }
    let header = Header {
        version: VERSION,
        iteration: ckpt.iteration,
        loop_kind: ckpt.loop_kind.clone(),
        model: ckpt.model.clone(),
        adam_t,
        tensors: manifest,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Data(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, _, data) in &entries {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let header_len =
        u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 4;
    if bytes.len() < header_start + header_len {
        return Err(Error::CheckpointTruncated("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..header_start + header_len])
        .map_err(|e| Error::CheckpointTruncated(format!("header parse: {e}")))?;
    if header.version != VERSION {
        return Err(Error::CheckpointVersion { found: header.version, expected: VERSION });
    }
    let payload = &bytes[header_start + header_len..];

    let mut nets: BTreeMap<String, ParamSet> = BTreeMap::new();
    let mut moments: BTreeMap<String, OptimizerState> = BTreeMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::CheckpointTruncated(format!(
                "tensor {} needs bytes {}..{}, payload has {}",
                entry.name,
                start,
                end,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let parts: Vec<&str> = entry.name.splitn(4, '/').collect();
        match parts.as_slice() {
            ["params", net, pname] => {
                let ps = nets.entry(net.to_string()).or_default();
                ps.add(pname, &entry.shape);
                let t = ps.get_mut(pname).expect("just added");
                t.data_mut().copy_from_slice(&data);
            }
            ["adam", net, which, pname] => {
                let state = moments.entry(net.to_string()).or_default();
                let slot = if *which == "m" { &mut state.m } else { &mut state.v };
                slot.insert(pname.to_string(), data);
            }
            _ => {
                return Err(Error::CheckpointTruncated(format!(
                    "unrecognized tensor path {}",
                    entry.name
                )))
            }
        }
    }
    for (net, t) in &header.adam_t {
        moments.entry(net.clone()).or_default().t = *t;
    }

    Ok(Checkpoint {
        iteration: header.iteration,
        loop_kind: header.loop_kind,
        model: header.model,
        nets,
        opt: moments,
    })
}

/// All-or-nothing architecture check: the loaded net must carry exactly the
/// expected parameter names and shapes.
pub fn validate_net(expected: &ParamSet, loaded: &ParamSet, net: &str) -> Result<()> {
    let exp: Vec<String> = expected.names();
    let got: Vec<String> = loaded.names();
    if exp != got {
        let missing: Vec<&String> = exp.iter().filter(|n| !got.contains(n)).collect();
        let extra: Vec<&String> = got.iter().filter(|n| !exp.contains(n)).collect();
        return Err(Error::CheckpointNames(format!(
            "net '{net}': missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for name in &exp {
        let a = expected.get(name).unwrap().shape();
        let b = loaded.get(name).unwrap().shape();
        if a != b {
            return Err(Error::CheckpointNames(format!(
                "net '{net}': parameter {name} has shape {b:?}, expected {a:?}"
            )));
        }
    }
    Ok(())
}

/// Convenience for tensors that only exist at load time.
pub fn tensor_from(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
    Tensor::from_vec(shape, data)
}
