//! Checkpoint files: a text manifest, a `payload` line, then every tensor as
//! contiguous little-endian `f32` values.
//!
//! ```text
//! encdec-checkpoint 1
//! model_config {json}
//! train_config {json}            (optional)
//! step 120
//! optimizer 120 0.9 0.95 1e-8 0.1 (optional)
//! tensor <name> <dims, x-separated> <offset> <len>
//! ...
//! values <total>
//! sha256 <hex of payload bytes>
//! payload
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "encdec-checkpoint 1";

#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub step: usize,
    pub state: Option<TrainState>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, train_config: Option<&TrainConfig>, state: Option<&TrainState>) -> Result<()> {
    let mut header = vec![MAGIC.to_string(), format!("model_config {}", serde_json::to_string(model.config())?)];
    if let Some(tc) = train_config {
        header.push(format!("train_config {}", serde_json::to_string(tc)?));
    }
    header.push(format!("step {}", state.map_or(0, |s| s.step)));
    let mut entries: Vec<(String, Vec<usize>, &[f32])> = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| (n.clone(), p.shape().to_vec(), p.data()))
        .collect();
    if let Some(s) = state {
        let o = &s.optimizer;
        header.push(format!("optimizer {} {:e} {:e} {:e} {:e}", o.t, o.beta1, o.beta2, o.eps, o.weight_decay));
        for (prefix, moments) in [("adam.m.", &o.m), ("adam.v.", &o.v)] {
            for ((n, p), m) in model.param_names().iter().zip(model.params()).zip(moments) {
                entries.push((format!("{prefix}{n}"), p.shape().to_vec(), m));
            }
        }
    }
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in &entries {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        header.push(format!("tensor {name} {} {offset} {}", dims.join("x"), data.len()));
        offset += data.len();
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push(format!("values {offset}"));
    header.push(format!("sha256 {}", hex::encode(Sha256::digest(&payload))));
    header.push("payload".into());
    let mut bytes = header.join("\n").into_bytes();
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let marker = b"\npayload\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad(path, "missing payload marker"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad(path, "manifest is not UTF-8"))?;
    let payload = &bytes[split + marker.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(path, "not an encdec checkpoint"));
    }
    let mut model_config: Option<ModelConfig> = None;
    let mut train_config = None;
    let mut step = 0;
    let mut optimizer: Option<AdamW> = None;
    let mut tensors = Vec::new();
    let mut total = None;
    let mut checksum = None;
    for line in lines {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(path, format!("malformed line `{line}`")))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(path, format!("bad number `{s}`")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(path, format!("bad integer `{s}`")));
        match key {
            "model_config" => model_config = Some(serde_json::from_str(rest)?),
            "train_config" => train_config = Some(serde_json::from_str(rest)?),
            "step" => step = int(rest)?,
            "optimizer" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(bad(path, "optimizer line needs 5 fields"));
                }
                optimizer = Some(AdamW {
                    t: int(f[0])? as u64,
                    beta1: num(f[1])?,
                    beta2: num(f[2])?,
                    eps: num(f[3])?,
                    weight_decay: num(f[4])?,
                    m: Vec::new(),
                    v: Vec::new(),
                });
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(path, format!("tensor line `{line}` needs 4 fields")));
                }
                let shape = f[1].split('x').map(int).collect::<Result<Vec<_>>>()?;
                tensors.push((f[0].to_string(), shape, int(f[2])?, int(f[3])?));
            }
            "values" => total = Some(int(rest)?),
            "sha256" => checksum = Some(rest.to_string()),
            other => return Err(bad(path, format!("unknown manifest key `{other}`"))),
        }
    }
    let total = total.ok_or_else(|| bad(path, "missing values line"))?;
    if payload.len() != total * 4 {
        return Err(bad(path, format!("payload holds {} bytes, manifest says {}", payload.len(), total * 4)));
    }
    if checksum.as_deref() != Some(hex::encode(Sha256::digest(payload)).as_str()) {
        return Err(bad(path, "payload checksum mismatch"));
    }
    let cfg = model_config.ok_or_else(|| bad(path, "missing model_config"))?;
    let read = |off: usize, len: usize| -> Result<Vec<f32>> {
        if off + len > total {
            return Err(bad(path, "tensor extends past the payload"));
        }
        Ok(payload[off * 4..(off + len) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, shape, off, len) in tensors {
        let data = read(off, len)?;
        if name.starts_with("adam.m.") {
            m.push(data);
        } else if name.starts_with("adam.v.") {
            v.push(data);
        } else {
            params.push((name, Tensor::new(shape, data)?));
        }
    }
    let model = Model::from_params(&cfg, params)?;
    let state = match optimizer {
        Some(mut o) => {
            if m.len() != model.params().len() || v.len() != model.params().len() {
                return Err(bad(path, "optimizer moments do not match the parameters"));
            }
            o.m = m;
            o.v = v;
            Some(TrainState { optimizer: o, step })
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        train_config,
        step,
        state,
    })
}
