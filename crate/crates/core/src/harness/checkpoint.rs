//! Checkpoint file: one line of JSON header, then the tensors as little-endian
//! f64 values back to back. The header lists every tensor's name, shape and
//! offset (in values) into the payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use mattekit_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::net::Params;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Next iteration to run.
    pub iteration: u64,
    /// Epochs completed.
    pub epoch: u64,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub epoch: u64,
    pub params: Params,
    pub adam: AdamState,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let mut tensors = Vec::with_capacity(3 * p.len());
    let mut payload: Vec<&[f64]> = Vec::with_capacity(3 * p.len());
    let mut offset = 0;
    for (i, (name, t)) in p.names().iter().zip(p.tensors()).enumerate() {
        let parts = [
            (name.clone(), t.data()),
            (format!("{MOMENT1}{name}"), &ckpt.adam.m[i][..]),
            (format!("{MOMENT2}{name}"), &ckpt.adam.v[i][..]),
        ];
        for (entry, data) in parts {
            tensors.push(TensorEntry {
                name: entry,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += data.len();
            payload.push(data);
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        iteration: ckpt.iteration,
        epoch: ckpt.epoch,
        adam_step: ckpt.adam.step,
        tensors,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::format(path, e))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write to a sibling file first so an interrupted save never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(&tmp, e);
    w.write_all(json.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for chunk in payload {
        for v in chunk {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks it matches `template`'s parameter layout.
pub fn load(path: &Path, template: &Params) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::format(path, e))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(
            path,
            "payload is not a whole number of f64 values",
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
        if e.shape != shape {
            return Err(Error::format(
                path,
                format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    e.shape
                ),
            ));
        }
        let n: usize = shape.iter().product();
        values
            .get(e.offset..e.offset + n)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::format(path, format!("tensor `{name}` runs past the payload")))
    };

    // Every template tensor is looked up by name below; equal counts then
    // rule out a checkpoint that carries extra parameters.
    if header.tensors.len() != 3 * template.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint holds {} parameter tensors, the network has {}",
                header.tensors.len() / 3,
                template.len()
            ),
        ));
    }
    let mut params = template.clone();
    let mut adam = AdamState::new(template);
    adam.step = header.adam_step;
    for (i, (name, t)) in template.names().iter().zip(template.tensors()).enumerate() {
        let shape = t.shape().to_vec();
        let data = fetch(name, &shape)?;
        params.set(name, Tensor::new(shape.clone(), data)?)?;
        adam.m[i] = fetch(&format!("{MOMENT1}{name}"), &shape)?;
        adam.v[i] = fetch(&format!("{MOMENT2}{name}"), &shape)?;
    }
    Ok(Checkpoint {
        iteration: header.iteration,
        epoch: header.epoch,
        params,
        adam,
    })
}

/// Parameters only, for inference.
pub fn load_params(path: &Path, template: &Params) -> Result<Params> {
    Ok(load(path, template)?.params)
}
