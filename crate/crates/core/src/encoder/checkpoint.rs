//! Checkpoint container: a length-prefixed JSON header followed by `PSER` tensors.
//!
//! ```text
//! header_len: u32 LE | header: UTF-8 JSON | tensor 0 | tensor 1 | ...
//! ```
//!
//! The header lists the encoder configuration, the speaker table order and
//! the name and dims of every tensor in file order. Payloads are `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};

const FORMAT: &str = "perser-checkpoint";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: EncoderConfig,
    speakers: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

fn running_names(i: usize) -> (String, String) {
    (format!("interp.{i}.bn.running_mean"), format!("interp.{i}.bn.running_var"))
}

pub fn save_checkpoint<T: Scalar>(model: &EncoderModel<T>, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .names
        .iter()
        .zip(&model.params)
        .map(|(n, m)| (n.clone(), Tensor::from_matrix(m)))
        .collect();
    for (i, rs) in model.running.iter().enumerate() {
        let (mean_name, var_name) = running_names(i);
        tensors.push((mean_name, Tensor::vector(rs.mean.iter().map(|v| v.as_f32()).collect())));
        tensors.push((var_name, Tensor::vector(rs.var.iter().map(|v| v.as_f32()).collect())));
    }
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        config: model.config.clone(),
        speakers: model.speakers.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                dims: t.dims.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::io(path, e.into()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, t) in &tensors {
        t.write_to(&mut w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<EncoderModel<T>> {
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| format_err(e.to_string()))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(format_err(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let mut model = EncoderModel::<T>::new(header.config, header.speakers, 0)?;
    let mut seen = vec![false; model.params.len()];
    for entry in &header.tensors {
        let tensor = Tensor::read_from(&mut r)
            .map_err(|e| Error::io(path, e))?
            .map_err(format_err)?;
        if tensor.dims != entry.dims {
            return Err(format_err(format!("tensor {} has dims {:?}, header says {:?}", entry.name, tensor.dims, entry.dims)));
        }
        if let Some(i) = model.names.iter().position(|n| *n == entry.name) {
            let m: Matrix<T> = tensor.to_matrix()?;
            if m.shape() != model.params[i].shape() {
                return Err(format_err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    entry.name,
                    m.shape(),
                    model.params[i].shape()
                )));
            }
            model.params[i] = m;
            seen[i] = true;
            continue;
        }
        let slot = (0..model.running.len()).find_map(|i| {
            let (mean_name, var_name) = running_names(i);
            if entry.name == mean_name {
                Some((i, true))
            } else if entry.name == var_name {
                Some((i, false))
            } else {
                None
            }
        });
        let Some((i, is_mean)) = slot else {
            return Err(format_err(format!("unexpected tensor {}", entry.name)));
        };
        let values: Vec<T> = tensor.data.iter().map(|&v| T::of(f64::from(v))).collect();
        let target = if is_mean { &mut model.running[i].mean } else { &mut model.running[i].var };
        if values.len() != target.len() {
            return Err(format_err(format!("running statistic {} has the wrong length", entry.name)));
        }
        *target = values;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(format_err(format!("missing parameter {}", model.names[i])));
    }
    Ok(model)
}
