//! Versioned binary checkpoint format: a JSON shape header followed by
//! little-endian f64 payloads for parameters and buffers.

use crate::net::Network;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DBNET001";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic): {0}")]
    BadMagic(String),
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("truncated checkpoint payload: {0}")]
    Truncated(String),
    #[error("shape mismatch at tensor {index}: file {file:?}, network {net:?}")]
    ShapeMismatch { index: usize, file: Vec<usize>, net: Vec<usize> },
}

#[derive(Serialize, Deserialize)]
struct Header {
    param_shapes: Vec<Vec<usize>>,
    buffer_shapes: Vec<Vec<usize>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn save(net: &mut Network, path: &Path) -> Result<(), CheckpointError> {
    let (param_shapes, param_bytes) = {
        let params = net.params_mut();
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape.clone()).collect();
        let mut bytes: Vec<u8> = Vec::new();
        for p in &params {
            for &v in p.data.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        (shapes, bytes)
    };
    let (buffer_shapes, buffer_bytes) = {
        let buffers = net.buffers_mut();
        let shapes: Vec<Vec<usize>> = buffers.iter().map(|b| b.shape.clone()).collect();
        let mut bytes: Vec<u8> = Vec::new();
        for b in &buffers {
            for &v in b.data.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        (shapes, bytes)
    };
    let header = Header { param_shapes, buffer_shapes };
    let hjson = serde_json::to_vec(&header)?;

    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(MAGIC).map_err(io_err(path))?;
    f.write_all(&(hjson.len() as u32).to_le_bytes()).map_err(io_err(path))?;
    f.write_all(&hjson).map_err(io_err(path))?;
    f.write_all(&param_bytes).map_err(io_err(path))?;
    f.write_all(&buffer_bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn load(net: &mut Network, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(path.display().to_string()));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4).map_err(io_err(path))?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&hjson)?;

    let mut rest = Vec::new();
    f.read_to_end(&mut rest).map_err(io_err(path))?;
    let mut cursor = 0usize;

    {
        let mut params = net.params_mut();
        for (i, p) in params.iter_mut().enumerate() {
            let want = header.param_shapes.get(i).cloned().unwrap_or_default();
            if want != p.shape {
                return Err(CheckpointError::ShapeMismatch { index: i, file: want, net: p.shape.clone() });
            }
            let n = p.data.len() * 8;
            if cursor + n > rest.len() {
                return Err(CheckpointError::Truncated(path.display().to_string()));
            }
            for (j, chunk) in rest[cursor..cursor + n].chunks_exact(8).enumerate() {
                p.data[j] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            cursor += n;
        }
    }
    {
        let mut buffers = net.buffers_mut();
        for (i, b) in buffers.iter_mut().enumerate() {
            let want = header.buffer_shapes.get(i).cloned().unwrap_or_default();
            if want != b.shape {
                return Err(CheckpointError::ShapeMismatch { index: i, file: want, net: b.shape.clone() });
            }
            let n = b.data.len() * 8;
            if cursor + n > rest.len() {
                return Err(CheckpointError::Truncated(path.display().to_string()));
            }
            for (j, chunk) in rest[cursor..cursor + n].chunks_exact(8).enumerate() {
                b.data[j] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            cursor += n;
        }
    }
    Ok(())
}
