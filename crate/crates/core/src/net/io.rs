//! Parameter persistence: a JSON header (head kind, layer shapes,
//! normalization) followed by the flat little-endian f64 parameter block.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadKind, Linear, NetError, RegressorParams};

#[derive(Debug, Serialize, Deserialize)]
struct ParamsHeader {
    head: HeadKind,
    /// (rows, cols) of each weight matrix in layer order; biases follow
    /// each matrix with `rows` entries.
    shapes: Vec<(usize, usize)>,
    /// Input normalization applied at inference. Clouds are centered on
    /// their mean and divided by their RMS radius; pooled outputs invert
    /// both.
    normalization: String,
}

/// Write parameters: `u64` header length, JSON header, then every layer's
/// weights (row-major) and bias as little-endian f64.
pub fn write_params(params: &RegressorParams, path: &Path) -> Result<(), NetError> {
    let header = ParamsHeader {
        head: params.head,
        shapes: params.layers().iter().map(|l| l.w.dim()).collect(),
        normalization: "center+scale".to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for layer in params.layers() {
        for &v in layer.w.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.b.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Read parameters written by [`write_params`].
pub fn read_params(path: &Path) -> Result<RegressorParams, NetError> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: ParamsHeader = serde_json::from_slice(&header_bytes)?;
    if header.shapes.len() != 4 {
        return Err(NetError::Malformed(format!(
            "expected 4 layers, header lists {}",
            header.shapes.len()
        )));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut offset = 0usize;
    let mut next = |count: usize| -> Result<Vec<f64>, NetError> {
        let bytes = count * 8;
        if offset + bytes > rest.len() {
            return Err(NetError::Malformed(format!(
                "parameter block too short: need {} bytes past {}",
                bytes, offset
            )));
        }
        let vals = rest[offset..offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += bytes;
        Ok(vals)
    };

    let mut layers = Vec::with_capacity(4);
    for &(rows, cols) in &header.shapes {
        let w = ndarray::Array2::from_shape_vec((rows, cols), next(rows * cols)?)
            .map_err(|e| NetError::Malformed(e.to_string()))?;
        let b = ndarray::Array1::from_vec(next(rows)?);
        layers.push(Linear { w, b });
    }
    if offset != rest.len() {
        return Err(NetError::Malformed(format!(
            "{} trailing bytes after parameters",
            rest.len() - offset
        )));
    }
    let mut it = layers.into_iter();
    Ok(RegressorParams {
        head: header.head,
        enc1: it.next().unwrap(),
        enc2: it.next().unwrap(),
        dec1: it.next().unwrap(),
        dec2: it.next().unwrap(),
    })
}
