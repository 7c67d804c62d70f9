//! Checkpoint files: a JSON header (tensor shapes, config echo, epoch)
//! followed by one `UVF1` block per parameter tensor, in header order.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorInfo>,
    pub config: serde_json::Value,
    pub epoch: usize,
}

pub fn save(
    path: &Path,
    header: &CheckpointHeader,
    tensors: &[&[f64]],
) -> Result<()> {
    if header.tensors.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "{} tensor infos for {} tensors",
            header.tensors.len(),
            tensors.len()
        )));
    }
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (info, data) in header.tensors.iter().zip(tensors) {
        if data.len() != info.rows * info.cols {
            return Err(Error::Shape(format!(
                "tensor `{}` has {} values, header says {}x{}",
                info.name,
                data.len(),
                info.rows,
                info.cols
            )));
        }
        buf.extend_from_slice(b"UVF1");
        buf.extend_from_slice(&(info.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(info.cols as u32).to_le_bytes());
        for &v in *data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let mut block_header = [0u8; 12];
        file.read_exact(&mut block_header)
            .map_err(|_| Error::Format(format!("truncated tensor block `{}`", info.name)))?;
        if &block_header[0..4] != b"UVF1" {
            return Err(Error::Format(format!("bad magic in tensor block `{}`", info.name)));
        }
        let rows = u32::from_le_bytes(block_header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(block_header[8..12].try_into().unwrap()) as usize;
        if rows != info.rows || cols != info.cols {
            return Err(Error::Format(format!(
                "tensor `{}` block is {rows}x{cols}, header says {}x{}",
                info.name, info.rows, info.cols
            )));
        }
        let mut payload = vec![0u8; rows * cols * 4];
        file.read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("truncated tensor payload `{}`", info.name)))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(data);
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let header = CheckpointHeader {
            tensors: vec![
                TensorInfo {
                    name: "weight".into(),
                    rows: 2,
                    cols: 3,
                },
                TensorInfo {
                    name: "bias".into(),
                    rows: 1,
                    cols: 3,
                },
            ],
            config: serde_json::json!({"lr": 0.001}),
            epoch: 5,
        };
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![0.5, -0.5, 0.25];
        save(&p, &header, &[&w, &b]).unwrap();
        let (h, t) = load(&p).unwrap();
        assert_eq!(h.epoch, 5);
        assert_eq!(h.tensors.len(), 2);
        assert_eq!(t[0], w);
        assert_eq!(t[1], b);
    }
}
