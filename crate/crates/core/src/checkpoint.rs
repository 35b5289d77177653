//! Binary model snapshots.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `CONSNET\0` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `n` (`u64`) |
//! | n     | UTF-8 JSON header: model config, class count, parameter names and shapes, running-statistic widths |
//! | rest  | `f64` values: every parameter in header order, then each running mean followed by its variance |
//!
//! Loading rebuilds the network from the stored config and overwrites every
//! value, so a loaded model scores bit-identically to the saved one.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};

pub const MAGIC: [u8; 8] = *b"CONSNET\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match its config: {0}")]
    Layout(String),
    #[error("{0} trailing bytes after the last value")]
    Trailing(usize),
    #[error(transparent)]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    num_classes: usize,
    params: Vec<(String, [usize; 2])>,
    running: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), CheckpointError> {
    let header = Header {
        config: model.config.clone(),
        num_classes: model.num_classes,
        params: model
            .params
            .iter()
            .map(|(n, t)| (n.to_owned(), t.shape()))
            .collect(),
        running: model.running.iter().map(|r| r.mean.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * model.params.numel());
    for (_, t) in model.params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for r in &model.running {
        for v in r.mean.iter().chain(&r.var) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn fill(dst: &mut [f64], src: &mut &[u8]) -> Result<(), CheckpointError> {
    let need = 8 * dst.len();
    if src.len() < need {
        return Err(CheckpointError::Layout("value section is truncated".into()));
    }
    for (d, chunk) in dst.iter_mut().zip(src[..need].chunks_exact(8)) {
        *d = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    *src = &src[need..];
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    let mut model = Model::new(header.config, header.num_classes);
    let layout: Vec<(String, [usize; 2])> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_owned(), t.shape()))
        .collect();
    if layout != header.params {
        return Err(CheckpointError::Layout(
            "parameter names or shapes differ".into(),
        ));
    }
    let widths: Vec<usize> = model.running.iter().map(|s| s.mean.len()).collect();
    if widths != header.running {
        return Err(CheckpointError::Layout(
            "normalization widths differ".into(),
        ));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut rest = body.as_slice();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        fill(model.params.get_mut(id).data_mut(), &mut rest)?;
    }
    for s in &mut model.running {
        fill(&mut s.mean, &mut rest)?;
        fill(&mut s.var, &mut rest)?;
    }
    if !rest.is_empty() {
        return Err(CheckpointError::Trailing(rest.len()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    write_checkpoint(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::Embedder;

    fn perturbed(embedder: Embedder) -> Model {
        let mut m = Model::new(tiny_config(embedder), 3);
        // move every value off its initial state so loading must restore it
        let ids: Vec<_> = m.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            for (j, v) in m.params.get_mut(id).data_mut().iter_mut().enumerate() {
                *v += 1e-3 * ((k * 31 + j) % 7) as f64;
            }
        }
        for s in &mut m.running {
            for (j, v) in s.mean.iter_mut().enumerate() {
                *v = 0.1 * j as f64 - 0.3;
            }
            for (j, v) in s.var.iter_mut().enumerate() {
                *v = 1.0 + 0.01 * j as f64;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        for e in [Embedder::Gat, Embedder::Mlp, Embedder::None] {
            let m = perturbed(e);
            let mut bytes = Vec::new();
            write_checkpoint(&m, &mut bytes).unwrap();
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(back.config, m.config);
            for ((na, ta), (nb, tb)) in m.params.iter().zip(back.params.iter()) {
                assert_eq!(na, nb);
                let a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b);
            }
            assert_eq!(m.running, back.running);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = perturbed(Embedder::Gat);
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(CheckpointError::Version(9))
        ));

        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            read_checkpoint(short),
            Err(CheckpointError::Layout(_))
        ));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read_checkpoint(long.as_slice()),
            Err(CheckpointError::Trailing(8))
        ));
    }
}
