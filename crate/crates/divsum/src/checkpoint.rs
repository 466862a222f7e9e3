//! Binary checkpoint format, bit-exact across platforms:
//! magic "DIVSUM1\0", u64-LE header length, UTF-8 JSON header (model
//! config + vocabulary + best validation metric), then per-parameter
//! records: u16-LE name length, name bytes, u8 rank, u64-LE dims, raw
//! f32-LE data. Values are stored in 32-bit precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DIVSUM1\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("unknown parameter `{0}` in checkpoint")]
    UnknownParam(String),
    #[error("parameter `{name}` shape mismatch: file {file:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub best_validation: f64,
}

pub fn save(
    path: &Path,
    model: &Model,
    vocab: &Vocabulary,
    best_validation: f64,
) -> Result<(), CheckpointError> {
    let io = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab: vocab.clone(),
        best_validation,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for (name, t) in model.params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name_bytes).map_err(io)?;
        w.write_all(&[t.shape.len() as u8]).map_err(io)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<(Model, Vocabulary, f64), CheckpointError> {
    let io = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io)?;
    let mut header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    header.vocab.rebuild_index();

    let mut model = Model::new(header.config, 0);
    loop {
        let mut nl = [0u8; 2];
        match r.read_exact(&mut nl) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io(e)),
        }
        let name_len = u16::from_le_bytes(nl) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(io)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut db = [0u8; 8];
            r.read_exact(&mut db).map_err(io)?;
            shape.push(u64::from_le_bytes(db) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut fb = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut fb).map_err(io)?;
            data.push(f32::from_le_bytes(fb) as f64);
        }
        if !model.params.contains(&name) {
            return Err(CheckpointError::UnknownParam(name));
        }
        let target = model.params.get_mut(&name);
        if target.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                file: shape,
                model: target.shape.clone(),
            });
        }
        *target = Tensor::new(shape, data);
    }
    Ok((model, header.vocab, header.best_validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, RawTriple};
    use crate::diversity::DiversityMode;

    fn toy_vocab() -> Vocabulary {
        build_vocab(
            &[RawTriple {
                query: "what color is the sky".into(),
                document: "the sky is blue today".into(),
                summary: "blue sky".into(),
            }],
            1,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_values_and_decodes() {
        let vocab = toy_vocab();
        let config = ModelConfig::small(vocab.size(), DiversityMode::Sd2);
        let model = Model::new(config, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &vocab, 0.25).unwrap();
        let (loaded, v2, best) = load(&path).unwrap();
        assert_eq!(best, 0.25);
        assert_eq!(v2, vocab);
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            for (a, b) in t1.data.iter().zip(&t2.data) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        // a second save/load cycle is bit-stable (f32 already)
        let path2 = dir.path().join("m2.ckpt");
        save(&path2, &loaded, &v2, best).unwrap();
        let (loaded2, _, _) = load(&path2).unwrap();
        for ((_, t1), (_, t2)) in loaded.params.iter().zip(loaded2.params.iter()) {
            assert_eq!(t1.data, t2.data);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTDIVSUMJUNKJUNK").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
