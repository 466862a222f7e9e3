//! Shared word-embedding table for query and document words, optionally
//! initialized from GloVe-format text vectors and fine-tuned.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Vocabulary, PAD};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unparseable value `{value}`")]
    BadValue { line: usize, value: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Random-initialized table: rows uniform(-0.1, 0.1), PAD row zero.
pub fn init_table(vocab_size: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; vocab_size * dim];
    for (row, chunk) in data.chunks_mut(dim).enumerate() {
        if row == PAD {
            continue;
        }
        for v in chunk.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    Tensor::matrix(vocab_size, dim, data)
}

/// Load GloVe-format vectors (`token v1 ... vd` per line) into a fresh
/// table. Vocabulary tokens present in the file get the pretrained row;
/// the rest keep their random initialization. Returns the table and the
/// matched fraction over non-special vocabulary entries.
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(Tensor, f64), EmbeddingError> {
    let text = fs::read_to_string(path).map_err(|e| EmbeddingError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut table = init_table(vocab.size(), dim, seed);
    let mut matched = vec![false; vocab.size()];
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap();
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(EmbeddingError::DimensionMismatch {
                line: lineno,
                expected: dim,
                found: values.len(),
            });
        }
        let id = vocab.id(token);
        if vocab.token(id) != token {
            continue; // OOV pretrained token
        }
        for (j, v) in values.iter().enumerate() {
            table.data[id * dim + j] = v.parse().map_err(|_| EmbeddingError::BadValue {
                line: lineno,
                value: v.to_string(),
            })?;
        }
        matched[id] = true;
    }
    // PAD stays zero even if the file carries a row for it
    for v in table.data[PAD * dim..(PAD + 1) * dim].iter_mut() {
        *v = 0.0;
    }
    let non_special = vocab.size().saturating_sub(4).max(1);
    let coverage = matched.iter().skip(4).filter(|&&m| m).count() as f64 / non_special as f64;
    Ok((table, coverage))
}

/// Look up one row per id on the tape; differentiable into the table.
pub fn embed_rows(
    tape: &mut Tape,
    table: NodeId,
    ids: &[usize],
) -> Result<Vec<NodeId>, TensorError> {
    ids.iter().map(|&i| tape.row(table, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, RawTriple};
    use crate::tensor::finite_diff_check;
    use std::io::Write;

    fn vocab_abc() -> Vocabulary {
        build_vocab(
            &[RawTriple {
                query: "a".into(),
                document: "b".into(),
                summary: "c".into(),
            }],
            1,
        )
        .unwrap()
    }

    #[test]
    fn pretrained_rows_copied_and_coverage_counted() {
        let vocab = vocab_abc();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a 1.0 2.0").unwrap();
        let (table, coverage) = load_pretrained(f.path(), &vocab, 2, 0).unwrap();
        let id = vocab.id("a");
        assert_eq!(&table.data[id * 2..id * 2 + 2], &[1.0, 2.0]);
        assert!((coverage - 1.0 / 3.0).abs() < 1e-12);
        // PAD row is zero
        assert_eq!(&table.data[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn empty_pretrained_file_random_init_zero_coverage() {
        let vocab = vocab_abc();
        let f = tempfile::NamedTempFile::new().unwrap();
        let (table, coverage) = load_pretrained(f.path(), &vocab, 2, 0).unwrap();
        assert_eq!(coverage, 0.0);
        assert_eq!(table.shape, vec![vocab.size(), 2]);
        assert!(table.data[4 * 2..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let vocab = vocab_abc();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a 1.0 2.0 3.0").unwrap();
        let err = load_pretrained(f.path(), &vocab, 2, 0).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn embed_rows_basics() {
        let table = init_table(6, 3, 1);
        let mut tape = Tape::new();
        let tn = tape.leaf(table.clone());
        assert!(embed_rows(&mut tape, tn, &[]).unwrap().is_empty());
        let rows = embed_rows(&mut tape, tn, &[5, 5]).unwrap();
        assert_eq!(tape.value(rows[0]).data, tape.value(rows[1]).data);
        assert!(embed_rows(&mut tape, tn, &[6]).is_err());
    }

    #[test]
    fn embedding_gradient_concentrates_on_used_row() {
        let dim = 3;
        let n = 5;
        let table = init_table(n, dim, 2);
        let flat = table.data.clone();
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let tn = t.leaf(Tensor::matrix(n, dim, p.to_vec()));
            let r = t.row(tn, 2).unwrap();
            let s = t.sum(r);
            t.value(s).data[0]
        };
        let mut t = Tape::new();
        let tn = t.leaf(table);
        let r = t.row(tn, 2).unwrap();
        let loss = t.sum(r);
        t.backward(loss).unwrap();
        let analytic = t.grad(tn).to_vec();
        for (i, g) in analytic.iter().enumerate() {
            let on_row = i / dim == 2;
            assert_eq!(*g != 0.0, on_row);
        }
        let err = finite_diff_check(f, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
