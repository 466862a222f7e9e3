//! Full-length ROUGE-1/2/L and the repeated-word sentence counter.
//! Scores are computed on the artifact's own lowercased tokenization,
//! no stemming, F1 reported.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Triple, Vocabulary, EOS};
use crate::model::Model;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

/// Clipped n-gram overlap ROUGE-N.
pub fn rouge_n<T: Eq + std::hash::Hash + Clone>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> RougeScore {
    assert!(n >= 1, "rouge_n: n must be >= 1");
    if candidate.len() < n || reference.len() < n {
        return RougeScore::ZERO;
    }
    let count = |seq: &[T]| -> HashMap<Vec<T>, usize> {
        let mut m = HashMap::new();
        for w in seq.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
        m
    };
    let cand = count(candidate);
    let refc = count(reference);
    let overlap: usize = cand
        .iter()
        .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    let cand_total = candidate.len() - n + 1;
    let ref_total = reference.len() - n + 1;
    RougeScore::from_pr(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

/// Longest common subsequence length (bottom-up DP).
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    RougeScore::from_pr(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

/// Count summaries containing a repeated token. With
/// `exclude_stopwords` a small function-word list is ignored first.
pub fn count_repetitions<S: AsRef<str>>(
    summaries: &[Vec<S>],
    exclude_stopwords: bool,
) -> usize {
    summaries
        .iter()
        .filter(|tokens| has_repetition(tokens, exclude_stopwords))
        .count()
}

const STOPWORDS: [&str; 24] = [
    "a", "an", "the", "is", "are", "was", "were", "be", "to", "of", "in", "on", "and", "or",
    "that", "this", "it", "as", "at", "by", "for", "with", "not", "than",
];

pub fn has_repetition<S: AsRef<str>>(tokens: &[S], exclude_stopwords: bool) -> bool {
    let mut seen = HashMap::new();
    for t in tokens {
        let t = t.as_ref();
        if exclude_stopwords && STOPWORDS.contains(&t) {
            continue;
        }
        let c = seen.entry(t).or_insert(0usize);
        *c += 1;
        if *c >= 2 {
            return true;
        }
    }
    false
}

/// Per-instance evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub repeated: bool,
    pub prediction: String,
}

/// Aggregate evaluation over one test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub repetition_count: usize,
    pub instances: Vec<InstanceScore>,
}

/// Greedy-decode every triple and average ROUGE F1 over instances.
/// EOS is stripped from both sides before scoring.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    triples: &[(usize, &Triple)],
    max_len: usize,
) -> Result<MetricsReport, TensorError> {
    if model.config.vocab_size != vocab.size() {
        return Err(TensorError::ShapeMismatch {
            op: "evaluate: vocabulary",
            lhs: vec![model.config.vocab_size],
            rhs: vec![vocab.size()],
        });
    }
    let instances: Result<Vec<InstanceScore>, TensorError> = triples
        .par_iter()
        .map(|(id, t)| {
            let trace = model.greedy_decode(&t.query_ids, &t.doc_ids, max_len)?;
            let pred = strip_eos(&trace.token_ids);
            let gold = strip_eos(&t.summary_ids);
            let r1 = rouge_n(&pred, &gold, 1);
            let r2 = rouge_n(&pred, &gold, 2);
            let rl = rouge_l(&pred, &gold);
            let tokens = vocab.decode(&pred);
            Ok(InstanceScore {
                id: *id,
                rouge1: r1.f1,
                rouge2: r2.f1,
                rouge_l: rl.f1,
                repeated: has_repetition(&tokens, false),
                prediction: tokens.join(" "),
            })
        })
        .collect();
    let instances = instances?;
    let n = instances.len().max(1) as f64;
    Ok(MetricsReport {
        rouge1: instances.iter().map(|i| i.rouge1).sum::<f64>() / n,
        rouge2: instances.iter().map(|i| i.rouge2).sum::<f64>() / n,
        rouge_l: instances.iter().map(|i| i.rouge_l).sum::<f64>() / n,
        repetition_count: instances.iter().filter(|i| i.repeated).count(),
        instances,
    })
}

fn strip_eos(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| i != EOS).collect()
}

/// CSV dump: `id,rouge1,rouge2,rougeL,repeated_flag,prediction`.
pub fn write_instance_csv<W: std::io::Write>(
    w: &mut W,
    report: &MetricsReport,
) -> std::io::Result<()> {
    writeln!(w, "id,rouge1,rouge2,rougeL,repeated_flag,prediction")?;
    for i in &report.instances {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{},{}",
            i.id,
            i.rouge1,
            i.rouge2,
            i.rouge_l,
            i.repeated as u8,
            i.prediction.replace(',', " ")
        )?;
    }
    Ok(())
}
