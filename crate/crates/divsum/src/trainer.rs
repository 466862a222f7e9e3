//! Adam optimization, the per-fold training loop with validation-based
//! model selection, and cross-validation orchestration. Fully
//! deterministic under a fixed seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Triple, Vocabulary, PAD};
use crate::diversity::{DiversityMode, DiversitySwitches};
use crate::metrics::{self, MetricsReport};
use crate::model::{Model, ModelConfig, QueryMode};
use crate::params::ParamSet;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty {which} split")]
    EmptySplit { which: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Adam with bias correction. Moment slots mirror the parameter set in
/// insertion order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Non-finite-gradient incidents (updates skipped).
    pub skipped: usize,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
            skipped: 0,
        }
    }

    /// One bias-corrected update. A non-finite gradient anywhere skips
    /// the whole update and counts an incident. Returns whether the
    /// update was applied.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> bool {
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, (_, t)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, g) in grads[slot].iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        true
    }
}

/// Scale gradients so the global norm is at most `max_norm`; direction
/// is never changed.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: DiversityMode,
    pub query_mode: QueryMode,
    pub embed_dim: usize,
    /// Decoder hidden size l1.
    pub dec_hidden: usize,
    /// Query encoder hidden size l2.
    pub query_hidden: usize,
    /// Document encoder hidden size l4 (= l5).
    pub doc_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub max_decode_len: usize,
    pub embed_trainable: bool,
    #[serde(default)]
    pub switches: DiversitySwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: DiversityMode::Sd2,
            query_mode: QueryMode::Attention,
            embed_dim: 100,
            dec_hidden: 200,
            query_hidden: 200,
            doc_hidden: 200,
            batch_size: 32,
            epochs: 50,
            patience: 5,
            lr: 0.0004,
            clip_norm: 5.0,
            seed: 0,
            max_decode_len: 30,
            embed_trainable: true,
        switches: DiversitySwitches::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            dec_hidden: self.dec_hidden,
            query_hidden: self.query_hidden,
            doc_hidden: self.doc_hidden,
            mode: self.mode,
            query_mode: self.query_mode,
            switches: self.switches,
            embed_trainable: self.embed_trainable,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rouge_l: f64,
}

pub struct TrainOutcome {
    /// Model at the best validation epoch.
    pub model: Model,
    pub best_val_rouge_l: f64,
    pub curves: Vec<EpochStats>,
}

/// Train on `train`, select on `validation` ROUGE-L, stop early after
/// `patience` consecutive non-improving epochs (patience 0 trains for
/// exactly one epoch).
pub fn train_fold(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train: &[Triple],
    validation: &[Triple],
    pretrained_embeddings: Option<&crate::tensor::Tensor>,
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit { which: "validation" });
    }
    let mut model = Model::new(config.model_config(vocab.size()), config.seed);
    if let Some(e) = pretrained_embeddings {
        *model.params.get_mut("embed") = e.clone();
    }
    let mut adam = AdamState::new(&model.params, config.lr);
    let mut curves = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut without_improve = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut token_count = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> = model
                .params
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            for &i in batch {
                let t = &train[i];
                let (loss, grads) = model.loss_and_grads(t)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += loss * t.summary_ids.len() as f64;
                token_count += t.summary_ids.len();
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for a in acc.iter_mut().flatten() {
                *a *= scale;
            }
            mask_embedding_grads(&model, &mut acc, config.embed_trainable);
            clip_global_norm(&mut acc, config.clip_norm);
            adam.update(&mut model.params, &acc);
        }
        let train_loss = epoch_loss / token_count.max(1) as f64;
        let val = validation_rouge_l(&model, vocab, validation, config.max_decode_len)?;
        curves.push(EpochStats {
            epoch,
            train_loss,
            val_rouge_l: val,
        });
        if val > best_val {
            best_val = val;
            best_params = model.params.clone();
            without_improve = 0;
        } else {
            without_improve += 1;
        }
        if without_improve >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: Model {
            config: model.config,
            params: best_params,
        },
        best_val_rouge_l: best_val,
        curves,
    })
}

/// PAD row never updates; a frozen table never updates at all.
fn mask_embedding_grads(model: &Model, grads: &mut [Vec<f64>], trainable: bool) {
    let slot = model
        .params
        .names()
        .iter()
        .position(|n| n == "embed")
        .expect("embed parameter");
    if trainable {
        let d = model.config.embed_dim;
        for g in grads[slot][PAD * d..(PAD + 1) * d].iter_mut() {
            *g = 0.0;
        }
    } else {
        for g in grads[slot].iter_mut() {
            *g = 0.0;
        }
    }
}

fn validation_rouge_l(
    model: &Model,
    vocab: &Vocabulary,
    validation: &[Triple],
    max_len: usize,
) -> Result<f64, TensorError> {
    let refs: Vec<(usize, &Triple)> = validation.iter().enumerate().collect();
    let report = metrics::evaluate(model, vocab, &refs, max_len)?;
    Ok(report.rouge_l)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValReport {
    pub per_fold: Vec<FoldResult>,
    pub mean_rouge1: f64,
    pub mean_rouge2: f64,
    pub mean_rouge_l: f64,
    pub mean_repetitions: f64,
    pub incomplete: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub repetition_count: usize,
}

/// Train and evaluate every fold independently; folds are seeded by
/// (config seed, fold index) so execution order cannot matter.
pub fn cross_validate(
    config: &TrainConfig,
    vocab: &Vocabulary,
    triples: &[Triple],
    plan: &crate::corpus::FoldPlan,
) -> Result<CrossValReport, TrainError> {
    let mut per_fold = Vec::new();
    let mut incomplete = false;
    for (fold_idx, fold) in plan.folds.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(fold_idx as u64);
        let pick = |ids: &[usize]| -> Vec<Triple> {
            ids.iter().map(|&i| triples[i].clone()).collect()
        };
        let train = pick(&fold.train);
        let validation = pick(&fold.validation);
        let test = pick(&fold.test);
        match train_fold(&cfg, vocab, &train, &validation, None) {
            Ok(outcome) => {
                let refs: Vec<(usize, &Triple)> = test.iter().enumerate().collect();
                let report: MetricsReport =
                    metrics::evaluate(&outcome.model, vocab, &refs, config.max_decode_len)?;
                per_fold.push(FoldResult {
                    fold: fold_idx,
                    rouge1: report.rouge1,
                    rouge2: report.rouge2,
                    rouge_l: report.rouge_l,
                    repetition_count: report.repetition_count,
                });
            }
            Err(TrainError::Diverged { .. }) => {
                incomplete = true;
            }
            Err(e) => return Err(e),
        }
    }
    let n = per_fold.len().max(1) as f64;
    Ok(CrossValReport {
        mean_rouge1: per_fold.iter().map(|f| f.rouge1).sum::<f64>() / n,
        mean_rouge2: per_fold.iter().map(|f| f.rouge2).sum::<f64>() / n,
        mean_rouge_l: per_fold.iter().map(|f| f.rouge_l).sum::<f64>() / n,
        mean_repetitions: per_fold.iter().map(|f| f.repetition_count as f64).sum::<f64>() / n,
        per_fold,
        incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_triple, make_folds, Limits, RawTriple};
    use crate::tensor::Tensor;

    fn toy_corpus(n: usize) -> (Vec<RawTriple>, Vocabulary, Vec<Triple>) {
        let subjects = ["cats", "dogs", "birds", "fish", "cows", "sheep"];
        let verbs = ["like", "hate", "chase", "watch"];
        let objects = ["mice", "cars", "rain", "snow", "sun"];
        let mut raws = Vec::new();
        for i in 0..n {
            let s = subjects[i % subjects.len()];
            let v = verbs[i % verbs.len()];
            let o = objects[i % objects.len()];
            raws.push(RawTriple {
                query: format!("what do {s} {v}"),
                document: format!("many people say {s} really {v} {o} every day"),
                summary: format!("{s} {v} {o}"),
            });
        }
        let vocab = build_vocab(&raws, 1).unwrap();
        let limits = Limits::default();
        let triples = raws
            .iter()
            .map(|r| encode_triple(r, &vocab, &limits).unwrap())
            .collect();
        (raws, vocab, triples)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            embed_dim: 12,
            dec_hidden: 12,
            query_hidden: 12,
            doc_hidden: 12,
            batch_size: 4,
            epochs: 3,
            patience: 5,
            lr: 0.01,
            seed: 1,
            max_decode_len: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_magnitude_and_zero_grad() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = AdamState::new(&params, 0.0004);
        // zero gradient leaves parameters unchanged
        adam.update(&mut params, &[vec![0.0, 0.0]]);
        assert_eq!(params.get("w").data, vec![1.0, -2.0]);

        // first step with gradient g: m_hat = g, v_hat = g^2,
        // delta ~ lr * sign(g) up to eps
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, 1.0]));
        let mut adam = AdamState::new(&params, 0.0004);
        adam.update(&mut params, &[vec![0.5, -0.5]]);
        let w = &params.get("w").data;
        assert!((w[0] - (1.0 - 0.0004)).abs() < 1e-7, "{}", w[0]);
        assert!((w[1] - (1.0 + 0.0004)).abs() < 1e-7, "{}", w[1]);
    }

    #[test]
    fn adam_identical_gradients_update_identically() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::vector(vec![0.3]));
        params.insert("b", Tensor::vector(vec![0.3]));
        let mut adam = AdamState::new(&params, 0.01);
        for _ in 0..5 {
            adam.update(&mut params, &[vec![0.7], vec![0.7]]);
        }
        assert_eq!(params.get("a").data, params.get("b").data);
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0]));
        let mut adam = AdamState::new(&params, 0.01);
        let applied = adam.update(&mut params, &[vec![f64::NAN]]);
        assert!(!applied);
        assert_eq!(adam.skipped, 1);
        assert_eq!(params.get("w").data, vec![1.0]);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut grads = vec![vec![3.0, 4.0]]; // norm 5
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
        assert!((grads[0][1] - 0.8).abs() < 1e-12);
        // under the cap nothing changes
        let mut grads = vec![vec![0.3, 0.4]];
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads[0], vec![0.3, 0.4]);
    }

    #[test]
    fn pad_row_never_changes_and_frozen_table_is_bit_identical() {
        let (_, vocab, triples) = toy_corpus(6);
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        let outcome = train_fold(&cfg, &vocab, &triples[..4], &triples[4..], None).unwrap();
        let d = cfg.embed_dim;
        let pad_row = &outcome.model.params.get("embed").data[PAD * d..(PAD + 1) * d];
        assert!(pad_row.iter().all(|&v| v == 0.0));

        cfg.embed_trainable = false;
        let before = Model::new(cfg.model_config(vocab.size()), cfg.seed)
            .params
            .get("embed")
            .data
            .clone();
        let outcome = train_fold(&cfg, &vocab, &triples[..4], &triples[4..], None).unwrap();
        assert_eq!(outcome.model.params.get("embed").data, before);
    }

    #[test]
    fn patience_zero_trains_exactly_one_epoch() {
        let (_, vocab, triples) = toy_corpus(6);
        let mut cfg = tiny_config();
        cfg.patience = 0;
        cfg.epochs = 50;
        let outcome = train_fold(&cfg, &vocab, &triples[..4], &triples[4..], None).unwrap();
        assert_eq!(outcome.curves.len(), 1);
    }

    #[test]
    fn same_seed_identical_curves() {
        let (_, vocab, triples) = toy_corpus(8);
        let cfg = tiny_config();
        let a = train_fold(&cfg, &vocab, &triples[..6], &triples[6..], None).unwrap();
        let b = train_fold(&cfg, &vocab, &triples[..6], &triples[6..], None).unwrap();
        for (x, y) in a.curves.iter().zip(&b.curves) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.val_rouge_l, y.val_rouge_l);
        }
        for ((_, t1), (_, t2)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(t1.data, t2.data);
        }
    }

    #[test]
    fn overfits_a_handful_of_triples() {
        let (_, vocab, triples) = toy_corpus(4);
        let mut cfg = tiny_config();
        cfg.mode = DiversityMode::None;
        cfg.epochs = 120;
        cfg.patience = 120;
        cfg.lr = 0.02;
        cfg.batch_size = 4;
        let outcome = train_fold(&cfg, &vocab, &triples, &triples, None).unwrap();
        let last = outcome.curves.last().unwrap();
        assert!(
            last.train_loss < 0.1,
            "loss stayed at {}",
            last.train_loss
        );
    }

    #[test]
    fn cross_validate_two_folds_mean_is_arithmetic_mean() {
        let (_, vocab, triples) = toy_corpus(10);
        let plan = make_folds(triples.len(), 3, 3).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        let report = cross_validate(&cfg, &vocab, &triples, &plan).unwrap();
        assert_eq!(report.per_fold.len(), 3);
        let mean = report.per_fold.iter().map(|f| f.rouge_l).sum::<f64>() / 3.0;
        assert!((report.mean_rouge_l - mean).abs() < 1e-15);
        assert!(!report.incomplete);
    }
}
