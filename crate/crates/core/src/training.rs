//! Multi-task loss weighting, Adam optimization and the training loop.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::heads::RegionLabel;
use crate::ingest::AnnotatedDocument;
use crate::input::{ModelInput, Vocab};
use crate::metrics::evaluate_model;
use crate::model::{
    build_targets, training_forward, ExampleTargets, LossBreakdown, LossWeights, ModelConfig,
    ModelError, RduModel,
};
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Dynamic class weights for the categorization loss: each label is weighted
/// by the share of the opposite label among the counted (positive/negative)
/// proposals. Ignored labels take no part.
pub fn dynamic_class_weights(labels: &[RegionLabel]) -> (f64, f64) {
    let n_pos = labels.iter().filter(|&&l| l == RegionLabel::Positive).count();
    let n_neg = labels.iter().filter(|&&l| l == RegionLabel::Negative).count();
    let total = n_pos + n_neg;
    if total == 0 {
        return (0.0, 0.0);
    }
    (
        n_neg as f64 / total as f64,
        n_pos as f64 / total as f64,
    )
}

/// Full training configuration; the on-disk form is TOML with exactly these
/// keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
    /// Global gradient norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub gradient_clip_norm: f64,
    #[serde(default = "default_rep_hidden")]
    pub rep_hidden: usize,
    #[serde(default)]
    pub per_layer_proposal_weights: bool,
    #[serde(default = "default_vocab_max")]
    pub vocab_max_size: usize,
    /// Stop once train EM (percent) reaches this value.
    #[serde(default)]
    pub early_stop_train_em: Option<f64>,
}

fn default_k() -> usize {
    3
}
fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.01
}
fn default_delta() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    3e-5
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    30
}
fn default_seed() -> u64 {
    42
}
fn default_clip() -> f64 {
    1.0
}
fn default_rep_hidden() -> usize {
    64
}
fn default_vocab_max() -> usize {
    20_000
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training corpus has no usable examples")]
    NoTrainingData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (doc {doc_id}): {source}")]
    Divergence {
        epoch: usize,
        batch: usize,
        doc_id: String,
        source: ModelError,
    },
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::BadConfig(m));
        if self.alpha < 0.0 || self.beta < 0.0 || self.delta < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.learning_rate <= 0.0 {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.gradient_clip_norm < 0.0 {
            return fail("gradient_clip_norm must be non-negative".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            k: self.k,
            rep_hidden: self.rep_hidden,
            per_layer_proposal_weights: self.per_layer_proposal_weights,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<TrainConfig, toml::de::Error> {
        toml::from_str(s)
    }
}

/// Adam optimizer with dense first/second moment estimates.
pub struct Adam<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor<S>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update step; absent gradient slots count as zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Grads<S>) {
        self.t += 1;
        let b1 = S::from_f64_lossy(self.beta1);
        let b2 = S::from_f64_lossy(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64_lossy(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64_lossy(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64_lossy(self.learning_rate);
        let eps = S::from_f64_lossy(self.eps);

        for (id, grad) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            match grad {
                Some(g) => {
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        let mi = b1 * m.data()[i] + (one - b1) * gi;
                        let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        let m_hat = mi / bc1;
                        let v_hat = vi / bc2;
                        p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..p.len() {
                        let mi = b1 * m.data()[i];
                        let vi = b2 * v.data()[i];
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        let m_hat = mi / bc1;
                        let v_hat = vi / bc2;
                        p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One line of the metrics history (`train` rows carry losses, `dev` rows
/// carry scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub loss: Option<LossBreakdown>,
}

/// Result of a training run: the best-dev model plus the metric history.
pub struct TrainOutput<S> {
    pub model: RduModel<S>,
    pub history: Vec<EpochRecord>,
    /// Epoch whose dev score the returned model carries (0 = initial).
    pub best_epoch: usize,
}

struct PreparedExample {
    doc_idx: usize,
    field_name: String,
    input: ModelInput,
    targets: ExampleTargets,
}

/// Trains a fresh model on `train_docs`, evaluating on `dev_docs` once per
/// epoch and retaining the checkpoint with the best dev F1 (EM as tiebreak).
/// Deterministic for a fixed config: batches are formed in a seeded order
/// and per-example gradients are reduced in batch order.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    train_docs: &[AnnotatedDocument],
    dev_docs: &[AnnotatedDocument],
) -> Result<TrainOutput<S>, TrainError> {
    cfg.validate()?;

    let vocab = Vocab::build(
        train_docs
            .iter()
            .flat_map(|d| {
                d.document
                    .tokens
                    .iter()
                    .map(|t| t.text.as_str())
                    .chain(d.annotations.iter().flat_map(|a| a.field_name.split_whitespace()))
            }),
        cfg.vocab_max_size,
    );
    let mut model: RduModel<S> =
        RduModel::new(cfg.model_config(), vocab, cfg.rng_seed).map_err(TrainError::Model)?;

    // Inputs and targets are static per example; build them once.
    let mut examples: Vec<PreparedExample> = Vec::new();
    for (doc_idx, doc) in train_docs.iter().enumerate() {
        for ann in &doc.annotations {
            let input = model
                .build_input(&ann.field_name, &doc.document)
                .map_err(|e| TrainError::Model(ModelError::Input(e)))?;
            let targets = build_targets(&doc.document, ann, &input);
            examples.push(PreparedExample {
                doc_idx,
                field_name: ann.field_name.clone(),
                input,
                targets,
            });
        }
    }
    if examples.is_empty() {
        return Err(TrainError::NoTrainingData);
    }

    let weights = cfg.loss_weights();
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamStore<S>)> = None;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut rng);

        let mut epoch_loss = LossBreakdown::default();
        let mut n_seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(Grads<S>, LossBreakdown), (usize, ModelError)>> = chunk
                .par_iter()
                .map(|&ex_idx| {
                    let ex = &examples[ex_idx];
                    let mut tape = Tape::new(&model.store);
                    let fwd =
                        training_forward(&model, &mut tape, &ex.input, &ex.targets, &weights)
                            .map_err(|e| (ex.doc_idx, e))?;
                    let grads = tape.backward(fwd.total);
                    Ok((grads, fwd.breakdown))
                })
                .collect();

            let mut batch_grads = Grads::zeros_like(&model.store);
            let scale = S::from_f64_lossy(1.0 / chunk.len() as f64);
            let mut batch_loss = LossBreakdown::default();
            for r in results {
                match r {
                    Ok((g, b)) => {
                        batch_grads.add_scaled(&g, scale);
                        batch_loss.add(&b);
                    }
                    Err((doc_idx, e)) => {
                        return Err(TrainError::Divergence {
                            epoch,
                            batch: batch_idx,
                            doc_id: train_docs[doc_idx].document.id.clone(),
                            source: e,
                        })
                    }
                }
            }
            epoch_loss.add(&batch_loss);
            n_seen += chunk.len();

            if cfg.gradient_clip_norm > 0.0 {
                let norm = batch_grads.global_norm();
                if norm > cfg.gradient_clip_norm {
                    batch_grads.scale(S::from_f64_lossy(cfg.gradient_clip_norm / norm));
                }
            }
            adam.step(&mut model.store, &batch_grads);
        }

        epoch_loss.scale(1.0 / n_seen as f64);
        history.push(EpochRecord {
            epoch,
            split: "train".into(),
            em: None,
            f1: None,
            loss: Some(epoch_loss),
        });

        if !dev_docs.is_empty() {
            let report = evaluate_model(&model, dev_docs);
            history.push(EpochRecord {
                epoch,
                split: "dev".into(),
                em: Some(report.micro_em),
                f1: Some(report.micro_f1),
                loss: None,
            });
            let better = match &best {
                None => true,
                Some((f1, em, _, _)) => {
                    report.micro_f1 > *f1 || (report.micro_f1 == *f1 && report.micro_em > *em)
                }
            };
            if better {
                best = Some((report.micro_f1, report.micro_em, epoch, model.store.clone()));
            }
        }

        if let Some(target) = cfg.early_stop_train_em {
            let report = evaluate_model(&model, train_docs);
            history.push(EpochRecord {
                epoch,
                split: "train-eval".into(),
                em: Some(report.micro_em),
                f1: Some(report.micro_f1),
                loss: None,
            });
            if report.micro_em >= target {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, _, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => cfg.max_epochs,
    };

    Ok(TrainOutput {
        model,
        history,
        best_epoch,
    })
}
