//! Region-prediction key information extraction.
//!
//! Given an OCR-processed form document and a target field name, a
//! layout-aware transformer encoder feeds region proposal, categorization and
//! selection heads that localize a bounding-box-like region; the text inside
//! the region is the extracted field value. The crate also ships a synthetic
//! form generator, a training loop, a boundary-product baseline decoder and
//! an evaluation suite.
//!
//! All numeric model code is generic over the scalar type through
//! [`scalar::Scalar`]: `f32` is the training default and `f64` backs
//! gradient checks and numeric oracles. Concrete aliases live at the crate
//! root.

pub mod checkpoint;
pub mod document;
pub mod encoder;
pub mod geometry;
pub mod heads;
pub mod ingest;
pub mod input;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use document::{extract_region_text, serialize_tokens, Document, Token};
pub use geometry::{iou, normalize_bbox, token_in_region, BBox, CenterPoint};
pub use ingest::{parse_document, AnnotatedDocument, Annotation};
pub use input::{build_model_input, ModelInput, Vocab};
pub use metrics::{baseline_decode, evaluate_model, exact_match, numeracy_f1, EvalReport};
pub use model::{predict, ModelConfig, Prediction, RduModel};
pub use scalar::Scalar;
pub use synth::{generate_synthetic_corpus, SynthConfig, SynthCorpus};
pub use tensor::Tensor;
pub use training::{train, TrainConfig, TrainOutput};

/// `f32` tensors: the training default.
pub type TensorF32 = Tensor<f32>;
/// `f64` tensors: used by gradient checks and numeric oracles.
pub type TensorF64 = Tensor<f64>;
/// The model in training precision.
pub type ModelF32 = RduModel<f32>;
/// The model in verification precision.
pub type ModelF64 = RduModel<f64>;
