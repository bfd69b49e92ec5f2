//! Cross-lingual fine-tuning workbench: a small differentiable encoder,
//! a unigram subword tokenizer, four data-augmentation strategies, example and
//! model consistency regularizers, and the two-stage trainer that combines
//! them.

pub mod augment;
pub mod autodiff;
pub mod consistency;
pub mod data;
pub mod eval;
pub mod model;
pub mod presets;
pub mod tokenizer;
pub mod trainer;
