//! Cross-lingual transfer of pre-trained contextualized language models at
//! desk scale: subword vocabularies, skipgram embeddings, adversarial
//! embedding alignment, IBM-1 word alignment, a transformer with a pivot
//! layer trained on MLM/TLM/CdLM objectives, and the three-phase transfer
//! procedure with its evaluation.

pub mod cli;
pub mod datakit;
pub mod embalign;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod pipeline;
pub mod staticembed;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod wordalign;

pub use error::{Error, Result};
