//! Function-word de-attention (FDA) for vision-language fusion attention.
//!
//! The crate bundles a small reverse-mode tensor engine, a toy
//! vision-language model whose fusion encoder can subtract function-word
//! cross-attention from selected heads, ℓ∞ image attacks (PGD, APGD and
//! masked APGD), a synthetic shape-world corpus, and the retrieval
//! evaluation harness that measures attack success rates.

pub mod attacks;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fda;
pub mod tensor;
pub mod vlm;
pub mod textproc;

pub use error::{Error, Result};
pub use fda::{EncoderSite, GateMode, MinMode, PlacementSpec};
pub use tensor::{Tape, Tensor, Var};
pub use vlm::{Direction, Model, ModelConfig, TextFeatures};
pub use attacks::{AttackConfig, AttackFamily, AttackMode, AttackResult};
pub use eval::MetricRecord;
pub use corpus::CorpusItem;
pub use textproc::{FunctionWordDictionary, TokenMask, TokenSequence, WordClass};
