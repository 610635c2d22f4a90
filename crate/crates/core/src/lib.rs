//! Pathology-report language modeling toolkit.
//!
//! The pipeline runs end to end on any corpus of semi-structured reports:
//!
//! 1. [`corpus`]: ingest reports, extract the DIAGNOSIS section, split it into
//!    diagnosis elements, normalize and de-identify, and build deterministic splits.
//! 2. [`wordpiece`]: train an uncased WordPiece vocabulary and tokenize against it.
//! 3. [`coverage`]: measure full-word vocabulary coverage of a corpus.
//! 4. [`encoder`]: a small BERT-style transformer encoder with hand-written
//!    reverse-mode gradients, masked-LM and multi-label classification heads.
//! 5. [`training`]: masked-LM corruption, pretraining, and fine-tuning with early stopping.
//! 6. [`evaluation`]: top-k masked prediction accuracy and classification metrics
//!    with bootstrap confidence intervals.
//!
//! [`synthcorpus`] generates templated corpora so every stage can be exercised
//! without access to institutional data.

pub mod cli;
pub mod corpus;
pub mod coverage;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod seed;
pub mod synthcorpus;
pub mod tensor;
pub mod training;
pub mod wordpiece;

pub use error::{Error, Result};
