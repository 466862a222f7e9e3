//! Query-based abstractive summarization with diversity-aware decoding:
//! a self-contained encode-attend-decode stack (GRU encoders, soft
//! attention over query and document, GRU decoder) with a family of
//! diversity mechanisms applied to the document context vector, trained
//! by reverse-mode automatic differentiation on a scalar tape.

pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod diversity;
pub mod embeddings;
pub mod encoders;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod cli;
