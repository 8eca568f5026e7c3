//! Conversation language models conditioned on speaker role and on the
//! topic of the preceding turns.

pub mod corpus;
pub mod lda;
pub mod model;
pub mod numerics;
pub mod evaluation;
pub mod training;
pub mod generation;
