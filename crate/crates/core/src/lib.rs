//! Text-only answerability auditing for visual question-answering data.

pub mod analytics;
pub mod backends;
pub mod cli;
pub mod corpus;
pub mod curation;
pub mod extraction;
pub mod grpomath;
pub mod prompting;
pub mod protocols;
