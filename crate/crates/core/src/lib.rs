//! Temporal question answering over multimodal sensor timelines.
//!
//! Windows of sensor features are embedded into a space shared with
//! activity/context phrases; questions are decomposed into small query
//! programs executed against the stored embeddings, and the results are
//! rendered into an answer.

pub mod assemble;
pub mod calendar;
pub mod decompose;
pub mod encoders;
pub mod eval;
pub mod gateway;
pub mod ingest;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod query;
pub mod store;
pub mod synth;
