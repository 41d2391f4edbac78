pub mod checkpoint;
pub mod config;
pub mod contraction;
pub mod data;
pub mod error;
pub mod head;
pub mod loss;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod sampler;
pub mod schedule;
pub mod theorem;
pub mod tokenizer;
