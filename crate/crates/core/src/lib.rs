pub mod rng;
pub mod corpus;
pub mod git_miner;
pub mod tokenizer;
pub mod autodiff;
pub mod model;
pub mod metrics;
pub mod cli;
