pub mod cli;
pub mod conditionals;
pub mod distributions;
pub mod error;
pub mod evaluate;
pub mod gibbs;
pub mod ingest;
pub mod matrix;
pub mod rng;
