pub mod annotations;
pub mod dataset;
pub mod lexical;
pub mod stats;
pub mod bridge;
pub mod scoring;
pub mod system_eval;
pub mod conformal;
pub mod cli;
