pub mod legacy;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod prompt;
pub mod rng;
pub mod schema;
pub mod serving;
pub mod training;
