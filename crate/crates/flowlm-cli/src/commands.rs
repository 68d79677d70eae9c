pub mod discretizer;
pub mod evaluate;
pub mod ingest;
pub mod report;
pub mod splits;
pub mod synth;
pub mod train;
