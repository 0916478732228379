pub mod checker;
pub mod cli;
pub mod formula;
pub mod ingest;
pub mod model;
pub mod mtl;
pub mod property;
pub mod runtime;
pub mod simgen;
