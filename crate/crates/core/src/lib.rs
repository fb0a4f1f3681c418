pub mod admm;
pub mod commands;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod kernel;
pub mod model;
pub mod par;
pub mod polysem;
pub mod proxgrad;
pub mod solve;
pub mod synth;
