pub mod artifacts;
pub mod evaluate;
pub mod matrix;
pub mod merge;
pub mod synth;
pub mod train;
