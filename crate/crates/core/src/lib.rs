pub mod arch;
pub mod engine;
pub mod mim;
pub mod neuron;
pub mod numerics;
pub mod profiler;
