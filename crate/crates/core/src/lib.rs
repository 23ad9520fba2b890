//! Route-level traffic demand generation from noisy multimodal intersection
//! counts, with feedback-driven refinement.

pub mod counts;
pub mod emit;
pub mod flowcount;
pub mod qipsolve;
pub mod refine;
pub mod synth;
pub mod netgraph;
