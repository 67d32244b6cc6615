pub mod numerics;
pub mod objective;
pub mod ocsolver;
pub mod baselines;
pub mod harness;
