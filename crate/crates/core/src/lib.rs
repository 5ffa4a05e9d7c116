//! Gait selection and residual control for a wheeled-legged quadruped.

pub mod energy;
pub mod env;
pub mod eval;
pub mod gait;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod reference;
pub mod reward;
pub mod robot;
pub mod sim;
pub mod trainer;
