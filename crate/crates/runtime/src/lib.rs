//! Command-line entry points and the live teleoperation service.

pub mod cli;
pub mod protocol;
pub mod teleop;
