//! Knob auto-tuning: hint extraction, a simulated and an external-command
//! environment, and a DDPG agent trained from hint-driven demonstrations.

pub mod agent;
pub mod catalog;
pub mod env;
pub mod extract;
pub mod hints;
pub mod nn;
pub mod replay;
pub mod trainer;
pub mod tuning;
