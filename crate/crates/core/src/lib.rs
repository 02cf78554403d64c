//! Automatic curriculum learning for reinforcement-learning driving agents.

pub mod cli;
pub mod curriculum;
pub mod eval;
pub mod frenet;
pub mod geometry;
pub mod layouts;
pub mod learning_potential;
pub mod nn;
pub mod orchestrator;
pub mod scenario;
pub mod sim;
pub mod student;
pub mod teacher;
