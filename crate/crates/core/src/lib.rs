//! Network-wide traffic volume inference from sparse monitors and trajectories.

pub mod embedding;
pub mod evaluation;
pub mod inference;
pub mod network;
pub mod pipeline;
pub mod rl;
pub mod scenario;
pub mod seeds;
pub mod sim;
pub mod st_graph;
pub mod trajectory;
