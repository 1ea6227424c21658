//! Distributed multi-robot SLAM from inter-robot UWB ranging and odometry.
//!
//! The pipeline per robot pair is: windowed relative-pose estimation
//! ([`estimation`]), pairwise-consistency outlier rejection ([`pcm`]) and
//! distributed pose-graph optimization ([`dpgo`]). [`sim`] drives a team of
//! [`node::RobotNode`]s over a simulated [`network`].

pub mod config;
pub mod dpgo;
pub mod estimation;
pub mod experiments;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod node;
pub mod pcm;
pub mod scenario;
pub mod sim;
pub mod trajectory;
