//! Intent-driven, pull-based control plane for overlay end-nodes, together
//! with the discrete-event simulator used to measure it.

pub mod intent;
pub mod model;
pub mod nib;
pub mod simnet;
pub mod southbound;
pub mod agent;
pub mod controller;
pub mod world;
pub mod experiments;
