pub mod calibrate;
pub mod geometry;
pub mod metrics;
pub mod offline_init;
pub mod pipeline;
pub mod scene_map;
pub mod simulator;
pub mod tracker;
pub mod worldproj;
