//! Weakly supervised 3D gaze estimation on images and video clips.
//!
//! The pipeline trains a windowed spatiotemporal attention network on 3D-labeled
//! gaze data, infers on 2D-labeled gaze-following data, rotates each predicted
//! gaze about the z-axis so its image-plane projection matches the 2D annotation,
//! and retrains on the union. Everything runs on the CPU in f64 with analytic
//! gradients and bitwise-reproducible results for a fixed seed.

pub mod checkpoint;
pub mod eval;
pub mod geometry;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod patchify;
pub mod ppm;
pub mod preprocess;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod train;
pub mod windows;
