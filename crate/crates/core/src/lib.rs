//! Reproducible evaluation engine for novel-view-synthesis methods.

pub mod camera;
pub mod canonical;
pub mod colmap;
pub mod conformance;
pub mod dataset;
pub mod evaluator;
pub mod image;
pub mod imageops;
pub mod lpips;
pub mod method;
pub mod metrics;
pub mod protocol;
pub mod rankings;
pub mod refsplat;
pub mod refsplat_server;
pub mod results;
pub mod rng;
pub mod rpc;
pub mod scene;
