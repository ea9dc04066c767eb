//! Vehicle entrance and parking management.
//!
//! The crate is organised around the gate pipeline and the tooling that
//! supports it:
//!
//! - [`imaging`]: raster type, PGM/PPM codec and the classical filters.
//! - [`dataset`]: YOLO label parsing, validation, splits and statistics.
//! - [`metrics`]: IOU, greedy matching, all-point AP and mAP@50 reports.
//! - [`loss`]: the composite detection loss, its analytic gradient and a
//!   toy SGD trainer over a linear per-cell predictor.
//! - [`backend`]: the line protocol to inference engines and deterministic
//!   reference backends.
//! - [`plate`]: crop, normalize, parse and registry matching of plates.
//! - [`face`]: embedding comparison, verification and gallery search.
//! - [`occupancy`]: slot maps, per-frame occupancy and synthetic lots.
//! - [`barrier`]: the barrier line protocol, simulator and client.
//! - [`store`]: the journaled document store.
//! - [`gate`]: the per-lane session state machine tying it all together.
//! - [`config`]: flat `key=value` application configuration.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and a sequential fallback otherwise.

pub mod backend;
pub mod barrier;
pub mod clock;
pub mod config;
pub mod dataset;
pub mod face;
pub mod gate;
pub mod imaging;
pub mod loss;
pub mod metrics;
pub mod occupancy;
pub mod par;
pub mod plate;
pub mod store;
