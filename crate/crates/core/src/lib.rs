//! Decentralized stream-stage forecasting.
//!
//! A forecast for sensor `S` at time `t` is built only from data that can
//! physically reach `S`: the stage history of its nearest upstream sensors,
//! shifted by the water travel time between them, its own recent history, and
//! rainfall over the part of its watershed not already covered by those
//! upstream gauges. The target is the next 24 hourly stage values.
//!
//! Modules, in pipeline order:
//!
//! - [`sensor_network`]: the sensor DAG, time distances and parcel buckets.
//! - [`ingestion`]: stage and precipitation file formats and lookups.
//! - [`dataset`]: input/output vector compilation, dataset files and splits.
//! - [`neural`]: tensors, layers, the GRU cell, MSE, Adam, gradient checking.
//! - [`models`]: the dense baseline and the GRU-based composite forecaster.
//! - [`training`]: mini-batch training, evaluation, baselines, trace export.
//! - [`synthetic`]: seeded synthetic worlds with an exact generative oracle.

pub mod dataset;
pub mod ingestion;
pub mod models;
pub mod neural;
pub mod sensor_network;
pub mod synthetic;
pub mod training;

pub use dataset::{Dataset, DatasetEntry, DatasetVariant};
pub use ingestion::{PrecipFieldSeries, StageSeries};
pub use models::{Checkpoint, ModelConfig, Network};
pub use training::{TrainConfig, TrainReport};
pub use sensor_network::{ParcelRef, SensorGraph, SensorId};

