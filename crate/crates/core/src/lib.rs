//! Domain adaptation between tablet and paper sensor-pen recordings for
//! word recognition.

pub mod cli;
pub mod ctc;
pub mod data;
pub mod dml;
pub mod engine;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod pairing;
pub mod report;
pub mod trainer;
