pub mod geo;
pub mod rpc;
pub mod raster;
pub mod features;
pub mod cost_volume;
pub mod cscm;
pub mod losses;
pub mod aggregation;
pub mod metrics;
pub mod gaussians;
pub mod synthetic;
pub mod pipeline;
