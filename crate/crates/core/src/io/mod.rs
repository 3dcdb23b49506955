//! On-disk formats: raw rasters, case containers, corpus generation,
//! checkpoints, and score tables.

pub mod checkpoint;
pub mod dataset;
pub mod maps;
pub mod raster;
pub mod table;
