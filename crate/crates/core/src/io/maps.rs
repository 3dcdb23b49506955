//! Per-case uncertainty map persistence: `au.f32` and `eu.f32` rasters with
//! a sidecar manifest recording how the ensemble was drawn.

use crate::error::{Error, Result};
use crate::io::raster;
use crate::scalar::Scalar;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapsManifest {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub ratio: f64,
    pub seed: u64,
    /// Masking passes the sampler needed to cover every patch K times.
    pub passes: usize,
}

pub fn save_maps<T: Scalar>(
    dir: &Path,
    au: &Array2<T>,
    eu: &Array2<T>,
    manifest: &MapsManifest,
) -> Result<()> {
    if au.dim() != (manifest.height, manifest.width) || au.dim() != eu.dim() {
        return Err(Error::argument("map shapes disagree with the manifest"));
    }
    fs::create_dir_all(dir)?;
    raster::write_f32(&dir.join("au.f32"), au)?;
    raster::write_f32(&dir.join("eu.f32"), eu)?;
    fs::write(dir.join("maps.json"), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn load_maps<T: Scalar>(dir: &Path) -> Result<(Array2<T>, Array2<T>, MapsManifest)> {
    let bytes = fs::read(dir.join("maps.json")).map_err(|e| {
        Error::precondition(format!("maps manifest missing at {}: {e}", dir.display()))
    })?;
    let manifest: MapsManifest = serde_json::from_slice(&bytes)?;
    let au = raster::read_f32(&dir.join("au.f32"), manifest.height, manifest.width)?;
    let eu = raster::read_f32(&dir.join("eu.f32"), manifest.height, manifest.width)?;
    Ok((au, eu, manifest))
}
