//! Sentinel-2 Level-2A ingestion: scene loading, cloud screening,
//! resampling of all bands to 10 m and cropping of fixed-size tiles
//! around target coordinates.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::geo::{project, Crs, GeoTransform};
use crate::raster::Raster;

pub use crate::raster::upsample_bilinear;

/// Fixed 12-channel band layout: ascending band id, band 10 excluded
/// (empty in Level-2A products). Every consumer of tile arrays depends on
/// this single ordering.
pub const BAND_ORDER: [&str; 12] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12",
];

/// Native resolution in meters per pixel for each band in `BAND_ORDER`.
pub const BAND_RESOLUTION_M: [u32; 12] = [60, 10, 10, 10, 20, 20, 20, 10, 20, 60, 20, 20];

/// Tile edge length in pixels and resolution after resampling.
pub const TILE_SIZE: usize = 120;
pub const TILE_RESOLUTION_M: f64 = 10.0;

/// Scene-classification classes counted as cloud/cirrus/snow.
pub const SCL_REJECT_CLASSES: [u8; 4] = [8, 9, 10, 11];
/// Default maximum tolerated cloud/cirrus/snow fraction in a tile.
pub const DEFAULT_CLOUD_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub product_id: String,
    pub acquisition_time: DateTime<Utc>,
}

/// One Level-2A scene: per-band rasters at native resolution plus the
/// scene-classification mask.
#[derive(Debug, Clone)]
pub struct S2Scene {
    pub bands: BTreeMap<String, Raster>,
    pub scene_classification: Array2<u8>,
    pub scl_transform: GeoTransform,
    pub crs: Crs,
    pub acquisition_time: DateTime<Utc>,
    pub product_id: String,
}

/// 12-band tile at 10 m resolution, the model's primary input.
#[derive(Debug, Clone)]
pub struct Sentinel2Tile {
    /// Band-major array, shape 12 x size x size, bands in `BAND_ORDER`.
    pub data: Array3<f32>,
    /// (latitude, longitude) of the tile center in degrees.
    pub center: (f64, f64),
    pub resolution_m: f64,
    pub acquisition_time: DateTime<Utc>,
    pub station_id: Option<String>,
}

/// Load a Level-2A product from its directory layout: `metadata.json`
/// plus one `.rst` raster per band (B01..B12 without B10, or with an
/// all-zero B10) and the `SCL.rst` classification mask.
pub fn load_s2_scene(path: &Path) -> Result<S2Scene> {
    let meta_path = path.join("metadata.json");
    let meta_raw = std::fs::read(&meta_path)
        .map_err(|_| Error::CorruptProduct(format!("{}: missing metadata.json", path.display())))?;
    let meta: SceneMetadata = serde_json::from_slice(&meta_raw)
        .map_err(|e| Error::CorruptProduct(format!("{}: metadata.json: {e}", path.display())))?;

    let mut bands = BTreeMap::new();
    let mut crs: Option<Crs> = None;
    for band in BAND_ORDER {
        let band_path = path.join(format!("{band}.rst"));
        if !band_path.exists() {
            return Err(Error::CorruptProduct(format!(
                "{}: missing band file {band}.rst",
                path.display()
            )));
        }
        let raster = Raster::read(&band_path)?;
        if !raster.transform.pixel_width.is_finite() || raster.transform.pixel_width <= 0.0 {
            return Err(Error::GeoReferenceMissing(format!(
                "{band}: non-positive pixel size"
            )));
        }
        match crs {
            None => crs = Some(raster.crs),
            Some(c) if c != raster.crs => {
                return Err(Error::CorruptProduct(format!(
                    "{band}: CRS differs from other bands"
                )))
            }
            _ => {}
        }
        bands.insert(band.to_string(), raster);
    }

    // Level-2A band 10 is empty; tolerate an all-zero file, reject data.
    let b10_path = path.join("B10.rst");
    if b10_path.exists() {
        let b10 = Raster::read(&b10_path)?;
        if b10.data.iter().any(|&v| v != 0.0) {
            return Err(Error::CorruptProduct(
                "B10 contains data; not a Level-2A product".into(),
            ));
        }
    }

    check_common_footprint(&bands)?;

    let scl_path = path.join("SCL.rst");
    let scl = Raster::read(&scl_path).map_err(|_| {
        Error::CorruptProduct(format!("{}: missing SCL.rst", path.display()))
    })?;
    let scene_classification = scl.data.mapv(|v| v as u8);

    Ok(S2Scene {
        bands,
        scene_classification,
        scl_transform: scl.transform,
        crs: crs.expect("at least one band"),
        acquisition_time: meta.acquisition_time,
        product_id: meta.product_id,
    })
}

fn check_common_footprint(bands: &BTreeMap<String, Raster>) -> Result<()> {
    let mut footprint: Option<(f64, f64)> = None;
    for (name, raster) in bands {
        let (rows, cols) = raster.shape();
        let w = cols as f64 * raster.transform.pixel_width;
        let h = rows as f64 * raster.transform.pixel_height.abs();
        match footprint {
            None => footprint = Some((w, h)),
            Some((fw, fh)) => {
                if (w - fw).abs() > 1e-6 || (h - fh).abs() > 1e-6 {
                    return Err(Error::CorruptProduct(format!(
                        "{name}: footprint {w}x{h} m differs from {fw}x{fh} m"
                    )));
                }
            }
        }
    }
    Ok(())
}

impl S2Scene {
    /// Resample every band to 10 m with bilinear upsampling and the
    /// classification mask with nearest-neighbor block replication.
    pub fn to_10m(&self) -> Result<S2Scene> {
        let mut bands = BTreeMap::new();
        for (name, raster) in &self.bands {
            let res = raster.transform.pixel_width;
            let factor = (res / TILE_RESOLUTION_M).round() as usize;
            if factor == 0 || (res - factor as f64 * TILE_RESOLUTION_M).abs() > 1e-9 {
                return Err(Error::CorruptProduct(format!(
                    "{name}: resolution {res} m is not a multiple of 10 m"
                )));
            }
            let data = if factor == 1 {
                raster.data.clone()
            } else {
                upsample_bilinear(&raster.data, factor)?
            };
            let mut out = Raster::new(data, raster.transform.upsampled(factor), raster.crs);
            out.nodata = raster.nodata;
            bands.insert(name.clone(), out);
        }

        let scl_factor =
            (self.scl_transform.pixel_width / TILE_RESOLUTION_M).round() as usize;
        let scl = replicate_mask(&self.scene_classification, scl_factor.max(1));

        Ok(S2Scene {
            bands,
            scene_classification: scl,
            scl_transform: self.scl_transform.upsampled(scl_factor.max(1)),
            crs: self.crs,
            acquisition_time: self.acquisition_time,
            product_id: self.product_id.clone(),
        })
    }

    fn reference_band(&self) -> &Raster {
        self.bands.get("B02").expect("B02 present by construction")
    }

    /// Pixel (row, col) of the 10 m grid whose center is nearest to the
    /// given latitude/longitude.
    pub fn pixel_of(&self, lat: f64, lon: f64) -> Result<(i64, i64)> {
        let (x, y) = project(lat, lon, &self.crs)?;
        let (r, c) = self.reference_band().transform.to_pixel(x, y);
        Ok((r.round() as i64, c.round() as i64))
    }

    /// Window of the scene-classification mask matching a tile crop.
    pub fn scl_window(&self, lat: f64, lon: f64, size: usize) -> Result<Array2<u8>> {
        let (row, col) = self.pixel_of(lat, lon)?;
        let half = (size / 2) as i64;
        let (nr, nc) = self.scene_classification.dim();
        let (r0, c0) = (row - half, col - half);
        if r0 < 0 || c0 < 0 || r0 + size as i64 > nr as i64 || c0 + size as i64 > nc as i64 {
            return Err(Error::InsufficientCoverage(format!(
                "classification window at ({lat:.4}, {lon:.4}) exceeds scene bounds"
            )));
        }
        Ok(self
            .scene_classification
            .slice(ndarray::s![
                r0 as usize..r0 as usize + size,
                c0 as usize..c0 as usize + size
            ])
            .to_owned())
    }
}

fn replicate_mask(mask: &Array2<u8>, factor: usize) -> Array2<u8> {
    let (nr, nc) = mask.dim();
    let mut out = Array2::zeros((nr * factor, nc * factor));
    for i in 0..nr * factor {
        for j in 0..nc * factor {
            out[[i, j]] = mask[[i / factor, j / factor]];
        }
    }
    out
}

/// Crop the size x size window whose center pixel contains the projected
/// center coordinate. All bands must already be at 10 m.
pub fn crop_centered(
    scene: &S2Scene,
    center: (f64, f64),
    size: usize,
    station_id: Option<String>,
) -> Result<Sentinel2Tile> {
    if size == 0 {
        return Err(Error::Argument("tile size must be positive".into()));
    }
    for (name, raster) in &scene.bands {
        if (raster.transform.pixel_width - TILE_RESOLUTION_M).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "{name} is at {} m; resample the scene to 10 m before cropping",
                raster.transform.pixel_width
            )));
        }
    }
    let (lat, lon) = center;
    let (row, col) = scene.pixel_of(lat, lon)?;
    let half = (size / 2) as i64;
    let (nr, nc) = scene.reference_band().shape();
    let (r0, c0) = (row - half, col - half);
    if r0 < 0 || c0 < 0 || r0 + size as i64 > nr as i64 || c0 + size as i64 > nc as i64 {
        return Err(Error::InsufficientCoverage(format!(
            "center ({lat:.4}, {lon:.4}) lies within {half} px of a scene edge"
        )));
    }
    let (r0, c0) = (r0 as usize, c0 as usize);

    let mut data = Array3::zeros((BAND_ORDER.len(), size, size));
    for (bi, band) in BAND_ORDER.iter().enumerate() {
        let raster = scene
            .bands
            .get(*band)
            .ok_or_else(|| Error::CorruptProduct(format!("missing band {band}")))?;
        let window = raster.data.slice(ndarray::s![r0..r0 + size, c0..c0 + size]);
        data.slice_mut(ndarray::s![bi, .., ..]).assign(&window);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "tile at ({lat:.4}, {lon:.4}) contains non-finite reflectance"
        )));
    }

    Ok(Sentinel2Tile {
        data,
        center,
        resolution_m: TILE_RESOLUTION_M,
        acquisition_time: scene.acquisition_time,
        station_id,
    })
}

/// Verdict of the automated cloud/artifact screen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScreenVerdict {
    Accept,
    Reject(String),
}

impl ScreenVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, ScreenVerdict::Accept)
    }
}

/// Screen a tile against its scene-classification window. Rejects when
/// cloud/cirrus/snow pixels exceed `cloud_fraction`, or when any band
/// contains non-finite or all-zero data.
pub fn screen_tile(
    tile: &Sentinel2Tile,
    scl_window: &Array2<u8>,
    cloud_fraction: f64,
) -> Result<ScreenVerdict> {
    let (_, th, tw) = tile.data.dim();
    if scl_window.dim() != (th, tw) {
        return Err(Error::Argument(format!(
            "classification window {:?} does not match tile window ({th}, {tw})",
            scl_window.dim()
        )));
    }
    let n = (th * tw) as f64;
    let cloudy = scl_window
        .iter()
        .filter(|c| SCL_REJECT_CLASSES.contains(c))
        .count() as f64;
    let fraction = cloudy / n;
    if fraction > cloud_fraction {
        return Ok(ScreenVerdict::Reject(format!(
            "cloud fraction {:.3} exceeds threshold {:.3}",
            fraction, cloud_fraction
        )));
    }
    for (bi, band) in BAND_ORDER.iter().enumerate() {
        let plane = tile.data.slice(ndarray::s![bi, .., ..]);
        if plane.iter().any(|v| !v.is_finite()) {
            return Ok(ScreenVerdict::Reject(format!("non-finite data in {band}")));
        }
        if plane.iter().all(|&v| v == 0.0) {
            return Ok(ScreenVerdict::Reject(format!("all-zero band {band}")));
        }
    }
    Ok(ScreenVerdict::Accept)
}

const TILE_MAGIC: &[u8; 4] = b"AQTL";

#[derive(Debug, Serialize, Deserialize)]
struct TileHeader {
    bands: Vec<String>,
    size: usize,
    center_lat: f64,
    center_lon: f64,
    resolution_m: f64,
    acquisition_time: DateTime<Utc>,
    station_id: Option<String>,
}

impl Sentinel2Tile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let (_, h, _) = self.data.dim();
        let header = TileHeader {
            bands: BAND_ORDER.iter().map(|s| s.to_string()).collect(),
            size: h,
            center_lat: self.center.0,
            center_lon: self.center.1,
            resolution_m: self.resolution_m,
            acquisition_time: self.acquisition_time,
            station_id: self.station_id.clone(),
        };
        let mut w = ContainerWriter::create(path, TILE_MAGIC, &header)?;
        let flat: Vec<f32> = self.data.iter().copied().collect();
        w.write_block(&flat)?;
        w.finish()
    }

    pub fn read(path: &Path) -> Result<Sentinel2Tile> {
        let (mut r, header): (_, TileHeader) = ContainerReader::open(path, TILE_MAGIC)?;
        let flat = r.read_block()?;
        let nb = header.bands.len();
        let data = Array3::from_shape_vec((nb, header.size, header.size), flat)
            .map_err(|e| Error::Format(format!("tile payload shape: {e}")))?;
        Ok(Sentinel2Tile {
            data,
            center: (header.center_lat, header.center_lon),
            resolution_m: header.resolution_m,
            acquisition_time: header.acquisition_time,
            station_id: header.station_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_fixtures::synthetic_scene;
    use tempfile::tempdir;

    #[test]
    fn load_round_trips_fixture_arrays() {
        let dir = tempdir().unwrap();
        let written = synthetic_scene(dir.path(), 240, 42);
        let scene = load_s2_scene(dir.path()).unwrap();
        assert_eq!(scene.bands.len(), 12);
        for (name, raster) in &scene.bands {
            assert_eq!(raster.data, written.bands[name].data, "band {name}");
        }
        // three native resolutions present
        let mut res: Vec<u32> = scene
            .bands
            .values()
            .map(|r| r.transform.pixel_width as u32)
            .collect();
        res.sort_unstable();
        res.dedup();
        assert_eq!(res, vec![10, 20, 60]);
    }

    #[test]
    fn missing_band_is_corrupt_product() {
        let dir = tempdir().unwrap();
        synthetic_scene(dir.path(), 240, 1);
        std::fs::remove_file(dir.path().join("B02.rst")).unwrap();
        match load_s2_scene(dir.path()) {
            Err(Error::CorruptProduct(msg)) => assert!(msg.contains("B02")),
            other => panic!("expected corrupt-product error, got {other:?}"),
        }
    }

    #[test]
    fn nonzero_b10_is_rejected() {
        let dir = tempdir().unwrap();
        let scene = synthetic_scene(dir.path(), 240, 1);
        let mut b10 = scene.bands["B01"].clone();
        b10.data.fill(7.0);
        b10.write(&dir.path().join("B10.rst")).unwrap();
        assert!(matches!(
            load_s2_scene(dir.path()),
            Err(Error::CorruptProduct(_))
        ));
    }

    #[test]
    fn crop_at_scene_center() {
        let dir = tempdir().unwrap();
        synthetic_scene(dir.path(), 360, 7);
        let scene = load_s2_scene(dir.path()).unwrap().to_10m().unwrap();
        let (r, c) = (180.0, 180.0);
        let (x, y) = scene.bands["B02"].transform.pixel_center(r, c);
        let (lat, lon) = crate::geo::utm_inverse(x, y, 32, true).unwrap();
        let tile = crop_centered(&scene, (lat, lon), TILE_SIZE, None).unwrap();
        assert_eq!(tile.data.dim(), (12, 120, 120));
        // band 1 (B02) is native 10 m; crop must match the raw window
        let b02 = &scene.bands["B02"].data;
        let window = b02.slice(ndarray::s![120..240, 120..240]);
        assert_eq!(tile.data.slice(ndarray::s![1, .., ..]), window);
    }

    #[test]
    fn crop_too_close_to_edge_fails() {
        let dir = tempdir().unwrap();
        synthetic_scene(dir.path(), 240, 7);
        let scene = load_s2_scene(dir.path()).unwrap().to_10m().unwrap();
        let (x, y) = scene.bands["B02"].transform.pixel_center(30.0, 120.0);
        let (lat, lon) = crate::geo::utm_inverse(x, y, 32, true).unwrap();
        assert!(matches!(
            crop_centered(&scene, (lat, lon), TILE_SIZE, None),
            Err(Error::InsufficientCoverage(_))
        ));
    }

    #[test]
    fn crop_requires_10m_bands() {
        let dir = tempdir().unwrap();
        synthetic_scene(dir.path(), 240, 7);
        let scene = load_s2_scene(dir.path()).unwrap();
        let (x, y) = scene.bands["B02"].transform.pixel_center(120.0, 120.0);
        let (lat, lon) = crate::geo::utm_inverse(x, y, 32, true).unwrap();
        assert!(matches!(
            crop_centered(&scene, (lat, lon), TILE_SIZE, None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn constant_scene_crops_to_constant_tile() {
        let dir = tempdir().unwrap();
        let mut scene = synthetic_scene(dir.path(), 240, 7);
        for raster in scene.bands.values_mut() {
            raster.data.fill(3.25);
        }
        let scene = S2Scene {
            bands: scene.bands,
            scene_classification: scene.scene_classification,
            scl_transform: scene.scl_transform,
            crs: scene.crs,
            acquisition_time: scene.acquisition_time,
            product_id: scene.product_id,
        }
        .to_10m()
        .unwrap();
        let (x, y) = scene.bands["B02"].transform.pixel_center(120.0, 120.0);
        let (lat, lon) = crate::geo::utm_inverse(x, y, 32, true).unwrap();
        let tile = crop_centered(&scene, (lat, lon), TILE_SIZE, None).unwrap();
        assert!(tile.data.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn screening_thresholds() {
        let dir = tempdir().unwrap();
        synthetic_scene(dir.path(), 240, 7);
        let scene = load_s2_scene(dir.path()).unwrap().to_10m().unwrap();
        let (x, y) = scene.bands["B02"].transform.pixel_center(120.0, 120.0);
        let (lat, lon) = crate::geo::utm_inverse(x, y, 32, true).unwrap();
        let tile = crop_centered(&scene, (lat, lon), TILE_SIZE, None).unwrap();

        let clean = Array2::from_elem((120, 120), 4u8);
        assert!(screen_tile(&tile, &clean, DEFAULT_CLOUD_FRACTION)
            .unwrap()
            .is_accept());

        // 60% cloud: rows 0..72 flagged as medium-probability cloud
        let mut cloudy = clean.clone();
        cloudy.slice_mut(ndarray::s![0..72, ..]).fill(8);
        match screen_tile(&tile, &cloudy, DEFAULT_CLOUD_FRACTION).unwrap() {
            ScreenVerdict::Reject(reason) => assert!(reason.contains("cloud fraction")),
            v => panic!("expected rejection, got {v:?}"),
        }

        // NaN pixel rejects regardless of mask
        let mut bad = tile.clone();
        bad.data[[3, 5, 5]] = f32::NAN;
        match screen_tile(&bad, &clean, DEFAULT_CLOUD_FRACTION).unwrap() {
            ScreenVerdict::Reject(reason) => assert!(reason.contains("non-finite")),
            v => panic!("expected rejection, got {v:?}"),
        }

        // determinism
        assert_eq!(
            screen_tile(&tile, &cloudy, DEFAULT_CLOUD_FRACTION).unwrap(),
            screen_tile(&tile, &cloudy, DEFAULT_CLOUD_FRACTION).unwrap()
        );
    }

    #[test]
    fn screen_shape_mismatch_is_argument_error() {
        let dir = tempdir().unwrap();
        synthetic_scene(dir.path(), 240, 7);
        let scene = load_s2_scene(dir.path()).unwrap().to_10m().unwrap();
        let (x, y) = scene.bands["B02"].transform.pixel_center(120.0, 120.0);
        let (lat, lon) = crate::geo::utm_inverse(x, y, 32, true).unwrap();
        let tile = crop_centered(&scene, (lat, lon), TILE_SIZE, None).unwrap();
        let mask = Array2::zeros((60, 60));
        assert!(matches!(
            screen_tile(&tile, &mask, DEFAULT_CLOUD_FRACTION),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn tile_file_round_trip() {
        let dir = tempdir().unwrap();
        synthetic_scene(dir.path(), 240, 7);
        let scene = load_s2_scene(dir.path()).unwrap().to_10m().unwrap();
        let (x, y) = scene.bands["B02"].transform.pixel_center(120.0, 120.0);
        let (lat, lon) = crate::geo::utm_inverse(x, y, 32, true).unwrap();
        let tile = crop_centered(&scene, (lat, lon), TILE_SIZE, Some("DE001".into())).unwrap();
        let path = dir.path().join("tile.aqt");
        tile.write(&path).unwrap();
        let back = Sentinel2Tile::read(&path).unwrap();
        assert_eq!(tile.data, back.data);
        assert_eq!(tile.station_id, back.station_id);
        assert_eq!(tile.acquisition_time, back.acquisition_time);
    }
}
