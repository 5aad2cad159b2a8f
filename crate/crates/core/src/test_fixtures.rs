//! Synthetic raw-product fixtures: small Level-2A scene directories, S5P
//! observation products and station exports with known content. Used by
//! unit and integration tests to exercise the ingest path end to end.

use std::path::Path;

use chrono::{TimeZone, Utc};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geo::{Crs, GeoTransform};
use crate::raster::Raster;
use crate::s2_ingest::{S2Scene, SceneMetadata, BAND_ORDER, BAND_RESOLUTION_M};
use crate::s5p_ingest::{S5PObservation, S5PProduct};

/// Write a synthetic Level-2A product into `dir` and return the scene as
/// written. `size_10m` is the scene edge length in 10 m pixels and must
/// be divisible by 6 so the 60 m bands tile evenly.
pub fn synthetic_scene(dir: &Path, size_10m: usize, seed: u64) -> S2Scene {
    assert_eq!(size_10m % 6, 0, "scene size must be divisible by 6");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crs = Crs::Utm { zone: 32, north: true };
    let origin = (600_000.0, 5_300_000.0);
    let acquisition_time = Utc.with_ymd_and_hms(2019, 6, 15, 10, 30, 0).unwrap();

    let meta = SceneMetadata {
        product_id: format!("SYNTH_T32UPU_{seed}"),
        acquisition_time,
    };
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_vec_pretty(&meta).unwrap(),
    )
    .unwrap();

    let mut bands = std::collections::BTreeMap::new();
    for (band, res) in BAND_ORDER.iter().zip(BAND_RESOLUTION_M) {
        let n = size_10m * 10 / res as usize;
        let data = Array2::from_shape_fn((n, n), |_| rng.random_range(100.0..3000.0f32));
        let transform = GeoTransform::new(origin.0, origin.1, res as f64, -(res as f64));
        let raster = Raster::new(data, transform, crs);
        raster.write(&dir.join(format!("{band}.rst"))).unwrap();
        bands.insert(band.to_string(), raster);
    }

    // clear-sky classification mask at 20 m (class 4 = vegetation)
    let n_scl = size_10m / 2;
    let scl_data = Array2::from_elem((n_scl, n_scl), 4.0f32);
    let scl_transform = GeoTransform::new(origin.0, origin.1, 20.0, -20.0);
    Raster::new(scl_data.clone(), scl_transform, crs)
        .write(&dir.join("SCL.rst"))
        .unwrap();

    S2Scene {
        bands,
        scene_classification: scl_data.mapv(|v| v as u8),
        scl_transform,
        crs,
        acquisition_time,
        product_id: meta.product_id,
    }
}

/// Synthetic S5P product: a swath of observations on a jittered lattice
/// covering `origin .. origin + extent_deg`, with a smooth spatial field
/// plus per-observation qa scores.
pub fn synthetic_s5p_product(origin: (f64, f64), extent_deg: f64, n: usize, seed: u64) -> S5PProduct {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observations = Vec::with_capacity(n);
    for _ in 0..n {
        let lat = origin.0 + rng.random_range(0.0..extent_deg);
        let lon = origin.1 + rng.random_range(0.0..extent_deg);
        let field = 4e-5
            + 1e-5 * ((lat - origin.0) * 2.0).sin()
            + 1e-5 * ((lon - origin.1) * 2.0).cos();
        observations.push(S5PObservation {
            lat,
            lon,
            no2_column: field + rng.random_range(-2e-6..2e-6),
            qa: rng.random_range(0.3..1.0),
        });
    }
    S5PProduct {
        observations,
        sensing_time: Utc.with_ymd_and_hms(2019, 6, 15, 11, 0, 0).unwrap(),
    }
}

/// Synthetic hourly station export covering `n_hours` from 2019-06-01,
/// written as CSV. Returns the per-station true means.
pub fn synthetic_station_file(path: &Path, stations: &[(&str, f64, f64, f64)], n_hours: usize) {
    let mut out = String::from("station_id,lat,lon,timestamp,no2,validity,verification\n");
    let start = Utc.with_ymd_and_hms(2019, 6, 1, 0, 0, 0).unwrap();
    for (id, lat, lon, level) in stations {
        for h in 0..n_hours {
            let ts = start + chrono::Duration::hours(h as i64);
            // deterministic small diurnal variation around the base level
            let no2 = level + 2.0 * ((h % 24) as f64 / 24.0 * std::f64::consts::TAU).sin();
            out.push_str(&format!(
                "{id},{lat},{lon},{},{:.4},1,1\n",
                ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                no2
            ));
        }
    }
    std::fs::write(path, out).unwrap();
}
