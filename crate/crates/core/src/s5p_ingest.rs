//! Sentinel-5P NO2 ingestion: quality filtering of Level-2 observations,
//! 0.05-degree gridding, temporal averaging and patch extraction around
//! target locations.

use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Crs, GeoTransform};
use crate::period::Period;
use crate::raster::{bilinear_sample, Raster};

/// Grid cell size in degrees.
pub const CELL_SIZE_DEG: f64 = 0.05;
/// Default qa_value threshold (product scale [0, 1]).
pub const DEFAULT_QA_THRESHOLD: f64 = 0.75;
/// Patch edge length in pixels and resolution.
pub const PATCH_SIZE: usize = 120;
pub const PATCH_RESOLUTION_M: f64 = 10.0;
/// Extraction window edge length around a target location.
pub const WINDOW_KM: f64 = 20.0;

/// Mean meridional meters per degree of latitude (WGS84).
const METERS_PER_DEG_LAT: f64 = 111_320.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S5PObservation {
    pub lat: f64,
    pub lon: f64,
    /// Tropospheric NO2 column density, mol/m^2.
    pub no2_column: f64,
    /// Retrieval quality score in [0, 1].
    pub qa: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct S5PProduct {
    pub observations: Vec<S5PObservation>,
    pub sensing_time: DateTime<Utc>,
}

impl S5PProduct {
    /// Read a Level-2 product file (JSON observation list). A qa scale of
    /// [0, 100] is auto-detected and rescaled to [0, 1].
    pub fn read(path: &Path) -> Result<S5PProduct> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut product: S5PProduct = serde_json::from_slice(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if product.observations.iter().any(|o| o.qa > 1.0) {
            for o in &mut product.observations {
                o.qa /= 100.0;
            }
        }
        for o in &product.observations {
            if !(0.0..=1.0).contains(&o.qa) {
                return Err(Error::Format(format!(
                    "{}: qa value {} outside [0, 1]",
                    path.display(),
                    o.qa
                )));
            }
            if !(-90.0..=90.0).contains(&o.lat) || !(-180.0..=180.0).contains(&o.lon) {
                return Err(Error::Format(format!(
                    "{}: observation at ({}, {}) outside valid coordinates",
                    path.display(),
                    o.lat,
                    o.lon
                )));
            }
        }
        Ok(product)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("product encode: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Keep exactly the observations with qa >= threshold; order preserved.
pub fn filter_qa(product: &S5PProduct, threshold: f64) -> Result<S5PProduct> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!(
            "qa threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(S5PProduct {
        observations: product
            .observations
            .iter()
            .filter(|o| o.qa >= threshold)
            .copied()
            .collect(),
        sensing_time: product.sensing_time,
    })
}

/// Regular 0.05-degree grid of mean column densities. Row 0 is the
/// southernmost row; a cell is missing iff its count is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NO2Grid {
    pub values: Array2<f64>,
    pub counts: Array2<u32>,
    /// South-west corner (latitude, longitude) of cell (0, 0).
    pub origin: (f64, f64),
    pub cell_size: f64,
    pub period: Period,
}

impl NO2Grid {
    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.counts[[row, col]] == 0
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Latitude/longitude of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (row as f64 + 0.5) * self.cell_size,
            self.origin.1 + (col as f64 + 0.5) * self.cell_size,
        )
    }
}

/// Assign observations to 0.05-degree cells by floor arithmetic and
/// average per cell. Out-of-extent observations are dropped.
pub fn grid_product(
    product: &S5PProduct,
    origin: (f64, f64),
    rows: usize,
    cols: usize,
    period: Period,
) -> Result<NO2Grid> {
    if rows == 0 || cols == 0 {
        return Err(Error::Argument("grid extent must be positive".into()));
    }
    let mut sums = Array2::<f64>::zeros((rows, cols));
    let mut counts = Array2::<u32>::zeros((rows, cols));
    for obs in &product.observations {
        let r = ((obs.lat - origin.0) / CELL_SIZE_DEG).floor();
        let c = ((obs.lon - origin.1) / CELL_SIZE_DEG).floor();
        if r < 0.0 || c < 0.0 || r >= rows as f64 || c >= cols as f64 {
            continue;
        }
        let (r, c) = (r as usize, c as usize);
        sums[[r, c]] += obs.no2_column;
        counts[[r, c]] += 1;
    }
    let values = ndarray::Zip::from(&sums)
        .and(&counts)
        .map_collect(|&s, &n| if n > 0 { s / n as f64 } else { 0.0 });
    Ok(NO2Grid {
        values,
        counts,
        origin,
        cell_size: CELL_SIZE_DEG,
        period,
    })
}

/// Count-weighted cellwise mean over grids. A cell is missing in the
/// output iff it is missing in every input.
pub fn temporal_average(grids: &[NO2Grid], period: Period) -> Result<NO2Grid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Argument("temporal_average of zero grids".into()))?;
    let dim = first.values.dim();
    for g in grids {
        if g.values.dim() != dim || g.origin != first.origin || g.cell_size != first.cell_size {
            return Err(Error::Argument(
                "temporal_average over mixed grid geometries".into(),
            ));
        }
    }
    let mut sums = Array2::<f64>::zeros(dim);
    let mut counts = Array2::<u32>::zeros(dim);
    for g in grids {
        ndarray::Zip::from(&mut sums)
            .and(&mut counts)
            .and(&g.values)
            .and(&g.counts)
            .for_each(|s, n, &v, &c| {
                *s += v * c as f64;
                *n += c;
            });
    }
    let values = ndarray::Zip::from(&sums)
        .and(&counts)
        .map_collect(|&s, &n| if n > 0 { s / n as f64 } else { 0.0 });
    Ok(NO2Grid {
        values,
        counts,
        origin: first.origin,
        cell_size: first.cell_size,
        period,
    })
}

/// Single-channel 120x120 column-density patch at 10 m, the model's
/// secondary input.
#[derive(Debug, Clone)]
pub struct Sentinel5PPatch {
    pub data: Array2<f32>,
    pub center: (f64, f64),
    pub source_period: Period,
}

/// Extract the 120x120 patch at 10 m around `center` by bilinear
/// interpolation of cell-center values. The full 20x20 km window must lie
/// inside the grid; isolated missing cells in the window are filled by
/// inverse-distance weighting from their 8-neighbors, larger gaps are a
/// data-gap error.
pub fn extract_patch(grid: &NO2Grid, center: (f64, f64)) -> Result<Sentinel5PPatch> {
    let (lat, lon) = center;
    let (rows, cols) = grid.values.dim();
    let m_per_deg_lon = METERS_PER_DEG_LAT * lat.to_radians().cos();
    if m_per_deg_lon <= 0.0 {
        return Err(Error::Argument(format!(
            "cannot extract a patch at latitude {lat}"
        )));
    }
    let half_win_lat = WINDOW_KM * 500.0 / METERS_PER_DEG_LAT;
    let half_win_lon = WINDOW_KM * 500.0 / m_per_deg_lon;

    // window corners in fractional cell indices
    let row_of = |la: f64| (la - grid.origin.0) / grid.cell_size;
    let col_of = |lo: f64| (lo - grid.origin.1) / grid.cell_size;
    let (r_lo, r_hi) = (row_of(lat - half_win_lat), row_of(lat + half_win_lat));
    let (c_lo, c_hi) = (col_of(lon - half_win_lon), col_of(lon + half_win_lon));
    if r_lo < 0.0 || c_lo < 0.0 || r_hi > rows as f64 || c_hi > cols as f64 {
        return Err(Error::InsufficientCoverage(format!(
            "20 km window at ({lat:.4}, {lon:.4}) extends past the grid"
        )));
    }

    // resolve missing cells inside the window
    let (wr0, wr1) = (r_lo.floor() as usize, (r_hi.ceil() as usize).min(rows));
    let (wc0, wc1) = (c_lo.floor() as usize, (c_hi.ceil() as usize).min(cols));
    let mut work = grid.values.clone();
    for r in wr0..wr1 {
        for c in wc0..wc1 {
            if !grid.is_missing(r, c) {
                continue;
            }
            let mut wsum = 0.0;
            let mut vsum = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if grid.is_missing(nr, nc) {
                        continue;
                    }
                    let w = 1.0 / ((dr * dr + dc * dc) as f64).sqrt();
                    wsum += w;
                    vsum += w * grid.values[[nr, nc]];
                }
            }
            if wsum == 0.0 {
                return Err(Error::DataGap(format!(
                    "missing region wider than one cell around grid cell ({r}, {c})"
                )));
            }
            work[[r, c]] = vsum / wsum;
        }
    }

    // interpolate cell-center values onto the 10 m output lattice
    let mut data = Array2::<f32>::zeros((PATCH_SIZE, PATCH_SIZE));
    let half = (PATCH_SIZE as f64 - 1.0) / 2.0;
    let dlat_px = PATCH_RESOLUTION_M / METERS_PER_DEG_LAT;
    let dlon_px = PATCH_RESOLUTION_M / m_per_deg_lon;
    for i in 0..PATCH_SIZE {
        // row 0 is the northernmost output row
        let p_lat = lat + (half - i as f64) * dlat_px;
        let fr = row_of(p_lat) - 0.5;
        for j in 0..PATCH_SIZE {
            let p_lon = lon + (j as f64 - half) * dlon_px;
            let fc = col_of(p_lon) - 0.5;
            data[[i, j]] = bilinear_sample(&work, fr, fc) as f32;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite interpolated column density at ({lat:.4}, {lon:.4})"
        )));
    }
    Ok(Sentinel5PPatch {
        data,
        center,
        source_period: grid.period,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSidecar {
    pub origin: (f64, f64),
    pub cell_size: f64,
    pub period: Period,
    pub n_products: usize,
}

impl NO2Grid {
    /// Persist as a pair of north-up georeferenced rasters (values and
    /// counts) plus a JSON sidecar.
    pub fn write(&self, base: &Path, n_products: usize) -> Result<()> {
        let (rows, _cols) = self.values.dim();
        let transform = GeoTransform::new(
            self.origin.1,
            self.origin.0 + rows as f64 * self.cell_size,
            self.cell_size,
            -self.cell_size,
        );
        let flip = |a: &Array2<f64>| {
            let mut v = a.mapv(|x| x as f32);
            v.invert_axis(ndarray::Axis(0));
            v
        };
        let mut values = Raster::new(flip(&self.values), transform, Crs::Geographic);
        values.nodata = Some(0.0);
        values.write(&base.with_extension("rst"))?;
        let counts_f = self.counts.mapv(|c| c as f64);
        let counts = Raster::new(flip(&counts_f), transform, Crs::Geographic);
        counts.write(&base.with_extension("counts.rst"))?;
        let sidecar = GridSidecar {
            origin: self.origin,
            cell_size: self.cell_size,
            period: self.period,
            n_products,
        };
        let json = serde_json::to_vec_pretty(&sidecar)
            .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
        std::fs::write(base.with_extension("json"), json)
            .map_err(|e| Error::io(base.with_extension("json"), e))
    }

    pub fn read(base: &Path) -> Result<NO2Grid> {
        let sidecar_path = base.with_extension("json");
        let raw = std::fs::read(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: GridSidecar = serde_json::from_slice(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", sidecar_path.display())))?;
        let values_r = Raster::read(&base.with_extension("rst"))?;
        let counts_r = Raster::read(&base.with_extension("counts.rst"))?;
        let unflip = |r: &Raster| {
            let mut v = r.data.mapv(|x| x as f64);
            v.invert_axis(ndarray::Axis(0));
            v
        };
        Ok(NO2Grid {
            values: unflip(&values_r),
            counts: unflip(&counts_r).mapv(|v| v as u32),
            origin: sidecar.origin,
            cell_size: sidecar.cell_size,
            period: sidecar.period,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use chrono::TimeZone;

    fn obs(lat: f64, lon: f64, no2: f64, qa: f64) -> S5PObservation {
        S5PObservation {
            lat,
            lon,
            no2_column: no2,
            qa,
        }
    }

    fn product(observations: Vec<S5PObservation>) -> S5PProduct {
        S5PProduct {
            observations,
            sensing_time: Utc.with_ymd_and_hms(2019, 3, 14, 10, 30, 0).unwrap(),
        }
    }

    #[test]
    fn qa_filter_boundaries() {
        let p = product(vec![
            obs(48.0, 11.0, 1e-5, 0.80),
            obs(48.0, 11.0, 2e-5, 0.74),
            obs(48.0, 11.0, 3e-5, 0.75),
        ]);
        let filtered = filter_qa(&p, DEFAULT_QA_THRESHOLD).unwrap();
        let qas: Vec<f64> = filtered.observations.iter().map(|o| o.qa).collect();
        assert_eq!(qas, vec![0.80, 0.75]);
        assert!(filter_qa(&product(vec![]), 0.75).unwrap().observations.is_empty());
        assert!(filter_qa(&p, 1.5).is_err());
    }

    #[test]
    fn qa_scale_autodetected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = product(vec![obs(48.0, 11.0, 1e-5, 80.0), obs(48.0, 11.0, 2e-5, 74.0)]);
        p.write(&path).unwrap();
        let back = S5PProduct::read(&path).unwrap();
        assert_relative_eq!(back.observations[0].qa, 0.80);
        assert_relative_eq!(back.observations[1].qa, 0.74);
    }

    #[test]
    fn gridding_floor_arithmetic() {
        let p = product(vec![obs(48.001, 11.002, 1e-5, 0.9)]);
        let grid = grid_product(&p, (35.0, -10.0), 400, 600, Period::Full).unwrap();
        assert_eq!(grid.counts[[260, 420]], 1);
        assert_relative_eq!(grid.values[[260, 420]], 1e-5);
        assert_eq!(grid.total_count(), 1);
    }

    #[test]
    fn gridding_means_and_missing_cells() {
        let p = product(vec![
            obs(48.01, 11.01, 1e-5, 0.9),
            obs(48.02, 11.02, 3e-5, 0.9),
        ]);
        let grid = grid_product(&p, (48.0, 11.0), 4, 4, Period::Full).unwrap();
        assert_eq!(grid.counts[[0, 0]], 2);
        assert_relative_eq!(grid.values[[0, 0]], 2e-5);
        assert!(grid.is_missing(1, 1));
        assert_eq!(grid.total_count(), 2);
    }

    #[test]
    fn out_of_extent_observations_dropped() {
        let p = product(vec![obs(48.01, 11.01, 1e-5, 0.9), obs(60.0, 30.0, 1e-5, 0.9)]);
        let grid = grid_product(&p, (48.0, 11.0), 4, 4, Period::Full).unwrap();
        assert_eq!(grid.total_count(), 1);
    }

    #[test]
    fn temporal_average_single_grid_is_identity() {
        let p = product(vec![obs(48.01, 11.01, 1e-5, 0.9)]);
        let g = grid_product(&p, (48.0, 11.0), 4, 4, Period::Month { year: 2019, month: 3 })
            .unwrap();
        let avg = temporal_average(&[g.clone()], Period::Month { year: 2019, month: 3 }).unwrap();
        assert_eq!(avg, g);
    }

    #[test]
    fn temporal_average_weights_by_count() {
        // day 1: two obs of 1e-5 in cell; day 2: one obs of 4e-5
        let g1 = grid_product(
            &product(vec![obs(48.01, 11.01, 1e-5, 0.9), obs(48.02, 11.02, 1e-5, 0.9)]),
            (48.0, 11.0),
            4,
            4,
            Period::Full,
        )
        .unwrap();
        let g2 = grid_product(
            &product(vec![obs(48.015, 11.015, 4e-5, 0.9)]),
            (48.0, 11.0),
            4,
            4,
            Period::Full,
        )
        .unwrap();
        let avg = temporal_average(&[g1, g2], Period::Full).unwrap();
        // pooled mean (1 + 1 + 4)/3 = 2e-5, not mean of means 2.5e-5
        assert_relative_eq!(avg.values[[0, 0]], 2e-5, max_relative = 1e-12);
        assert_eq!(avg.counts[[0, 0]], 3);
    }

    #[test]
    fn mixed_geometry_rejected() {
        let g1 = grid_product(&product(vec![]), (48.0, 11.0), 4, 4, Period::Full).unwrap();
        let g2 = grid_product(&product(vec![]), (48.0, 11.0), 5, 4, Period::Full).unwrap();
        assert!(matches!(
            temporal_average(&[g1, g2], Period::Full),
            Err(Error::Argument(_))
        ));
    }

    fn dense_grid<F: Fn(f64, f64) -> f64>(rows: usize, cols: usize, f: F) -> NO2Grid {
        let origin = (48.0, 11.0);
        let mut values = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let lat = origin.0 + (r as f64 + 0.5) * CELL_SIZE_DEG;
                let lon = origin.1 + (c as f64 + 0.5) * CELL_SIZE_DEG;
                values[[r, c]] = f(lat, lon);
            }
        }
        NO2Grid {
            values,
            counts: Array2::ones((rows, cols)),
            origin,
            cell_size: CELL_SIZE_DEG,
            period: Period::Full,
        }
    }

    #[test]
    fn constant_grid_gives_constant_patch() {
        let grid = dense_grid(20, 20, |_, _| 3e-5);
        let center = (grid.origin.0 + 0.5, grid.origin.1 + 0.5);
        let patch = extract_patch(&grid, center).unwrap();
        assert_eq!(patch.data.dim(), (120, 120));
        for &v in patch.data.iter() {
            assert_relative_eq!(v, 3e-5f32, max_relative = 1e-6);
        }
    }

    #[test]
    fn window_past_grid_edge_is_coverage_error() {
        let grid = dense_grid(20, 20, |_, _| 3e-5);
        let center = (grid.origin.0 + 0.01, grid.origin.1 + 0.5);
        assert!(matches!(
            extract_patch(&grid, center),
            Err(Error::InsufficientCoverage(_))
        ));
    }

    #[test]
    fn isolated_gap_filled_large_gap_fatal() {
        let mut grid = dense_grid(20, 20, |_, _| 3e-5);
        let center = (grid.origin.0 + 0.5, grid.origin.1 + 0.5);
        // isolated missing cell inside the window: filled by IDW
        grid.counts[[10, 10]] = 0;
        grid.values[[10, 10]] = 0.0;
        assert!(extract_patch(&grid, center).is_ok());
        // 3x3 missing block: center cell has no valid neighbor
        for r in 9..12 {
            for c in 9..12 {
                grid.counts[[r, c]] = 0;
                grid.values[[r, c]] = 0.0;
            }
        }
        assert!(matches!(extract_patch(&grid, center), Err(Error::DataGap(_))));
    }

    #[test]
    fn grid_file_round_trip() {
        let p = product(vec![
            obs(48.01, 11.01, 1e-5, 0.9),
            obs(48.12, 11.18, 5e-5, 0.9),
        ]);
        let grid = grid_product(&p, (48.0, 11.0), 6, 8, Period::Quarter { year: 2019, q: 2 })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("grid_2019Q2");
        grid.write(&base, 1).unwrap();
        let back = NO2Grid::read(&base).unwrap();
        assert_eq!(back.counts, grid.counts);
        assert_eq!(back.period, grid.period);
        assert_eq!(back.origin, grid.origin);
        for (a, b) in grid.values.iter().zip(back.values.iter()) {
            assert_relative_eq!(*a as f32, *b as f32);
        }
    }
}
