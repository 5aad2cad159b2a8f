//! Dense surface-concentration heatmaps by overlapping-tile inference,
//! plus raster/image export and per-location time series.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, Sample};
use crate::error::{Error, Result};
use crate::geo::{project, unproject, Crs, GeoTransform};
use crate::model::{Model, Variant};
use crate::period::Period;
use crate::raster::Raster;
use crate::s2_ingest::{screen_tile, S2Scene, Sentinel2Tile, BAND_ORDER, TILE_RESOLUTION_M};
use crate::s5p_ingest::{extract_patch, NO2Grid};
use crate::train_eval::predict;

/// Window edge length in 10 m pixels.
pub const TILE_PX: usize = crate::s2_ingest::TILE_SIZE;
/// Window stride in pixels; 10 px at 10 m/px gives the 100 m cell size.
pub const STRIDE_PX: usize = 10;
/// Raster fill for cells without a prediction.
pub const NODATA: f32 = -9999.0;

/// Window origins covering a scene. The map has one cell per regular
/// offset and axis; a clamped final window shares the last cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tile: usize,
    pub stride: usize,
    pub row_offsets: Vec<usize>,
    pub col_offsets: Vec<usize>,
}

fn axis_offsets(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut offsets: Vec<usize> = (0..=(dim - tile)).step_by(stride).collect();
    if *offsets.last().unwrap() < dim - tile {
        offsets.push(dim - tile);
    }
    offsets
}

pub fn plan_tiles(dims: (usize, usize), tile: usize, stride: usize) -> Result<TilePlan> {
    let (rows, cols) = dims;
    if tile == 0 || stride == 0 || stride > tile {
        return Err(Error::Argument(format!(
            "bad tiling: tile {tile}, stride {stride}"
        )));
    }
    if rows < tile || cols < tile {
        return Err(Error::InsufficientCoverage(format!(
            "scene {rows}x{cols} is smaller than a {tile}-px window"
        )));
    }
    Ok(TilePlan {
        tile,
        stride,
        row_offsets: axis_offsets(rows, tile, stride),
        col_offsets: axis_offsets(cols, tile, stride),
    })
}

impl TilePlan {
    /// Map dimensions: one cell per regular (stride-aligned) offset.
    pub fn cell_dims(&self) -> (usize, usize) {
        let cells = |offs: &[usize]| offs.iter().filter(|&&o| o % self.stride == 0).count();
        (cells(&self.row_offsets), cells(&self.col_offsets))
    }

    /// Cell holding the window center; clamped offsets floor onto the
    /// last regular cell.
    pub fn cell_of(&self, offset: usize) -> usize {
        offset / self.stride
    }
}

/// Predicted concentrations at 100 m cell size, with a mask for cells
/// whose windows were screened out or lacked column-density coverage.
#[derive(Debug, Clone)]
pub struct PredictionMap {
    pub values: Array2<f32>,
    /// true = no prediction.
    pub mask: Array2<bool>,
    pub transform: GeoTransform,
    pub crs: Crs,
    pub period: Period,
    pub checkpoint_id: String,
}

/// Run the model over every planned window of a 10 m scene. Screened
/// windows and column-density gaps leave masked cells; cells fed by
/// several (edge-clamped) windows hold the arithmetic mean.
#[allow(clippy::too_many_arguments)]
pub fn predict_map(
    model: &mut Model<f32>,
    stats: &NormStats,
    scene: &S2Scene,
    grid: Option<&NO2Grid>,
    plan: &TilePlan,
    period: Period,
    checkpoint_id: &str,
    cloud_fraction: f64,
) -> Result<PredictionMap> {
    let reference = scene
        .bands
        .get("B02")
        .ok_or_else(|| Error::CorruptProduct("scene lacks band B02".into()))?;
    if (reference.transform.pixel_width - TILE_RESOLUTION_M).abs() > 1e-9 {
        return Err(Error::Argument(
            "predict_map needs a scene resampled to 10 m".into(),
        ));
    }
    if model.variant() == Variant::Fusion && grid.is_none() {
        return Err(Error::Argument(
            "fusion checkpoint needs a column-density grid".into(),
        ));
    }
    let (rows, cols) = reference.shape();
    if *plan.row_offsets.last().unwrap() + plan.tile > rows
        || *plan.col_offsets.last().unwrap() + plan.tile > cols
    {
        return Err(Error::Argument(format!(
            "tile plan exceeds the {rows}x{cols} scene"
        )));
    }

    let (cell_rows, cell_cols) = plan.cell_dims();
    let mut sums = Array2::<f64>::zeros((cell_rows, cell_cols));
    let mut counts = Array2::<u32>::zeros((cell_rows, cell_cols));

    let mut pending: Vec<(usize, usize, Sample)> = Vec::new();
    let flush = |pending: &mut Vec<(usize, usize, Sample)>,
                     model: &mut Model<f32>,
                     sums: &mut Array2<f64>,
                     counts: &mut Array2<u32>|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let samples: Vec<Sample> = pending.iter().map(|(_, _, s)| s.clone()).collect();
        let preds = predict(model, &samples, stats)?;
        for ((ci, cj, _), p) in pending.drain(..).zip(preds) {
            sums[[ci, cj]] += p;
            counts[[ci, cj]] += 1;
        }
        Ok(())
    };

    for &r0 in &plan.row_offsets {
        for &c0 in &plan.col_offsets {
            let (ci, cj) = (plan.cell_of(r0), plan.cell_of(c0));
            let center_px = (r0 as f64 + plan.tile as f64 / 2.0, c0 as f64 + plan.tile as f64 / 2.0);
            let (x, y) = reference.transform.pixel_center(center_px.0 - 0.5, center_px.1 - 0.5);
            let (lat, lon) = unproject(x, y, &scene.crs)?;

            let mut data = Array3::<f32>::zeros((BAND_ORDER.len(), plan.tile, plan.tile));
            for (bi, band) in BAND_ORDER.iter().enumerate() {
                let raster = scene
                    .bands
                    .get(*band)
                    .ok_or_else(|| Error::CorruptProduct(format!("missing band {band}")))?;
                data.slice_mut(s![bi, .., ..])
                    .assign(&raster.data.slice(s![r0..r0 + plan.tile, c0..c0 + plan.tile]));
            }
            let tile = Sentinel2Tile {
                data,
                center: (lat, lon),
                resolution_m: TILE_RESOLUTION_M,
                acquisition_time: scene.acquisition_time,
                station_id: None,
            };
            let scl = scene
                .scene_classification
                .slice(s![r0..r0 + plan.tile, c0..c0 + plan.tile])
                .to_owned();
            if !screen_tile(&tile, &scl, cloud_fraction)?.is_accept() {
                continue;
            }
            let s5p = if model.variant() == Variant::Fusion {
                match extract_patch(grid.unwrap(), (lat, lon)) {
                    Ok(p) => Some(p.data),
                    Err(Error::DataGap(_)) | Err(Error::InsufficientCoverage(_)) => continue,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            pending.push((
                ci,
                cj,
                Sample {
                    station_id: format!("cell-{ci}-{cj}"),
                    period,
                    s2: tile.data,
                    s5p,
                    target: 0.0,
                    center: (lat, lon),
                    latents: None,
                },
            ));
            if pending.len() >= 32 {
                flush(&mut pending, model, &mut sums, &mut counts)?;
            }
        }
    }
    flush(&mut pending, model, &mut sums, &mut counts)?;

    let mut values = Array2::<f32>::zeros((cell_rows, cell_cols));
    let mut mask = Array2::<bool>::from_elem((cell_rows, cell_cols), true);
    for ((i, j), &count) in counts.indexed_iter() {
        if count > 0 {
            values[[i, j]] = (sums[[i, j]] / count as f64) as f32;
            mask[[i, j]] = false;
        }
    }
    // cell (0,0) is centered on scene pixel (tile/2, tile/2)
    let t = &reference.transform;
    let half = plan.tile as f64 / 2.0 - plan.stride as f64 / 2.0;
    let transform = GeoTransform::new(
        t.origin_x + half * t.pixel_width,
        t.origin_y + half * t.pixel_height,
        t.pixel_width * plan.stride as f64,
        t.pixel_height * plan.stride as f64,
    );
    Ok(PredictionMap {
        values,
        mask,
        transform,
        crs: scene.crs,
        period,
        checkpoint_id: checkpoint_id.to_string(),
    })
}

/// Station marker for rendered maps.
#[derive(Debug, Clone, Copy)]
pub struct StationOverlay {
    pub lat: f64,
    pub lon: f64,
    /// Annotated value, typically the station's period mean.
    pub value: f64,
}

/// Write the map as (a) a georeferenced raster with `NODATA` fill and
/// (b) a color-mapped image with optional station markers.
pub fn export_map(
    map: &PredictionMap,
    raster_path: &Path,
    image_path: &Path,
    overlays: &[StationOverlay],
) -> Result<()> {
    if map.values.is_empty() {
        return Err(Error::EmptyDataset("prediction map has no cells".into()));
    }
    let mut data = map.values.clone();
    for ((i, j), masked) in map.mask.indexed_iter() {
        if *masked {
            data[[i, j]] = NODATA;
        }
    }
    let mut raster = Raster::new(data, map.transform, map.crs);
    raster.nodata = Some(NODATA);
    raster.write(raster_path)?;
    render_map(map, image_path, overlays)
}

const SCALE_MIN_PX: u32 = 240;

fn render_map(map: &PredictionMap, image_path: &Path, overlays: &[StationOverlay]) -> Result<()> {
    let (rows, cols) = map.values.dim();
    let k = (SCALE_MIN_PX as usize).div_ceil(rows.max(cols)).max(1) as u32;
    let (height, width) = (rows as u32 * k, cols as u32 * k);
    let unmasked: Vec<f32> = map
        .values
        .iter()
        .zip(map.mask.iter())
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .collect();
    let (lo, hi) = unmasked
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut img = image::RgbImage::new(width, height);
    for (y, x, px) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        let (i, j) = ((y / k) as usize, (x / k) as usize);
        *px = if map.mask[[i, j]] {
            image::Rgb([40, 40, 40])
        } else {
            colormap((map.values[[i, j]] - lo) / span)
        };
    }
    for o in overlays {
        let (x, y) = project(o.lat, o.lon, &map.crs)?;
        let (r, c) = map.transform.to_pixel(x, y);
        let (cy, cx) = ((r * k as f64) as i64, (c * k as f64) as i64);
        draw_disc(&mut img, cx, cy, (k as i64 / 2).max(2));
        draw_text(&mut img, cx + 5, cy - 5, &format!("{:.1}", o.value));
    }
    img.save(image_path)
        .map_err(|e| Error::Format(format!("{}: {e}", image_path.display())))
}

/// Blue -> green -> yellow -> red ramp.
fn colormap(t: f32) -> image::Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let anchors = [
        (0.0f32, [32.0, 48.0, 160.0]),
        (0.33, [32.0, 160.0, 96.0]),
        (0.66, [224.0, 208.0, 48.0]),
        (1.0, [208.0, 48.0, 32.0]),
    ];
    for w in anchors.windows(2) {
        let ((t0, c0), (t1, c1)) = (w[0], w[1]);
        if t <= t1 {
            let f = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            return image::Rgb(std::array::from_fn(|i| {
                (c0[i] + f * (c1[i] - c0[i])) as u8
            }));
        }
    }
    image::Rgb([208, 48, 32])
}

const MARKER: image::Rgb<u8> = image::Rgb([255, 0, 0]);

fn draw_disc(img: &mut image::RgbImage, cx: i64, cy: i64, radius: i64) {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                    img.put_pixel(x as u32, y as u32, MARKER);
                }
            }
        }
    }
}

/// 3x5 glyphs for the annotation charset, one row per bit-triplet.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut image::RgbImage, x0: i64, y0: i64, text: &str) {
    let mut x = x0;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3 {
                if row & (0b100 >> dx) != 0 {
                    let (px, py) = (x + dx as i64, y0 + dy as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, MARKER);
                    }
                }
            }
        }
        x += 4;
    }
}

/// One prediction per period at a fixed location, chronological;
/// periods without data are marked absent.
pub fn predict_series(
    model: &mut Model<f32>,
    stats: &NormStats,
    available: &BTreeMap<Period, Sample>,
    periods: &[Period],
) -> Result<Vec<(Period, Option<f64>)>> {
    let mut sorted: Vec<Period> = periods.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted
        .into_iter()
        .map(|p| match available.get(&p) {
            Some(sample) => {
                let pred = predict(model, std::slice::from_ref(sample), stats)?[0];
                Ok((p, Some(pred)))
            }
            None => Ok((p, None)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::collections::BTreeMap as Map;

    #[test]
    fn plan_matches_arithmetic_examples() {
        let plan = plan_tiles((240, 240), 120, 10).unwrap();
        assert_eq!(plan.row_offsets.len(), 13);
        assert_eq!(plan.col_offsets.len(), 13);
        assert_eq!(plan.cell_dims(), (13, 13));

        let plan = plan_tiles((120, 120), 120, 10).unwrap();
        assert_eq!(plan.row_offsets, vec![0]);

        assert!(matches!(
            plan_tiles((119, 240), 120, 10),
            Err(Error::InsufficientCoverage(_))
        ));

        // clamped final window shares the last cell
        let plan = plan_tiles((125, 125), 120, 10).unwrap();
        assert_eq!(plan.row_offsets, vec![0, 5]);
        assert_eq!(plan.cell_dims(), (1, 1));
        assert_eq!(plan.cell_of(5), 0);
    }

    #[test]
    fn offsets_cover_the_interior() {
        for dim in [120usize, 131, 240, 377] {
            let plan = plan_tiles((dim, dim), 120, 10).unwrap();
            for px in 60..dim - 60 {
                assert!(
                    plan.row_offsets.iter().any(|&o| px >= o && px < o + 120),
                    "pixel {px} uncovered at dim {dim}"
                );
            }
            for w in plan.row_offsets.windows(2) {
                assert!(w[0] < w[1], "offsets not strictly increasing");
            }
        }
    }

    fn uniform_scene(size: usize, scl: u8) -> S2Scene {
        let crs = Crs::Utm { zone: 32, north: true };
        let transform = GeoTransform::new(600_000.0, 5_300_000.0, 10.0, -10.0);
        let bands = BAND_ORDER
            .iter()
            .map(|b| {
                (
                    b.to_string(),
                    Raster::new(Array2::from_elem((size, size), 1000.0), transform, crs),
                )
            })
            .collect();
        S2Scene {
            bands,
            scene_classification: Array2::from_elem((size, size), scl),
            scl_transform: transform,
            crs,
            acquisition_time: chrono::Utc.with_ymd_and_hms(2019, 6, 1, 10, 0, 0).unwrap(),
            product_id: "uniform".into(),
        }
    }

    fn uniform_grid(center: (f64, f64)) -> NO2Grid {
        let n = 24usize;
        NO2Grid {
            values: Array2::from_elem((n, n), 30.0),
            counts: Array2::from_elem((n, n), 1),
            origin: (center.0 - n as f64 * 0.05 / 2.0, center.1 - n as f64 * 0.05 / 2.0),
            cell_size: 0.05,
            period: Period::Full,
        }
    }

    fn plain_stats() -> NormStats {
        NormStats {
            image_mean: vec![0.0; 12],
            image_std: vec![1.0; 12],
            s5p_mean: Some(0.0),
            s5p_std: Some(1.0),
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    fn scene_center(scene: &S2Scene, size: usize) -> (f64, f64) {
        let t = &scene.bands["B02"].transform;
        let (x, y) = t.pixel_center(size as f64 / 2.0, size as f64 / 2.0);
        unproject(x, y, &scene.crs).unwrap()
    }

    #[test]
    fn uniform_inputs_give_a_uniform_unmasked_map() {
        let size = 140;
        let scene = uniform_scene(size, 4);
        let grid = uniform_grid(scene_center(&scene, size));
        let plan = plan_tiles((size, size), 120, 10).unwrap();
        let mut model = Model::<f32>::new(3, Variant::Fusion);
        let stats = plain_stats();
        let map = predict_map(
            &mut model,
            &stats,
            &scene,
            Some(&grid),
            &plan,
            Period::Full,
            "ckpt-test",
            0.05,
        )
        .unwrap();
        assert_eq!(map.values.dim(), (3, 3));
        assert!(map.mask.iter().all(|&m| !m));
        let first = map.values[[0, 0]];
        assert!(map.values.iter().all(|&v| v == first), "{:?}", map.values);
        assert!(first >= 0.0);
    }

    #[test]
    fn clouded_scene_yields_fully_masked_map() {
        let size = 130;
        let scene = uniform_scene(size, 9); // 9 = cloud class
        let plan = plan_tiles((size, size), 120, 10).unwrap();
        let mut model = Model::<f32>::new(3, Variant::ImageOnly);
        let map = predict_map(
            &mut model,
            &plain_stats(),
            &scene,
            None,
            &plan,
            Period::Full,
            "ckpt-test",
            0.05,
        )
        .unwrap();
        assert!(map.mask.iter().all(|&m| m));
    }

    #[test]
    fn fusion_without_grid_coverage_masks_not_fails() {
        let size = 130;
        let scene = uniform_scene(size, 4);
        // grid far away from the scene: every window lacks coverage
        let grid = uniform_grid((0.0, 0.0));
        let plan = plan_tiles((size, size), 120, 10).unwrap();
        let mut model = Model::<f32>::new(3, Variant::Fusion);
        let map = predict_map(
            &mut model,
            &plain_stats(),
            &scene,
            Some(&grid),
            &plan,
            Period::Full,
            "ckpt-test",
            0.05,
        )
        .unwrap();
        assert!(map.mask.iter().all(|&m| m));
    }

    #[test]
    fn export_round_trips_raster_values_and_draws_markers() {
        let dir = tempfile::tempdir().unwrap();
        let map = PredictionMap {
            values: Array2::from_shape_fn((4, 5), |(i, j)| 10.0 + (i * 5 + j) as f32),
            mask: Array2::from_shape_fn((4, 5), |(i, j)| i == 0 && j == 0),
            transform: GeoTransform::new(600_000.0, 5_300_000.0, 100.0, -100.0),
            crs: Crs::Utm { zone: 32, north: true },
            period: Period::Full,
            checkpoint_id: "ckpt".into(),
        };
        let rp = dir.path().join("map.rst");
        let ip = dir.path().join("map.png");
        let (lat, lon) = unproject(600_250.0, 5_299_750.0, &map.crs).unwrap();
        export_map(&map, &rp, &ip, &[StationOverlay { lat, lon, value: 12.3 }]).unwrap();

        let raster = Raster::read(&rp).unwrap();
        assert_eq!(raster.nodata, Some(NODATA));
        assert_eq!(raster.data[[0, 0]], NODATA);
        assert_eq!(raster.data[[2, 3]], map.values[[2, 3]]);

        let img = image::open(&ip).unwrap().to_rgb8();
        assert!(img.pixels().any(|p| *p == MARKER), "no marker drawn");

        let ip2 = dir.path().join("plain.png");
        export_map(&map, &dir.path().join("map2.rst"), &ip2, &[]).unwrap();
        let img2 = image::open(&ip2).unwrap().to_rgb8();
        assert!(img2.pixels().all(|p| *p != MARKER), "marker without overlay");
    }

    #[test]
    fn series_is_chronological_with_absent_markers() {
        let cfg = crate::dataset::SynthConfig {
            image_size: 48,
            ..crate::dataset::SynthConfig::new(2, 8)
        };
        let samples = crate::dataset::synth_generate(&cfg).unwrap();
        let mut available: Map<Period, Sample> = Map::new();
        let feb = Period::Month { year: 2019, month: 2 };
        let may = Period::Month { year: 2019, month: 5 };
        let jan = Period::Month { year: 2019, month: 1 };
        available.insert(feb, samples[0].clone());
        available.insert(jan, samples[1].clone());
        let mut model = Model::<f32>::with_patch_size(1, Variant::ImageOnly, 48);
        let stats = crate::dataset::compute_norm_stats(&samples).unwrap();
        let series =
            predict_series(&mut model, &stats, &available, &[may, feb, jan]).unwrap();
        assert_eq!(series.len(), 3);
        assert_eq!(series[0].0, jan);
        assert_eq!(series[1].0, feb);
        assert_eq!(series[2].0, may);
        assert!(series[0].1.is_some() && series[1].1.is_some());
        assert!(series[2].1.is_none());
        let series2 =
            predict_series(&mut model, &stats, &available, &[may, feb, jan]).unwrap();
        assert_eq!(series[0].1, series2[0].1);
    }
}
