//! Coordinate handling: axis-aligned geo-transforms and the WGS84/UTM
//! projection used by Sentinel-2 scenes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// WGS84 ellipsoid.
const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// UTM central-meridian scale factor and false easting/northing.
const UTM_K0: f64 = 0.9996;
const UTM_FALSE_EASTING: f64 = 500_000.0;
const UTM_FALSE_NORTHING_S: f64 = 10_000_000.0;

/// Coordinate reference systems understood by the rasters in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Crs {
    /// Plain latitude/longitude degrees (EPSG:4326). `x` is longitude.
    Geographic,
    /// Universal Transverse Mercator on WGS84, meters.
    Utm { zone: u8, north: bool },
}

impl Crs {
    pub fn epsg(&self) -> u32 {
        match self {
            Crs::Geographic => 4326,
            Crs::Utm { zone, north: true } => 32600 + *zone as u32,
            Crs::Utm { zone, north: false } => 32700 + *zone as u32,
        }
    }
}

/// Axis-aligned affine transform from pixel indices to projected coordinates.
/// `pixel_height` is negative for the usual north-up rasters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_width: f64, pixel_height: f64) -> Self {
        GeoTransform {
            origin_x,
            origin_y,
            pixel_width,
            pixel_height,
        }
    }

    /// Center of pixel (row, col) in projected coordinates.
    pub fn pixel_center(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_x + (col + 0.5) * self.pixel_width,
            self.origin_y + (row + 0.5) * self.pixel_height,
        )
    }

    /// Fractional pixel indices (row, col) whose center lies at (x, y).
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.origin_y) / self.pixel_height - 0.5,
            (x - self.origin_x) / self.pixel_width - 0.5,
        )
    }

    /// Transform for the same footprint resampled by an integer factor
    /// (factor > 1 means finer pixels).
    pub fn upsampled(&self, factor: usize) -> GeoTransform {
        GeoTransform {
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_width: self.pixel_width / factor as f64,
            pixel_height: self.pixel_height / factor as f64,
        }
    }
}

/// UTM zone containing a longitude, with the usual 6-degree bands.
pub fn utm_zone(lon: f64) -> u8 {
    let z = ((lon + 180.0) / 6.0).floor() as i32 + 1;
    z.clamp(1, 60) as u8
}

/// Forward transverse Mercator (Snyder series) from latitude/longitude
/// degrees to UTM easting/northing in meters.
pub fn utm_forward(lat: f64, lon: f64, zone: u8, north: bool) -> Result<(f64, f64)> {
    if !(1..=60).contains(&zone) {
        return Err(Error::Argument(format!("UTM zone {zone} out of range")));
    }
    if !(-80.0..=84.0).contains(&lat) {
        return Err(Error::Argument(format!(
            "latitude {lat} outside UTM validity range"
        )));
    }
    let lon0 = (zone as f64 - 1.0) * 6.0 - 180.0 + 3.0;
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let ep2 = e2 / (1.0 - e2);

    let phi = lat.to_radians();
    let dlam = (lon - lon0).to_radians();
    let sin_phi = phi.sin();
    let cos_phi = phi.cos();
    let tan_phi = phi.tan();

    let n = WGS84_A / (1.0 - e2 * sin_phi * sin_phi).sqrt();
    let t = tan_phi * tan_phi;
    let c = ep2 * cos_phi * cos_phi;
    let a_term = cos_phi * dlam;

    let m = meridian_arc(phi, e2);

    let easting = UTM_K0
        * n
        * (a_term
            + (1.0 - t + c) * a_term.powi(3) / 6.0
            + (5.0 - 18.0 * t + t * t + 72.0 * c - 58.0 * ep2) * a_term.powi(5) / 120.0)
        + UTM_FALSE_EASTING;

    let mut northing = UTM_K0
        * (m + n
            * tan_phi
            * (a_term * a_term / 2.0
                + (5.0 - t + 9.0 * c + 4.0 * c * c) * a_term.powi(4) / 24.0
                + (61.0 - 58.0 * t + t * t + 600.0 * c - 330.0 * ep2) * a_term.powi(6) / 720.0));
    if !north {
        northing += UTM_FALSE_NORTHING_S;
    }
    Ok((easting, northing))
}

/// Inverse transverse Mercator, UTM meters back to latitude/longitude degrees.
pub fn utm_inverse(easting: f64, northing: f64, zone: u8, north: bool) -> Result<(f64, f64)> {
    if !(1..=60).contains(&zone) {
        return Err(Error::Argument(format!("UTM zone {zone} out of range")));
    }
    let lon0 = (zone as f64 - 1.0) * 6.0 - 180.0 + 3.0;
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let ep2 = e2 / (1.0 - e2);
    let e1 = (1.0 - (1.0 - e2).sqrt()) / (1.0 + (1.0 - e2).sqrt());

    let x = easting - UTM_FALSE_EASTING;
    let y = if north {
        northing
    } else {
        northing - UTM_FALSE_NORTHING_S
    };

    let m = y / UTM_K0;
    let mu = m
        / (WGS84_A * (1.0 - e2 / 4.0 - 3.0 * e2 * e2 / 64.0 - 5.0 * e2 * e2 * e2 / 256.0));
    let phi1 = mu
        + (3.0 * e1 / 2.0 - 27.0 * e1.powi(3) / 32.0) * (2.0 * mu).sin()
        + (21.0 * e1 * e1 / 16.0 - 55.0 * e1.powi(4) / 32.0) * (4.0 * mu).sin()
        + (151.0 * e1.powi(3) / 96.0) * (6.0 * mu).sin()
        + (1097.0 * e1.powi(4) / 512.0) * (8.0 * mu).sin();

    let sin1 = phi1.sin();
    let cos1 = phi1.cos();
    let tan1 = phi1.tan();
    let c1 = ep2 * cos1 * cos1;
    let t1 = tan1 * tan1;
    let n1 = WGS84_A / (1.0 - e2 * sin1 * sin1).sqrt();
    let r1 = WGS84_A * (1.0 - e2) / (1.0 - e2 * sin1 * sin1).powf(1.5);
    let d = x / (n1 * UTM_K0);

    let lat = phi1
        - (n1 * tan1 / r1)
            * (d * d / 2.0
                - (5.0 + 3.0 * t1 + 10.0 * c1 - 4.0 * c1 * c1 - 9.0 * ep2) * d.powi(4) / 24.0
                + (61.0 + 90.0 * t1 + 298.0 * c1 + 45.0 * t1 * t1
                    - 252.0 * ep2
                    - 3.0 * c1 * c1)
                    * d.powi(6)
                    / 720.0);
    let lon = lon0.to_radians()
        + (d - (1.0 + 2.0 * t1 + c1) * d.powi(3) / 6.0
            + (5.0 - 2.0 * c1 + 28.0 * t1 - 3.0 * c1 * c1 + 8.0 * ep2 + 24.0 * t1 * t1)
                * d.powi(5)
                / 120.0)
            / cos1;

    Ok((lat.to_degrees(), lon.to_degrees()))
}

fn meridian_arc(phi: f64, e2: f64) -> f64 {
    WGS84_A
        * ((1.0 - e2 / 4.0 - 3.0 * e2 * e2 / 64.0 - 5.0 * e2 * e2 * e2 / 256.0) * phi
            - (3.0 * e2 / 8.0 + 3.0 * e2 * e2 / 32.0 + 45.0 * e2 * e2 * e2 / 1024.0)
                * (2.0 * phi).sin()
            + (15.0 * e2 * e2 / 256.0 + 45.0 * e2 * e2 * e2 / 1024.0) * (4.0 * phi).sin()
            - (35.0 * e2 * e2 * e2 / 3072.0) * (6.0 * phi).sin())
}

/// Project a latitude/longitude into a raster CRS.
pub fn project(lat: f64, lon: f64, crs: &Crs) -> Result<(f64, f64)> {
    match crs {
        Crs::Geographic => Ok((lon, lat)),
        Crs::Utm { zone, north } => utm_forward(lat, lon, *zone, *north),
    }
}

/// Inverse of `project`: raster CRS coordinates back to (lat, lon).
pub fn unproject(x: f64, y: f64, crs: &Crs) -> Result<(f64, f64)> {
    match crs {
        Crs::Geographic => Ok((y, x)),
        Crs::Utm { zone, north } => utm_inverse(x, y, *zone, *north),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn project_unproject_round_trip() {
        let crs = Crs::Utm { zone: 32, north: true };
        let (x, y) = project(47.3, 10.2, &crs).unwrap();
        let (lat, lon) = unproject(x, y, &crs).unwrap();
        assert_relative_eq!(lat, 47.3, epsilon = 1e-7);
        assert_relative_eq!(lon, 10.2, epsilon = 1e-7);
    }

    #[test]
    fn central_meridian_maps_to_false_easting() {
        // zone 32 central meridian is 9 deg E
        let (e, n) = utm_forward(48.0, 9.0, 32, true).unwrap();
        assert_relative_eq!(e, 500_000.0, epsilon = 1e-6);
        // northing = k0 * meridian arc, strictly positive and < pole arc
        assert!(n > 5_000_000.0 && n < 5_400_000.0);
    }

    #[test]
    fn equator_has_zero_northing() {
        let (_, n) = utm_forward(0.0, 9.3, 32, true).unwrap();
        assert_relative_eq!(n, 0.0, epsilon = 1e-3);
    }

    #[test]
    fn forward_inverse_round_trip() {
        for &(lat, lon) in &[
            (48.1351, 11.5820),
            (52.5200, 13.4050),
            (40.4168, -3.7038),
            (-33.8688, 151.2093),
            (63.0, 10.0),
        ] {
            let zone = utm_zone(lon);
            let north = lat >= 0.0;
            let (e, n) = utm_forward(lat, lon, zone, north).unwrap();
            let (lat2, lon2) = utm_inverse(e, n, zone, north).unwrap();
            assert_relative_eq!(lat, lat2, epsilon = 1e-7);
            assert_relative_eq!(lon, lon2, epsilon = 1e-7);
        }
    }

    #[test]
    fn southern_hemisphere_false_northing() {
        let (_, n) = utm_forward(-33.8688, 151.2093, 56, false).unwrap();
        assert!(n > 6_000_000.0 && n < 10_000_000.0);
    }

    #[test]
    fn zone_arithmetic() {
        assert_eq!(utm_zone(-180.0), 1);
        assert_eq!(utm_zone(9.0), 32);
        assert_eq!(utm_zone(11.5), 32);
        assert_eq!(utm_zone(179.9), 60);
    }

    #[test]
    fn geo_transform_round_trip() {
        let gt = GeoTransform::new(600_000.0, 5_300_000.0, 10.0, -10.0);
        let (x, y) = gt.pixel_center(3.0, 7.0);
        let (r, c) = gt.to_pixel(x, y);
        assert_relative_eq!(r, 3.0, epsilon = 1e-9);
        assert_relative_eq!(c, 7.0, epsilon = 1e-9);
    }
}
