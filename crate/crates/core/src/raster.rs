//! Single-band raster container with geo-referencing, plus the shared
//! corner-aligned bilinear sampling routines.
//!
//! On-disk format (`.rst`): 4-byte magic `AQRS`, u32 LE version, u32 LE
//! header length, JSON header (rows, cols, transform, crs, nodata), then
//! row-major 32-bit LE floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Crs, GeoTransform};

const MAGIC: &[u8; 4] = b"AQRS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RasterHeader {
    rows: usize,
    cols: usize,
    transform: GeoTransform,
    crs: Crs,
    nodata: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub data: Array2<f32>,
    pub transform: GeoTransform,
    pub crs: Crs,
    pub nodata: Option<f32>,
}

impl Raster {
    pub fn new(data: Array2<f32>, transform: GeoTransform, crs: Crs) -> Self {
        Raster {
            data,
            transform,
            crs,
            nodata: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = RasterHeader {
            rows: self.data.nrows(),
            cols: self.data.ncols(),
            transform: self.transform,
            crs: self.crs,
            nodata: self.nodata,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("raster header encode: {e}")))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Raster> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a raster container", path.display())));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(io)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported raster version {version}",
                path.display()
            )));
        }
        r.read_exact(&mut buf4).map_err(io)?;
        let hlen = u32::from_le_bytes(buf4) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(io)?;
        let header: RasterHeader = serde_json::from_slice(&hbuf)
            .map_err(|e| Error::Format(format!("{}: raster header: {e}", path.display())))?;
        let n = header.rows * header.cols;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let data = Array2::from_shape_vec((header.rows, header.cols), values)
            .map_err(|e| Error::Format(format!("raster payload shape: {e}")))?;
        Ok(Raster {
            data,
            transform: header.transform,
            crs: header.crs,
            nodata: header.nodata,
        })
    }
}

/// Bilinear sample of `data` at fractional index (row, col). Indices are
/// clamped to the valid range, so constants are preserved and output is
/// bounded by the input extrema.
pub fn bilinear_sample<F: ndarray::NdFloat>(data: &Array2<F>, row: f64, col: f64) -> F {
    let (nr, nc) = data.dim();
    let r = row.clamp(0.0, (nr - 1) as f64);
    let c = col.clamp(0.0, (nc - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(nr - 1);
    let c1 = (c0 + 1).min(nc - 1);
    let fr = F::from(r - r0 as f64).unwrap();
    let fc = F::from(c - c0 as f64).unwrap();
    let one = F::one();
    let top = data[[r0, c0]] * (one - fc) + data[[r0, c1]] * fc;
    let bot = data[[r1, c0]] * (one - fc) + data[[r1, c1]] * fc;
    top * (one - fr) + bot * fr
}

/// Bilinear upsampling by an integer factor. Output pixel `i` samples the
/// input at coordinate `i / factor`, so sample grids of the input and
/// output share their top-left corner: factor 1 is the identity and
/// upsampling commutes with cropping on interior windows. The trailing
/// `factor - 1` rows/cols extrapolate by edge replication (clamping).
pub fn upsample_bilinear(raster: &Array2<f32>, factor: usize) -> Result<Array2<f32>> {
    if factor == 0 {
        return Err(Error::Argument("upsample factor must be >= 1".into()));
    }
    let (nr, nc) = raster.dim();
    if nr == 0 || nc == 0 {
        return Err(Error::Argument("cannot upsample an empty raster".into()));
    }
    let (or, oc) = (nr * factor, nc * factor);
    let inv = 1.0 / factor as f64;
    let mut out = Array2::zeros((or, oc));
    for i in 0..or {
        let src_r = i as f64 * inv;
        for j in 0..oc {
            let src_c = j as f64 * inv;
            out[[i, j]] = bilinear_sample(raster, src_r, src_c);
        }
    }
    Ok(out)
}
