//! Shared single-file container: magic, version, JSON header, then one or
//! more raw little-endian f32 payload blocks. Used by tile, sample and
//! checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

pub struct ContainerWriter {
    w: BufWriter<File>,
    path: std::path::PathBuf,
}

impl ContainerWriter {
    pub fn create<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H) -> Result<Self> {
        let json = serde_json::to_vec(header)
            .map_err(|e| Error::Format(format!("container header encode: {e}")))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(magic).map_err(io)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        Ok(ContainerWriter {
            w,
            path: path.to_path_buf(),
        })
    }

    /// Append one payload block: u64 LE element count, then LE f32 values.
    pub fn write_block(&mut self, values: &[f32]) -> Result<()> {
        let io = |e| Error::io(&self.path, e);
        self.w
            .write_all(&(values.len() as u64).to_le_bytes())
            .map_err(io)?;
        for v in values {
            self.w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub struct ContainerReader {
    r: BufReader<File>,
    path: std::path::PathBuf,
}

impl ContainerReader {
    pub fn open<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(Self, H)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut m = [0u8; 4];
        r.read_exact(&mut m).map_err(io)?;
        if &m != magic {
            return Err(Error::Format(format!(
                "{}: wrong container magic (expected {:?})",
                path.display(),
                std::str::from_utf8(magic).unwrap_or("?")
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported container version {version}",
                path.display()
            )));
        }
        r.read_exact(&mut b4).map_err(io)?;
        let hlen = u32::from_le_bytes(b4) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(io)?;
        let header: H = serde_json::from_slice(&hbuf)
            .map_err(|e| Error::Format(format!("{}: container header: {e}", path.display())))?;
        Ok((
            ContainerReader {
                r,
                path: path.to_path_buf(),
            },
            header,
        ))
    }

    pub fn read_block(&mut self) -> Result<Vec<f32>> {
        let io = |e| Error::io(&self.path, e);
        let mut b8 = [0u8; 8];
        self.r.read_exact(&mut b8).map_err(io)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut raw = vec![0u8; n * 4];
        self.r.read_exact(&mut raw).map_err(io)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
