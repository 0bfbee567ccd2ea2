//! Binary environment container.
//!
//! All integers are little-endian `u32`, all intensities little-endian `f32`.
//!
//! ```text
//! magic            8 bytes  "SNAVENV\0"
//! version          u32      1
//! rows, cols       u32 x 2
//! frames_per_bin   u32
//! obs_height       u32
//! obs_width        u32
//! id_len           u32
//! subject_id       id_len bytes of UTF-8
//! goal_mask        rows*cols bytes, 0 or 1, row-major
//! frames           rows*cols*frames_per_bin*obs_height*obs_width f32,
//!                  bin-major (row-major over the grid), then frame, then
//!                  row-major pixels
//! crc32            u32 over every preceding byte
//! ```

use std::path::Path;

use super::{GridEnvironment, GridSpec};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, Reader, Writer};

pub const CONTAINER_MAGIC: &[u8; 8] = b"SNAVENV\0";
pub const CONTAINER_VERSION: u32 = 1;

impl GridEnvironment {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.spec();
        let mut w = Writer::new();
        w.bytes(CONTAINER_MAGIC);
        w.u32(CONTAINER_VERSION);
        for v in [
            spec.rows,
            spec.cols,
            spec.frames_per_bin,
            spec.obs_height,
            spec.obs_width,
        ] {
            w.len_u32(v);
        }
        w.len_u32(self.subject_id().len());
        w.bytes(self.subject_id().as_bytes());
        let mask: Vec<u8> = self.goal_mask().iter().map(|&g| g as u8).collect();
        w.bytes(&mask);
        w.f32s(self.frames());
        w.finish()
    }

    /// Parses and validates a container; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        parse(bytes).map_err(|msg| Error::load(origin, msg))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<GridEnvironment, String> {
    let mut r = Reader::new(bytes, "environment container");
    if r.take(8)? != CONTAINER_MAGIC {
        return Err("not an environment container (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(format!(
            "unsupported container version {version} (expected {CONTAINER_VERSION})"
        ));
    }
    let spec = GridSpec {
        rows: r.usize()?,
        cols: r.usize()?,
        frames_per_bin: r.usize()?,
        obs_height: r.usize()?,
        obs_width: r.usize()?,
    };
    spec.validate().map_err(|e| e.to_string())?;
    let id_len = r.usize()?;
    let subject_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|e| format!("subject id is not UTF-8: {e}"))?
        .to_owned();
    let mask_bytes = r.take(spec.num_bins())?;
    let mut goal_mask = Vec::with_capacity(mask_bytes.len());
    for (i, &b) in mask_bytes.iter().enumerate() {
        match b {
            0 => goal_mask.push(false),
            1 => goal_mask.push(true),
            other => return Err(format!("goal mask byte {i} is {other}, expected 0 or 1")),
        }
    }
    let n_values = spec
        .num_bins()
        .checked_mul(spec.frames_per_bin)
        .and_then(|v| v.checked_mul(spec.frame_len()))
        .ok_or("frame bank size overflows")?;
    // Frame bytes plus the 4-byte checksum must be exactly what remains.
    let remaining = r.remaining();
    if remaining != n_values * 4 + 4 {
        let frame_bytes = remaining.saturating_sub(4);
        return Err(format!(
            "frame bank holds {frame_bytes} bytes, header declares {} bins x {} frames x {}x{} \
             ({} bytes)",
            spec.num_bins(),
            spec.frames_per_bin,
            spec.obs_height,
            spec.obs_width,
            n_values * 4
        ));
    }
    let frames = r.f32s(n_values)?;
    r.finish()?;
    GridEnvironment::new(spec, subject_id, goal_mask, frames).map_err(|e| e.to_string())
}
