//! On-disk formats: the binary pyramid dump and PGM heatmaps.
//!
//! Pyramid dump layout (`DFP1`):
//!
//! ```text
//! DFP1 <levels>\n
//! <channels> <height> <width> <stride>\n      (one line per level)
//! <raw little-endian f32 values>              (C*H*W per level, concatenated)
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, Grid};

const MAGIC: &str = "DFP1";

pub fn write_pyramid(pyramid: &FeaturePyramid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("{MAGIC} {}\n", pyramid.len()).as_bytes());
    for s in 0..pyramid.len() {
        let g = pyramid.level(s);
        out.extend_from_slice(
            format!(
                "{} {} {} {}\n",
                g.channels(),
                g.height(),
                g.width(),
                pyramid.stride(s)
            )
            .as_bytes(),
        );
    }
    for s in 0..pyramid.len() {
        for &v in pyramid.level(s).values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_pyramid(path: &Path, pyramid: &FeaturePyramid) -> Result<()> {
    let bytes = write_pyramid(pyramid);
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let start = self.pos;
        let rest = &self.data[self.pos.min(self.data.len())..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start, "missing newline"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::parse(start, "header is not UTF-8"))
    }

    fn f32_values(&mut self, count: usize) -> Result<Vec<f64>> {
        let need = count * 4;
        if self.data.len() - self.pos < need {
            return Err(Error::parse(
                self.pos,
                format!(
                    "expected {need} bytes of float data, found {}",
                    self.data.len() - self.pos
                ),
            ));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let at = self.pos + i * 4;
            let bytes: [u8; 4] = self.data[at..at + 4].try_into().unwrap();
            out.push(f32::from_le_bytes(bytes) as f64);
        }
        self.pos += need;
        Ok(out)
    }
}

pub fn read_pyramid(data: &[u8]) -> Result<FeaturePyramid> {
    let mut cur = Cursor { data, pos: 0 };
    let header = cur.line()?;
    let mut parts = header.split_whitespace();
    match parts.next() {
        Some(m) if m == MAGIC => {}
        _ => return Err(Error::parse(0, format!("bad magic, want `{MAGIC}`"))),
    }
    let levels: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(0, "bad level count"))?;
    if levels == 0 {
        return Err(Error::parse(0, "pyramid must have at least one level"));
    }

    let mut shapes = Vec::with_capacity(levels);
    let mut strides = Vec::with_capacity(levels);
    for _ in 0..levels {
        let at = cur.pos;
        let line = cur.line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                at,
                format!("level header wants 4 fields, got {}", fields.len()),
            ));
        }
        let c: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(at, "bad channel count"))?;
        let h: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(at, "bad height"))?;
        let w: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(at, "bad width"))?;
        let stride: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(at, "bad stride"))?;
        shapes.push((c, h, w));
        strides.push(stride);
    }

    let mut grids = Vec::with_capacity(levels);
    for &(c, h, w) in &shapes {
        let at = cur.pos;
        let values = cur.f32_values(c * h * w)?;
        grids.push(
            Grid::new(c, h, w, values)
                .map_err(|e| Error::parse(at, format!("bad grid data: {e}")))?,
        );
    }
    if cur.pos != data.len() {
        return Err(Error::parse(cur.pos, "trailing bytes after pyramid data"));
    }
    FeaturePyramid::new(grids, strides).map_err(|e| Error::parse(0, format!("{e}")))
}

pub fn load_pyramid(path: &Path) -> Result<FeaturePyramid> {
    let data = std::fs::read(path)?;
    read_pyramid(&data)
}

/// Binary 8-bit PGM, max-normalized. Values below zero clamp to black.
pub fn write_pgm(grid_w: usize, grid_h: usize, values: &[f64]) -> Vec<u8> {
    debug_assert_eq!(values.len(), grid_w * grid_h);
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(32 + values.len());
    out.extend_from_slice(format!("P5\n{grid_w} {grid_h}\n255\n").as_bytes());
    for &v in values {
        let byte = if max > 0.0 {
            ((v.max(0.0) / max) * 255.0).round() as u8
        } else {
            0
        };
        out.push(byte);
    }
    out
}

/// Writes one PGM per level; multi-channel grids collapse to the per-cell
/// channel max.
pub fn save_heatmaps(dir: &Path, stem: &str, pyramid: &FeaturePyramid) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for s in 0..pyramid.len() {
        let g = pyramid.level(s);
        let (h, w) = (g.height(), g.width());
        let mut flat = vec![f64::NEG_INFINITY; h * w];
        for c in 0..g.channels() {
            for y in 0..h {
                for x in 0..w {
                    let v = g.get(c, y, x);
                    if v > flat[y * w + x] {
                        flat[y * w + x] = v;
                    }
                }
            }
        }
        let name = format!("{stem}_level{s}.pgm");
        let mut file = std::fs::File::create(dir.join(&name))?;
        file.write_all(&write_pgm(w, h, &flat))?;
        written.push(name);
    }
    Ok(written)
}
