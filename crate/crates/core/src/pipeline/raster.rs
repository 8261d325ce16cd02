//! 8-bit rasters and their binary PNM encodings (P5 gray, P6 RGB), plus
//! probability maps with a lossless 32-bit sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Row-major, channel-interleaved 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w * channels {
            return Err(Error::Data(format!("{} bytes do not fill a {h}x{w}x{channels} raster", data.len())));
        }
        Ok(Raster { h, w, channels, data })
    }

    pub fn filled(h: usize, w: usize, channels: usize, value: u8) -> Self {
        Raster { h, w, channels, data: vec![value; h * w * channels] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.w + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [u8] {
        let i = (y * self.w + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// The `h×w` window at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Raster {
        let mut data = Vec::with_capacity(h * w * self.channels);
        for r in y..y + h {
            let start = (r * self.w + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Raster { h, w, channels: self.channels, data }
    }

    /// Copies `src` into this raster at `(y, x)`.
    pub fn paste(&mut self, src: &Raster, y: usize, x: usize) {
        for r in 0..src.h {
            let dst = ((y + r) * self.w + x) * self.channels;
            let s = r * src.w * src.channels;
            self.data[dst..dst + src.w * src.channels].copy_from_slice(&src.data[s..s + src.w * src.channels]);
        }
    }

    /// Output pixel `(y, x)` takes input pixel `map(y, x)`; output extent `h×w`.
    pub fn remap(&self, h: usize, w: usize, map: impl Fn(usize, usize) -> (usize, usize)) -> Raster {
        let mut out = Raster::filled(h, w, self.channels, 0);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y, x);
                out.pixel_mut(y, x).copy_from_slice(self.pixel(sy, sx));
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centers, edge-clamped.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Raster {
        let mut out = Raster::filled(h, w, self.channels, 0);
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        let coord = |o: usize, s: f64, n: usize| {
            let f = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i = f.floor() as usize;
            (i, (i + 1).min(n - 1), f - i as f64)
        };
        for y in 0..h {
            let (y0, y1, fy) = coord(y, sy, self.h);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, sx, self.w);
                for c in 0..self.channels {
                    let p = |yy: usize, xx: usize| self.pixel(yy, xx)[c] as f64;
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out.pixel_mut(y, x)[c] = (top * (1.0 - fy) + bot * fy).round() as u8;
                }
            }
        }
        out
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a PNM header into its magic and three numeric fields, returning
/// the offset of the first raster byte.
fn parse_header(bytes: &[u8], path: &Path) -> Result<(String, [usize; 3], usize)> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err(bad("missing raster data"));
    }
    let mut nums = [0usize; 3];
    for (n, f) in nums.iter_mut().zip(&fields[1..]) {
        *n = f.parse().map_err(|_| bad(&format!("bad header field {f:?}")))?;
    }
    Ok((fields[0].clone(), nums, i + 1))
}

fn decode(bytes: &[u8], path: &Path, magic: &str, channels: usize) -> Result<(Raster, usize)> {
    let (m, [w, h, maxval], off) = parse_header(bytes, path)?;
    if m != magic {
        return Err(Error::Data(format!("{}: expected {magic} file, found {m:?}", path.display())));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    let n = h * w * channels;
    if bytes.len() < off + n {
        return Err(Error::Data(format!("{}: raster truncated ({} of {n} bytes)", path.display(), bytes.len() - off)));
    }
    Ok((Raster::new(h, w, channels, bytes[off..off + n].to_vec())?, maxval))
}

fn encode(r: &Raster, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", r.w, r.h).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    Ok(decode(&read(path)?, path, "P6", 3)?.0)
}

pub fn write_ppm(path: &Path, r: &Raster) -> Result<()> {
    if r.channels != 3 {
        return Err(Error::Data(format!("PPM needs 3 channels, raster has {}", r.channels)));
    }
    write(path, &encode(r, "P6"))
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    Ok(decode(&read(path)?, path, "P5", 1)?.0)
}

pub fn write_pgm(path: &Path, r: &Raster) -> Result<()> {
    if r.channels != 1 {
        return Err(Error::Data(format!("PGM needs 1 channel, raster has {}", r.channels)));
    }
    write(path, &encode(r, "P5"))
}

/// Reads a change mask stored as 0/255 (or 0/1 with maxval 1) into 0/1.
pub fn read_mask(path: &Path) -> Result<Raster> {
    let (mut r, maxval) = decode(&read(path)?, path, "P5", 1)?;
    let on = if maxval == 1 { 1 } else { 255 };
    for v in &mut r.data {
        *v = match *v {
            0 => 0,
            x if x == on => 1,
            x => return Err(Error::Data(format!("{}: mask value {x} is neither 0 nor {on}", path.display()))),
        };
    }
    Ok(r)
}

/// Writes a 0/1 mask as a 0/255 PGM.
pub fn write_mask(path: &Path, m: &Raster) -> Result<()> {
    let scaled = Raster { data: m.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect(), ..m.clone() };
    write_pgm(path, &scaled)
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("f32")
}

/// Writes `prob` as an 8-bit preview PGM and as raw little-endian f32
/// values next to it (same stem, `.f32`).
pub fn write_probability(pgm: &Path, h: usize, w: usize, prob: &[f64]) -> Result<()> {
    let preview = prob.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_pgm(pgm, &Raster::new(h, w, 1, preview)?)?;
    let raw: Vec<u8> = prob.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
    write(&sidecar_path(pgm), &raw)
}

/// Reads the sidecar of a probability map; extents come from the PGM.
pub fn read_probability(pgm: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let preview = read_pgm(pgm)?;
    let side = sidecar_path(pgm);
    let raw = read(&side)?;
    if raw.len() != preview.h * preview.w * 4 {
        return Err(Error::Data(format!("{}: {} bytes, expected {}", side.display(), raw.len(), preview.h * preview.w * 4)));
    }
    let prob = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Ok((preview.h, preview.w, prob))
}
