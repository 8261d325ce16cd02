//! Image pairs, dataset manifests, tiling and geometric augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::raster::{self, Raster};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Two co-registered RGB acquisitions and their 0/1 change mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    pub t1: Raster,
    pub t2: Raster,
    pub mask: Raster,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, t1: Raster, t2: Raster, mask: Raster) -> Result<Self> {
        let p = SamplePair { id: id.into(), t1, t2, mask };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.mask.h, self.mask.w);
        if self.t1.channels != 3 || self.t2.channels != 3 || self.mask.channels != 1 {
            return Err(Error::Data(format!("{}: expected two RGB images and a single-channel mask", self.id)));
        }
        if (self.t1.h, self.t1.w) != (h, w) || (self.t2.h, self.t2.w) != (h, w) {
            return Err(Error::Data(format!(
                "{}: extents differ (t1 {}x{}, t2 {}x{}, mask {h}x{w})",
                self.id, self.t1.h, self.t1.w, self.t2.h, self.t2.w
            )));
        }
        if self.mask.data.iter().any(|&v| v > 1) {
            return Err(Error::Data(format!("{}: mask values must be 0 or 1", self.id)));
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.h, self.mask.w)
    }

    fn map_all(&self, f: impl Fn(&Raster) -> Raster) -> SamplePair {
        SamplePair { id: self.id.clone(), t1: f(&self.t1), t2: f(&self.t2), mask: f(&self.mask) }
    }
}

/// One manifest line: `id<TAB>t1<TAB>t2<TAB>mask`. Relative paths are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub mask: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Accepts a manifest file or a directory containing [`MANIFEST_NAME`].
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Data(format!("{}:{}: expected 4 tab-separated fields, got {}", path.display(), i + 1, cols.len())));
        }
        out.push(ManifestEntry { id: cols[0].to_string(), t1: base.join(cols[1]), t2: base.join(cols[2]), mask: base.join(cols[3]) });
    }
    Ok(out)
}

pub fn load_pair(e: &ManifestEntry) -> Result<SamplePair> {
    SamplePair::new(&e.id, raster::read_ppm(&e.t1)?, raster::read_ppm(&e.t2)?, raster::read_mask(&e.mask)?)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<SamplePair>> {
    read_manifest(manifest)?.iter().map(load_pair).collect()
}

/// Writes every pair under `dir` (`t1/`, `t2/`, `mask/`) with a manifest of
/// relative paths, returning the manifest path.
pub fn save_dataset(dir: &Path, pairs: &[SamplePair]) -> Result<PathBuf> {
    let mut manifest = String::new();
    for p in pairs {
        let rel = |sub: &str, ext: &str| format!("{sub}/{}.{ext}", p.id);
        let (a, b, m) = (rel("t1", "ppm"), rel("t2", "ppm"), rel("mask", "pgm"));
        raster::write_ppm(&dir.join(&a), &p.t1)?;
        raster::write_ppm(&dir.join(&b), &p.t2)?;
        raster::write_mask(&dir.join(&m), &p.mask)?;
        manifest.push_str(&format!("{}\t{a}\t{b}\t{m}\n", p.id));
    }
    let path = dir.join(MANIFEST_NAME);
    raster::write(&path, manifest.as_bytes())?;
    Ok(path)
}

/// `(rows, cols)` of the tile grid; remainders smaller than `size` are dropped.
pub fn tile_grid(h: usize, w: usize, size: usize) -> (usize, usize) {
    (h / size, w / size)
}

/// Non-overlapping `size×size` tiles in row-major order, with ids suffixed
/// `_r{row}_c{col}`. An image smaller than `size` yields no tiles.
pub fn tile(pair: &SamplePair, size: usize) -> Result<Vec<SamplePair>> {
    if size == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    let (h, w) = pair.size();
    let (rows, cols) = tile_grid(h, w, size);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut t = pair.map_all(|x| x.crop(r * size, c * size, size, size));
            t.id = format!("{}_r{r}_c{c}", pair.id);
            out.push(t);
        }
    }
    Ok(out)
}

/// Reassembles a full row-major `rows×cols` grid of equal tiles.
pub fn stitch(id: &str, tiles: &[SamplePair], rows: usize, cols: usize) -> Result<SamplePair> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::Data(format!("{} tiles cannot fill a {rows}x{cols} grid", tiles.len())));
    }
    let (th, tw) = tiles[0].size();
    if tiles.iter().any(|t| t.size() != (th, tw)) {
        return Err(Error::Data("tiles differ in size".into()));
    }
    let blank = |ch| Raster::filled(rows * th, cols * tw, ch, 0);
    let mut out = SamplePair { id: id.to_string(), t1: blank(3), t2: blank(3), mask: blank(1) };
    for (i, t) in tiles.iter().enumerate() {
        let (y, x) = ((i / cols) * th, (i % cols) * tw);
        out.t1.paste(&t.t1, y, x);
        out.t2.paste(&t.t2, y, x);
        out.mask.paste(&t.mask, y, x);
    }
    Ok(out)
}

/// A rotation by `quarter_turns·90°` counter-clockwise followed by optional
/// flips, shared by both dates and the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augmentation {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augmentation { quarter_turns: rng.gen_range(0..4), flip_h: rng.gen(), flip_v: rng.gen() }
    }

    pub fn apply_raster(&self, r: &Raster) -> Raster {
        let mut cur = r.clone();
        for _ in 0..self.quarter_turns % 4 {
            let (h, w) = (cur.h, cur.w);
            // counter-clockwise: out(y, x) = in(x, w-1-y), extents swap
            cur = cur.remap(w, h, |y, x| (x, w - 1 - y));
        }
        if self.flip_h {
            let w = cur.w;
            cur = cur.remap(cur.h, w, |y, x| (y, w - 1 - x));
        }
        if self.flip_v {
            let h = cur.h;
            cur = cur.remap(h, cur.w, |y, x| (h - 1 - y, x));
        }
        cur
    }

    pub fn apply(&self, p: &SamplePair) -> SamplePair {
        p.map_all(|r| self.apply_raster(r))
    }
}

/// Random rotation and flips drawn from `rng`.
pub fn augment<R: Rng + ?Sized>(pair: &SamplePair, rng: &mut R) -> SamplePair {
    Augmentation::sample(rng).apply(pair)
}

/// Network inputs for a batch of equally sized pairs: both dates as
/// `[N,3,H,W]` scaled to `[0,1]`, and the mask as `[N,1,H,W]`.
pub fn batch_tensors(pairs: &[&SamplePair]) -> Result<(Tensor, Tensor, Tensor)> {
    let Some(first) = pairs.first() else {
        return Err(Error::Data("empty batch".into()));
    };
    let (h, w) = first.size();
    if let Some(p) = pairs.iter().find(|p| p.size() != (h, w)) {
        return Err(Error::Data(format!("{} is {:?}, batch is {h}x{w}", p.id, p.size())));
    }
    let n = pairs.len();
    let planar = |r: &Raster, out: &mut Vec<f64>| {
        for c in 0..3 {
            out.extend(r.data.iter().skip(c).step_by(3).map(|&v| v as f64 / 255.0));
        }
    };
    let (mut a, mut b, mut m) = (Vec::new(), Vec::new(), Vec::new());
    for p in pairs {
        planar(&p.t1, &mut a);
        planar(&p.t2, &mut b);
        m.extend(p.mask.data.iter().map(|&v| v as f64));
    }
    Ok((Tensor::new(vec![n, 3, h, w], a)?, Tensor::new(vec![n, 3, h, w], b)?, Tensor::new(vec![n, 1, h, w], m)?))
}
