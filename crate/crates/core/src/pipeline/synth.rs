//! Procedural change-detection pairs: a textured background shared by both
//! dates, with rectangles and ellipses appearing or disappearing between
//! them. Background channels stay in [60, 160] and shape colors have at
//! least one channel outside that range, so every painted pixel differs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::SamplePair;
use super::raster::Raster;
use crate::network::MAX_STRIDE;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { y: usize, x: usize, h: usize, w: usize },
    Ellipse { y: usize, x: usize, h: usize, w: usize },
}

impl Shape {
    /// Bounding box `(y, x, h, w)`.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        match *self {
            Shape::Rect { y, x, h, w } | Shape::Ellipse { y, x, h, w } => (y, x, h, w),
        }
    }

    pub fn contains(&self, py: usize, px: usize) -> bool {
        let (y, x, h, w) = self.bounds();
        if py < y || px < x || py >= y + h || px >= x + w {
            return false;
        }
        match self {
            Shape::Rect { .. } => true,
            Shape::Ellipse { .. } => {
                let dy = (py - y) as f64 + 0.5 - h as f64 / 2.0;
                let dx = (px - x) as f64 + 0.5 - w as f64 / 2.0;
                (dy / (h as f64 / 2.0)).powi(2) + (dx / (w as f64 / 2.0)).powi(2) <= 1.0
            }
        }
    }

    /// Pixels covered, in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let (y, x, h, w) = self.bounds();
        (y..y + h).flat_map(|py| (x..x + w).map(move |px| (py, px))).filter(|&(py, px)| self.contains(py, px)).collect()
    }

    fn overlaps(&self, other: &Shape, gap: usize) -> bool {
        let (y0, x0, h0, w0) = self.bounds();
        let (y1, x1, h1, w1) = other.bounds();
        y0 < y1 + h1 + gap && y1 < y0 + h0 + gap && x0 < x1 + w1 + gap && x1 < x0 + w0 + gap
    }
}

/// Where a shape is painted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Presence {
    /// Only in the second date (construction).
    Added,
    /// Only in the first date (demolition).
    Removed,
    /// In both dates; not a change.
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placed {
    pub shape: Shape,
    pub presence: Presence,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub min_changes: usize,
    pub max_changes: usize,
    pub max_static: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { min_changes: 1, max_changes: 3, max_static: 2 }
    }
}

pub fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % MAX_STRIDE != 0 {
        return Err(Error::Config(format!("size {size} violates the network contract: tiles must be a positive multiple of {MAX_STRIDE}")));
    }
    Ok(())
}

fn background<R: Rng>(size: usize, rng: &mut R) -> Raster {
    let mut r = Raster::filled(size, size, 3, 0);
    let waves: Vec<[f64; 4]> = (0..3 * 3)
        .map(|_| [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(5.0..15.0)])
        .collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(90.0..130.0));
    let tau = std::f64::consts::TAU / size as f64;
    for y in 0..size {
        for x in 0..size {
            let px = r.pixel_mut(y, x);
            for c in 0..3 {
                let mut v = base[c] + rng.gen_range(-4.0..4.0);
                for &[fy, fx, ph, amp] in &waves[c * 3..c * 3 + 3] {
                    v += amp * (tau * (fy * y as f64 + fx * x as f64) + ph).sin();
                }
                px[c] = v.clamp(60.0, 160.0).round() as u8;
            }
        }
    }
    r
}

fn shape_color<R: Rng>(rng: &mut R) -> [u8; 3] {
    let mut c: [u8; 3] = std::array::from_fn(|_| rng.gen());
    let k = rng.gen_range(0..3);
    c[k] = if rng.gen() { rng.gen_range(0..=30) } else { rng.gen_range(200..=255) };
    c
}

fn place<R: Rng>(size: usize, taken: &[Placed], rng: &mut R) -> Option<Shape> {
    let lo = (size / 8).max(2);
    let hi = (size / 3).max(lo + 1);
    for _ in 0..100 {
        let h = rng.gen_range(lo..hi);
        let w = rng.gen_range(lo..hi);
        let y = rng.gen_range(0..=size - h);
        let x = rng.gen_range(0..=size - w);
        let s = if rng.gen() { Shape::Rect { y, x, h, w } } else { Shape::Ellipse { y, x, h, w } };
        if taken.iter().all(|p| !p.shape.overlaps(&s, 1)) {
            return Some(s);
        }
    }
    None
}

/// One pair with `changes` changed shapes (fewer if they cannot be placed
/// without overlap) and up to `statics` unchanged ones. Returns the shapes
/// actually drawn.
pub fn synth_pair<R: Rng>(id: &str, size: usize, changes: usize, statics: usize, rng: &mut R) -> Result<(SamplePair, Vec<Placed>)> {
    let bg = background(size, rng);
    let (mut t1, mut t2) = (bg.clone(), bg);
    let mut mask = Raster::filled(size, size, 1, 0);
    let mut placed: Vec<Placed> = Vec::new();
    for i in 0..changes + statics {
        let Some(shape) = place(size, &placed, rng) else { continue };
        let presence = match (i < changes, rng.gen::<bool>()) {
            (false, _) => Presence::Static,
            (true, true) => Presence::Added,
            (true, false) => Presence::Removed,
        };
        let color = shape_color(rng);
        for (y, x) in shape.pixels() {
            if presence != Presence::Added {
                t1.pixel_mut(y, x).copy_from_slice(&color);
            }
            if presence != Presence::Removed {
                t2.pixel_mut(y, x).copy_from_slice(&color);
            }
            if presence != Presence::Static {
                mask.pixel_mut(y, x)[0] = 1;
            }
        }
        placed.push(Placed { shape, presence, color });
    }
    Ok((SamplePair::new(id, t1, t2, mask)?, placed))
}

/// `n` pairs of `size×size`, fully determined by `seed`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SamplePair>> {
    synth_dataset_with(n, size, seed, SynthOptions::default())
}

pub fn synth_dataset_with(n: usize, size: usize, seed: u64, opts: SynthOptions) -> Result<Vec<SamplePair>> {
    check_size(size)?;
    if opts.min_changes > opts.max_changes {
        return Err(Error::Config("min_changes exceeds max_changes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let changes = rng.gen_range(opts.min_changes..=opts.max_changes);
            let statics = rng.gen_range(0..=opts.max_static);
            Ok(synth_pair(&format!("synth_{i:04}"), size, changes, statics, &mut rng)?.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shapes_no_change() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (p, placed) = synth_pair("z", 64, 0, 0, &mut r).unwrap();
        assert!(placed.is_empty());
        assert!(p.mask.data.iter().all(|&v| v == 0));
        assert_eq!(p.t1, p.t2);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_dataset(3, 64, 7).unwrap(), synth_dataset(3, 64, 7).unwrap());
        assert_ne!(synth_dataset(3, 64, 7).unwrap(), synth_dataset(3, 64, 8).unwrap());
    }

    #[test]
    fn size_contract() {
        assert!(matches!(synth_dataset(1, 60, 0), Err(Error::Config(_))));
        assert!(synth_dataset(1, 0, 0).is_err());
        assert_eq!(synth_dataset(2, 128, 0).unwrap()[0].size(), (128, 128));
    }

    #[test]
    fn mask_equals_rasterized_area_and_pixel_difference() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for i in 0..20 {
            let (p, placed) = synth_pair("s", 64, 1 + i % 4, i % 3, &mut r).unwrap();
            let area: usize = placed.iter().filter(|s| s.presence != Presence::Static).map(|s| s.shape.pixels().len()).sum();
            let ones = p.mask.data.iter().filter(|&&v| v == 1).count();
            assert_eq!(ones, area);
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(p.mask.pixel(y, x)[0] == 1, p.t1.pixel(y, x) != p.t2.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn ellipse_rasterization() {
        let e = Shape::Ellipse { y: 0, x: 0, h: 4, w: 4 };
        // a 4x4 disc drops only the four corners
        assert_eq!(e.pixels().len(), 12);
        assert!(!e.contains(0, 0) && e.contains(0, 1) && e.contains(1, 1));
        assert_eq!(Shape::Rect { y: 2, x: 3, h: 2, w: 5 }.pixels().len(), 10);
    }
}
