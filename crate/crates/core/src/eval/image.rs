//! Binary PGM/PPM rendering of ratemaps, autocorrelograms and montages.
//! Image rows run from the top of the arena (largest `y`) downwards.

use std::io::Write;

use super::autocorr::Autocorrelogram;
use super::ratemap::Ratemap;

const FLAGGED: [u8; 3] = [255, 255, 255];
const DEAD: [u8; 3] = [200, 30, 30];
const GAP: [u8; 3] = [128, 128, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Image { width, height, pixels: vec![fill; width * height] }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_all(&bytes)
    }

    /// Grayscale from the first channel.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|p| p[0]).collect();
        w.write_all(&bytes)
    }

    fn blit(&mut self, other: &Image, x0: usize, y0: usize) {
        for y in 0..other.height {
            for x in 0..other.width {
                self.pixels[(y0 + y) * self.width + x0 + x] = other.pixels[y * other.width + x];
            }
        }
    }
}

fn gray(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let g = (t * 255.0).round() as u8;
    [g, g, g]
}

/// Dark blue → teal → yellow.
fn color(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let stops = [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let s = t * (stops.len() - 1) as f64;
    let i = (s.floor() as usize).min(stops.len() - 2);
    let f = s - i as f64;
    std::array::from_fn(|c| (stops[i][c] * (1.0 - f) + stops[i + 1][c] * f).round() as u8)
}

fn finite_range(values: &[f64]) -> (f64, f64) {
    values.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn render(w: usize, h: usize, values: &[f64], paint: impl Fn(f64) -> [u8; 3]) -> Image {
    let mut img = Image::new(w, h, FLAGGED);
    for y in 0..h {
        for x in 0..w {
            let v = values[y * w + x];
            img.pixels[(h - 1 - y) * w + x] = if v.is_finite() { paint(v) } else { FLAGGED };
        }
    }
    img
}

/// Grayscale ratemap scaled to its own range; flagged bins are white.
pub fn ratemap_gray(map: &Ratemap) -> Image {
    let (lo, hi) = finite_range(&map.values);
    render(map.bins_x, map.bins_y, &map.values, |v| gray(v, lo, hi))
}

/// Color ratemap; dead units are drawn in solid red.
pub fn ratemap_color(map: &Ratemap) -> Image {
    if map.is_dead() {
        return Image::new(map.bins_x, map.bins_y, DEAD);
    }
    let (lo, hi) = finite_range(&map.values);
    render(map.bins_x, map.bins_y, &map.values, |v| color(v, lo, hi))
}

/// Grayscale autocorrelogram on `[−1, 1]`.
pub fn autocorrelogram_gray(ac: &Autocorrelogram) -> Image {
    render(ac.width(), ac.height(), &ac.values, |v| gray(v, -1.0, 1.0))
}

/// All ratemaps on a grid of `columns`, separated by one-pixel gaps.
pub fn montage(maps: &[Ratemap], columns: usize) -> Image {
    let columns = columns.max(1);
    let (w, h) = maps.first().map_or((1, 1), |m| (m.bins_x, m.bins_y));
    let rows = maps.len().div_ceil(columns).max(1);
    let mut img = Image::new(columns * (w + 1) + 1, rows * (h + 1) + 1, GAP);
    for (k, m) in maps.iter().enumerate() {
        let tile = ratemap_color(m);
        img.blit(&tile, 1 + (k % columns) * (w + 1), 1 + (k / columns) * (h + 1));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Arena;

    fn map(values: Vec<f64>, peak: f64) -> Ratemap {
        Ratemap { unit: 0, arena: Arena::square(1.0), bin_size: 0.5, bins_x: 2, bins_y: 2, values, occupancy: vec![1; 4], peak }
    }

    #[test]
    fn pgm_layout_is_flipped_vertically() {
        let img = ratemap_gray(&map(vec![0.0, 1.0, 2.0, f64::NAN], 2.0));
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&buf[..header.len()], header);
        // top row is y = 1: [2, NaN]; bottom row is y = 0: [0, 1]
        assert_eq!(&buf[header.len()..], &[255, 255, 0, 128]);
    }

    #[test]
    fn montage_marks_dead_units() {
        let live = map(vec![0.0, 1.0, 2.0, 3.0], 3.0);
        let dead = map(vec![0.0; 4], 0.0);
        let img = montage(&[live, dead], 2);
        assert_eq!((img.width, img.height), (7, 4));
        assert_eq!(img.pixels[img.width + 4], DEAD);
        assert_eq!(img.pixels[0], GAP);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert_eq!(buf.len(), b"P6\n7 4\n255\n".len() + 7 * 4 * 3);
    }
}
