//! Spatial autocorrelograms and the rotational gridness score.

use num_complex::Complex64;

use super::fft::Fft2;
use super::ratemap::Ratemap;
use super::EvalError;

/// Offsets with fewer overlapping valid bins than this fraction of the
/// zero-offset overlap are left undefined.
const MIN_OVERLAP_FRACTION: f64 = 0.05;
const MIN_OVERLAP: f64 = 20.0;

/// Pearson correlation of a ratemap with itself at every 2-D bin offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Autocorrelogram {
    /// Largest offset along x and y, in bins; the grid is `(2·rx+1) × (2·ry+1)`.
    pub rx: usize,
    pub ry: usize,
    pub bin_size: f64,
    /// Row-major over `dy` then `dx`, `NaN` where undefined.
    pub values: Vec<f64>,
}

impl Autocorrelogram {
    pub fn width(&self) -> usize {
        2 * self.rx + 1
    }

    pub fn height(&self) -> usize {
        2 * self.ry + 1
    }

    /// Value at offset `(dx, dy)` bins; `NaN` outside the grid.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let (x, y) = (dx + self.rx as isize, dy + self.ry as isize);
        if x < 0 || y < 0 || x >= self.width() as isize || y >= self.height() as isize {
            return f64::NAN;
        }
        self.values[y as usize * self.width() + x as usize]
    }

    /// Bilinear interpolation at a fractional offset; `NaN` if any corner is undefined.
    pub fn sample(&self, dx: f64, dy: f64) -> f64 {
        let (x0, y0) = (dx.floor(), dy.floor());
        let (fx, fy) = (dx - x0, dy - y0);
        let (ix, iy) = (x0 as isize, y0 as isize);
        let c00 = self.at(ix, iy);
        let c10 = self.at(ix + 1, iy);
        let c01 = self.at(ix, iy + 1);
        let c11 = self.at(ix + 1, iy + 1);
        (c00 * (1.0 - fx) + c10 * fx) * (1.0 - fy) + (c01 * (1.0 - fx) + c11 * fx) * fy
    }
}

fn cross(fft: &Fft2, a: &[Complex64], b: &[Complex64]) -> Vec<f64> {
    let mut p: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
    fft.process(&mut p, true);
    p.into_iter().map(|c| c.re).collect()
}

/// Autocorrelogram of `map`, ignoring flagged bins.
pub fn autocorrelogram(map: &Ratemap) -> Result<Autocorrelogram, EvalError> {
    let fraction = map.valid_fraction();
    if fraction < 0.5 {
        return Err(EvalError::Coverage { unit: map.unit, fraction });
    }
    let (w, h) = (map.bins_x, map.bins_y);
    let valid: Vec<f64> = map.values.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let spread = valid.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if spread == 0.0 || spread <= 1e-10 * mean.abs() {
        return Err(EvalError::ConstantMap(map.unit));
    }
    let x: Vec<f64> = map.values.iter().map(|&v| if v.is_finite() { v - mean } else { 0.0 }).collect();
    let m: Vec<f64> = map.values.iter().map(|v| if v.is_finite() { 1.0 } else { 0.0 }).collect();
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();

    let fft = Fft2::new(2 * w, 2 * h);
    let spec = |v: &[f64]| {
        let mut c = fft.embed(v, w, h);
        fft.process(&mut c, false);
        c
    };
    let (fx, fm, fx2) = (spec(&x), spec(&m), spec(&x2));
    let n = cross(&fft, &fm, &fm);
    let sx = cross(&fft, &fx, &fm);
    let sy = cross(&fft, &fm, &fx);
    let sxy = cross(&fft, &fx, &fx);
    let sxx = cross(&fft, &fx2, &fm);
    let syy = cross(&fft, &fm, &fx2);

    let (rx, ry) = (w - 1, h - 1);
    let (gw, gh) = (2 * rx + 1, 2 * ry + 1);
    let min_overlap = (n[0].round() * MIN_OVERLAP_FRACTION).max(MIN_OVERLAP);
    let mut values = vec![f64::NAN; gw * gh];
    let idx = |dx: isize, dy: isize| dy.rem_euclid(2 * h as isize) as usize * 2 * w + dx.rem_euclid(2 * w as isize) as usize;
    for dy in -(ry as isize)..=ry as isize {
        for dx in -(rx as isize)..=rx as isize {
            let k = idx(dx, dy);
            let cnt = n[k].round();
            if cnt < min_overlap {
                continue;
            }
            let num = cnt * sxy[k] - sx[k] * sy[k];
            let den = ((cnt * sxx[k] - sx[k] * sx[k]) * (cnt * syy[k] - sy[k] * sy[k])).sqrt();
            if den > 0.0 && den.is_finite() {
                values[(dy + ry as isize) as usize * gw + (dx + rx as isize) as usize] = (num / den).clamp(-1.0, 1.0);
            }
        }
    }
    // The estimator is symmetric in the offset sign; remove transform round-off.
    for i in 0..values.len() / 2 {
        let j = values.len() - 1 - i;
        let avg = 0.5 * (values[i] + values[j]);
        values[i] = avg;
        values[j] = avg;
    }
    values[ry * gw + rx] = 1.0;
    Ok(Autocorrelogram { rx, ry, bin_size: map.bin_size, values })
}

/// Rotational gridness and the first peak ring it was measured on.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridScore {
    pub score: f64,
    /// First-ring radius in meters.
    pub ring_radius: f64,
    /// Correlations with the rotated correlogram at 30°, 60°, 90°, 120°, 150°.
    pub rotations: [f64; 5],
}

/// Rings are searched within half the largest offset so that the annulus
/// around them stays well inside the defined region.
fn search_radius(ac: &Autocorrelogram) -> usize {
    ac.rx.min(ac.ry) / 2
}

/// Radius (bins) of the central peak: first local minimum of the radial mean profile.
fn central_radius(ac: &Autocorrelogram) -> Option<usize> {
    let rmax = search_radius(ac);
    let mut sum = vec![0.0; rmax + 1];
    let mut cnt = vec![0usize; rmax + 1];
    for dy in -(rmax as isize)..=rmax as isize {
        for dx in -(rmax as isize)..=rmax as isize {
            let r = ((dx * dx + dy * dy) as f64).sqrt().round() as usize;
            let v = ac.at(dx, dy);
            if r <= rmax && v.is_finite() {
                sum[r] += v;
                cnt[r] += 1;
            }
        }
    }
    let prof: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect();
    (1..rmax).find(|&r| prof[r].is_finite() && prof[r + 1].is_finite() && prof[r] <= prof[r + 1])
}

/// Sub-bin offset of a peak from a three-point parabola.
fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if l.is_finite() && r.is_finite() && den < 0.0 {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Local maxima beyond the central peak, as sub-bin `(distance, dx, dy)` sorted by distance.
fn ring_peaks(ac: &Autocorrelogram, r0: usize) -> Vec<(f64, f64, f64)> {
    let nb = ((r0 as f64 / 2.0).round() as isize).max(1);
    let lim = search_radius(ac) as isize;
    let mut peaks = Vec::new();
    for dy in -lim..=lim {
        for dx in -lim..=lim {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            let v = ac.at(dx, dy);
            if d <= r0 as f64 || d > lim as f64 || !(v > 0.0) {
                continue;
            }
            let is_max = (-nb..=nb).all(|oy| {
                (-nb..=nb).all(|ox| {
                    let u = ac.at(dx + ox, dy + oy);
                    (ox == 0 && oy == 0) || !(u > v)
                })
            });
            if is_max {
                let fx = dx as f64 + parabolic(ac.at(dx - 1, dy), v, ac.at(dx + 1, dy));
                let fy = dy as f64 + parabolic(ac.at(dx, dy - 1), v, ac.at(dx, dy + 1));
                peaks.push((fx.hypot(fy), fx, fy));
            }
        }
    }
    peaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    peaks
}

/// Pearson correlation between the correlogram and its rotation by `angle`
/// over the annulus `inner ≤ r ≤ outer` (bins).
fn rotated_correlation(ac: &Autocorrelogram, angle: f64, inner: f64, outer: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let lim = outer.ceil() as isize;
    let (mut n, mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -lim..=lim {
        for dx in -lim..=lim {
            let r = ((dx * dx + dy * dy) as f64).sqrt();
            if r < inner || r > outer {
                continue;
            }
            let a = ac.at(dx, dy);
            let (fx, fy) = (dx as f64, dy as f64);
            let b = ac.sample(c * fx - s * fy, s * fx + c * fy);
            if a.is_finite() && b.is_finite() {
                n += 1.0;
                sa += a;
                sb += b;
                sab += a * b;
                saa += a * a;
                sbb += b * b;
            }
        }
    }
    let den = ((n * saa - sa * sa) * (n * sbb - sb * sb)).sqrt();
    if n < 3.0 || !(den > 0.0) {
        return f64::NAN;
    }
    (n * sab - sa * sb) / den
}

/// `min(c60, c120) − max(c30, c90, c150)` over the annulus `[0.5, 1.5]×` the
/// first-ring radius. `None` when no ring of at least three peaks exists.
pub fn grid_score(ac: &Autocorrelogram) -> Option<GridScore> {
    let r0 = central_radius(ac)?;
    let peaks = ring_peaks(ac, r0);
    if peaks.len() < 3 {
        return None;
    }
    let ring: Vec<f64> = peaks.iter().take(6).map(|p| p.0).collect();
    let d = if ring.len() % 2 == 0 { 0.5 * (ring[ring.len() / 2 - 1] + ring[ring.len() / 2]) } else { ring[ring.len() / 2] };
    let rotations: [f64; 5] = std::array::from_fn(|k| rotated_correlation(ac, (30.0 * (k + 1) as f64).to_radians(), 0.5 * d, 1.5 * d));
    if rotations.iter().any(|r| !r.is_finite()) {
        return None;
    }
    let score = rotations[1].min(rotations[3]) - rotations[0].max(rotations[2]).max(rotations[4]);
    Some(GridScore { score, ring_radius: d * ac.bin_size, rotations })
}

/// The six nearest first-ring peaks as `(distance m, angle rad)`, for diagnostics.
pub fn first_ring(ac: &Autocorrelogram) -> Vec<(f64, f64)> {
    let Some(r0) = central_radius(ac) else { return Vec::new() };
    ring_peaks(ac, r0).into_iter().take(6).map(|(d, dx, dy)| (d * ac.bin_size, dy.atan2(dx))).collect()
}
