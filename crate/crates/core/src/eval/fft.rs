//! Row-column 2-D FFT over row-major complex grids.

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

pub(crate) struct Fft2 {
    pub nx: usize,
    pub ny: usize,
    rows: std::sync::Arc<dyn rustfft::Fft<f64>>,
    cols: std::sync::Arc<dyn rustfft::Fft<f64>>,
    rows_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    cols_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut p = FftPlanner::new();
        Fft2 {
            nx,
            ny,
            rows: p.plan_fft(nx, FftDirection::Forward),
            cols: p.plan_fft(ny, FftDirection::Forward),
            rows_inv: p.plan_fft(nx, FftDirection::Inverse),
            cols_inv: p.plan_fft(ny, FftDirection::Inverse),
        }
    }

    /// In-place transform of an `ny × nx` row-major grid. The inverse is scaled by `1/(nx·ny)`.
    pub fn process(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.nx * self.ny);
        let (rows, cols) = if inverse { (&self.rows_inv, &self.cols_inv) } else { (&self.rows, &self.cols) };
        rows.process(data);
        let mut col = vec![Complex64::default(); self.ny];
        for x in 0..self.nx {
            for y in 0..self.ny {
                col[y] = data[y * self.nx + x];
            }
            cols.process(&mut col);
            for y in 0..self.ny {
                data[y * self.nx + x] = col[y];
            }
        }
        if inverse {
            let s = 1.0 / (self.nx * self.ny) as f64;
            data.iter_mut().for_each(|c| *c *= s);
        }
    }

    /// Zero-padded copy of an `h × w` real grid.
    pub fn embed(&self, values: &[f64], w: usize, h: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.nx * self.ny];
        for y in 0..h {
            for x in 0..w {
                out[y * self.nx + x] = Complex64::new(values[y * w + x], 0.0);
            }
        }
        out
    }
}
