use num_complex::Complex64;
use rustfft::Fft;

use crate::error::{Error, Result};

/// `n` real square images of side `L`, stored image-major then row-major
/// (`data[i][y][x]`).
///
/// Pixel `(x, y)` sits at centered coordinates `(x - o, y - o)` with
/// `o = ceil((L-1)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    n: usize,
    side: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl ImageStack {
    pub fn new(n: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_pixel_size(n, side, 1.0, data)
    }

    pub fn with_pixel_size(n: usize, side: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self> {
        if side == 0 {
            return Err(Error::Shape("image side must be positive".into()));
        }
        if data.len() != n * side * side {
            return Err(Error::Shape(format!(
                "expected {n} x {side} x {side} = {} values, got {}",
                n * side * side,
                data.len()
            )));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::Argument(format!("pixel size must be positive, got {pixel_size}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value at flat index {pos}")));
        }
        Ok(ImageStack {
            n,
            side,
            pixel_size,
            data,
        })
    }

    pub fn zeros(n: usize, side: usize) -> Self {
        ImageStack {
            n,
            side,
            pixel_size: 1.0,
            data: vec![0.0; n * side * side],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn set_pixel_size(&mut self, pixel_size: f64) {
        self.pixel_size = pixel_size;
    }

    /// Index of the pixel at centered coordinate 0 along either axis.
    pub fn origin(&self) -> usize {
        origin(self.side)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.side * self.side;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.side * self.side;
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Images `start..end` as a new stack.
    pub fn slice(&self, start: usize, end: usize) -> ImageStack {
        let s = self.side * self.side;
        ImageStack {
            n: end - start,
            side: self.side,
            pixel_size: self.pixel_size,
            data: self.data[start * s..end * s].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `ceil((L-1)/2)`.
pub fn origin(side: usize) -> usize {
    side / 2
}

/// Centered polar coordinates `(r, phi)` of pixel `(x, y)`.
pub fn pixel_polar(side: usize, x: usize, y: usize) -> (f64, f64) {
    let o = origin(side) as f64;
    let (dx, dy) = (x as f64 - o, y as f64 - o);
    (dx.hypot(dy), dy.atan2(dx))
}

/// In-place unnormalized 2D DFT of a row-major `side x side` buffer; the
/// direction follows `fft`. `scratch` must hold `side * side` values.
pub(crate) fn fft2(buf: &mut [Complex64], scratch: &mut [Complex64], side: usize, fft: &dyn Fft<f64>) {
    fft.process(buf);
    transpose(buf, scratch, side);
    fft.process(scratch);
    transpose(scratch, buf, side);
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], side: usize) {
    for y in 0..side {
        for x in 0..side {
            dst[x * side + y] = src[y * side + x];
        }
    }
}

/// Signed frequency index of DFT bin `m` on a grid of `side` bins.
pub(crate) fn signed_freq(m: usize, side: usize) -> f64 {
    if m <= side / 2 {
        m as f64
    } else {
        m as f64 - side as f64
    }
}
