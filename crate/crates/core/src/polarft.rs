//! Samples of the normalized discrete Fourier transform
//! `F(I)(xi) = L^-2 sum_i I(i) exp(-2 pi i xi . i)` on a polar grid of
//! Gauss-Legendre radii and uniform angles.
//!
//! The fast path is a type-2 NUFFT: the image is divided by the transform of
//! an exponential-of-semicircle kernel, zero padded to twice its size, FFT'd,
//! and interpolated to the polar nodes with the same kernel.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::image::{origin, ImageStack};
use crate::specfun::{gauss_legendre, QuadratureRule};

pub const DEFAULT_EPS: f64 = 1e-10;
pub const MIN_EPS: f64 = 1e-14;
pub const MAX_EPS: f64 = 1e-4;
const OVERSAMPLING: usize = 2;
const BETA_PER_WIDTH: f64 = 2.30;

/// Polar quadrature grid in the frequency disk of radius `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    c: f64,
    radius: u32,
    n_theta: usize,
    rule: QuadratureRule,
}

/// Smallest integer `>= x`, ignoring upward rounding noise in `x`.
pub(crate) fn ceil_tolerant(x: f64) -> usize {
    (x - 1e-9 * x.abs().max(1.0)).ceil().max(0.0) as usize
}

/// Grid with `ceil(4cR)` radii and `ceil(16cR)` angles.
pub fn make_polar_grid(c: f64, radius: u32) -> Result<PolarGrid> {
    let cr = c * radius as f64;
    if !(c > 0.0 && c <= 0.5) || radius < 2 || cr < 1.0 {
        return Err(Error::Config(format!(
            "polar grid needs 0 < c <= 1/2, R >= 2 and cR >= 1; got c={c}, R={radius}"
        )));
    }
    PolarGrid::with_sizes(c, radius, ceil_tolerant(4.0 * cr), ceil_tolerant(16.0 * cr))
}

impl PolarGrid {
    /// Grid with explicit radial and angular counts.
    pub fn with_sizes(c: f64, radius: u32, n_xi: usize, n_theta: usize) -> Result<Self> {
        if n_theta == 0 {
            return Err(Error::Config("n_theta must be positive".into()));
        }
        let rule = gauss_legendre(n_xi, 0.0, c)?;
        Ok(PolarGrid {
            c,
            radius,
            n_theta,
            rule,
        })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn n_xi(&self) -> usize {
        self.rule.len()
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn n_nodes(&self) -> usize {
        self.n_xi() * self.n_theta
    }

    pub fn radii(&self) -> &[f64] {
        &self.rule.nodes
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn theta(&self, l: usize) -> f64 {
        2.0 * PI * l as f64 / self.n_theta as f64
    }

    /// Cartesian frequency `(xi_1, xi_2)` of node `(j, l)`.
    pub fn node(&self, j: usize, l: usize) -> (f64, f64) {
        let (s, c) = self.theta(l).sin_cos();
        let xi = self.rule.nodes[j];
        (xi * c, xi * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Direct,
    Nufft,
}

/// Complex samples for a batch of images, laid out `[image][ring j][angle l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSamples {
    n_images: usize,
    n_xi: usize,
    n_theta: usize,
    side: usize,
    provenance: Provenance,
    eps: Option<f64>,
    data: Vec<Complex64>,
}

impl PolarSamples {
    pub fn new(
        n_images: usize,
        n_xi: usize,
        n_theta: usize,
        side: usize,
        provenance: Provenance,
        eps: Option<f64>,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if data.len() != n_images * n_xi * n_theta {
            return Err(Error::Shape(format!(
                "polar samples: expected {} values, got {}",
                n_images * n_xi * n_theta,
                data.len()
            )));
        }
        Ok(PolarSamples {
            n_images,
            n_xi,
            n_theta,
            side,
            provenance,
            eps,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.n_images
    }

    pub fn is_empty(&self) -> bool {
        self.n_images == 0
    }

    pub fn n_xi(&self) -> usize {
        self.n_xi
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    /// Side length of the source images (0 when synthesized from coefficients).
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn eps(&self) -> Option<f64> {
        self.eps
    }

    pub fn image(&self, i: usize) -> &[Complex64] {
        let s = self.n_xi * self.n_theta;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [Complex64] {
        let s = self.n_xi * self.n_theta;
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn ring(&self, i: usize, j: usize) -> &[Complex64] {
        let start = (i * self.n_xi + j) * self.n_theta;
        &self.data[start..start + self.n_theta]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

/// Separable direct evaluation, `O(L^2)` per node. Test oracle.
pub fn polar_ft_direct(stack: &ImageStack, grid: &PolarGrid) -> Result<PolarSamples> {
    let side = stack.side();
    let o = origin(side) as f64;
    let norm = 1.0 / (side * side) as f64;
    let per = grid.n_nodes();
    let mut data = vec![Complex64::new(0.0, 0.0); stack.len() * per];
    data.par_chunks_mut(per.max(1))
        .enumerate()
        .for_each(|(i, out)| {
            let img = stack.image(i);
            let mut e1 = vec![Complex64::new(0.0, 0.0); side];
            let mut row_sums = vec![Complex64::new(0.0, 0.0); side];
            for j in 0..grid.n_xi() {
                for l in 0..grid.n_theta() {
                    let (x1, x2) = grid.node(j, l);
                    for (x, e) in e1.iter_mut().enumerate() {
                        *e = Complex64::from_polar(1.0, -2.0 * PI * x1 * (x as f64 - o));
                    }
                    for (y, rs) in row_sums.iter_mut().enumerate() {
                        let row = &img[y * side..(y + 1) * side];
                        *rs = row.iter().zip(&e1).map(|(&v, &e)| e * v).sum();
                    }
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (y, rs) in row_sums.iter().enumerate() {
                        acc += rs * Complex64::from_polar(1.0, -2.0 * PI * x2 * (y as f64 - o));
                    }
                    out[j * grid.n_theta() + l] = acc * norm;
                }
            }
        });
    PolarSamples::new(
        stack.len(),
        grid.n_xi(),
        grid.n_theta(),
        side,
        Provenance::Direct,
        None,
        data,
    )
}

/// NUFFT evaluation with accuracy target `eps` (relative to `L max|I|`).
pub fn polar_ft_nufft(stack: &ImageStack, grid: &PolarGrid, eps: f64) -> Result<PolarSamples> {
    let plan = NufftPlan::new(stack.side(), grid, eps)?;
    plan.execute(stack)
}

/// Exponential-of-semicircle kernel `exp(beta (sqrt(1 - (2t/w)^2) - 1))`,
/// supported on `|t| <= w/2`.
#[derive(Debug, Clone, Copy)]
struct EsKernel {
    width: usize,
    beta: f64,
}

impl EsKernel {
    fn for_eps(eps: f64) -> Self {
        let width = (1.0 / eps).log10().ceil() as usize + 2;
        EsKernel {
            width,
            beta: BETA_PER_WIDTH * width as f64,
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let z = 2.0 * t / self.width as f64;
        let s = 1.0 - z * z;
        if s < 0.0 {
            0.0
        } else {
            (self.beta * (s.sqrt() - 1.0)).exp()
        }
    }

    /// Continuous Fourier transform at frequency `s` (cycles per fine-grid
    /// cell), by Gauss-Legendre quadrature of the even integrand.
    fn transform(&self, rule: &QuadratureRule, s: f64) -> f64 {
        2.0 * rule.integrate(|t| self.eval(t) * (2.0 * PI * s * t).cos())
    }
}

/// Precomputed NUFFT for one image size and polar grid.
pub struct NufftPlan {
    side: usize,
    n_fft: usize,
    n_xi: usize,
    n_theta: usize,
    eps: f64,
    /// Stencil length per axis (`width + 1`).
    taps: usize,
    /// Offset that maps a fine-grid index `m` into the padded grid.
    pad_shift: isize,
    n_pad: usize,
    /// `1 / (L phi_hat(i/N))` for centered index `i`, by pixel; applied
    /// along both axes it also supplies the `1/L^2` normalization.
    deconv: Vec<f64>,
    /// When set, only angles `l < n_theta/2` are interpolated.
    half: bool,
    starts: Vec<(u32, u32)>,
    weights_x: Vec<f64>,
    weights_y: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for NufftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NufftPlan")
            .field("side", &self.side)
            .field("n_fft", &self.n_fft)
            .field("taps", &self.taps)
            .field("eps", &self.eps)
            .finish()
    }
}

impl NufftPlan {
    pub fn new(side: usize, grid: &PolarGrid, eps: f64) -> Result<Self> {
        if !(MIN_EPS..=MAX_EPS).contains(&eps) {
            return Err(Error::Config(format!(
                "NUFFT accuracy must lie in [{MIN_EPS:e}, {MAX_EPS:e}], got {eps:e}"
            )));
        }
        if side == 0 {
            return Err(Error::Shape("image side must be positive".into()));
        }
        let kernel = EsKernel::for_eps(eps);
        let n_fft = OVERSAMPLING * side;
        let taps = kernel.width + 1;
        let half_w = kernel.width as f64 / 2.0;

        let ft_rule = gauss_legendre(4 * kernel.width + 40, 0.0, half_w)?;
        let o = origin(side) as isize;
        let deconv = (0..side)
            .map(|x| {
                let i = x as isize - o;
                let phi_hat = kernel.transform(&ft_rule, i as f64 / n_fft as f64);
                1.0 / (side as f64 * phi_hat)
            })
            .collect();

        // fine-grid positions N xi lie in [-N/2, N/2]; stencils reach w/2 + 1
        // beyond that
        let reach = n_fft as isize / 2 + kernel.width as isize / 2 + 2;
        let pad_shift = reach;
        let n_pad = (2 * reach + 1) as usize;

        let half = grid.n_theta().is_multiple_of(2);
        let n_l = if half { grid.n_theta() / 2 } else { grid.n_theta() };
        let n_eval = grid.n_xi() * n_l;
        let mut starts = Vec::with_capacity(n_eval);
        let mut weights_x = Vec::with_capacity(n_eval * taps);
        let mut weights_y = Vec::with_capacity(n_eval * taps);
        for j in 0..grid.n_xi() {
            for l in 0..n_l {
                let (x1, x2) = grid.node(j, l);
                let (t1, t2) = (n_fft as f64 * x1, n_fft as f64 * x2);
                let (m1, m2) = ((t1 - half_w).ceil(), (t2 - half_w).ceil());
                for a in 0..taps {
                    weights_x.push(kernel.eval(t1 - (m1 + a as f64)));
                    weights_y.push(kernel.eval(t2 - (m2 + a as f64)));
                }
                starts.push((
                    (m1 as isize + pad_shift) as u32,
                    (m2 as isize + pad_shift) as u32,
                ));
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(NufftPlan {
            side,
            n_fft,
            n_xi: grid.n_xi(),
            n_theta: grid.n_theta(),
            eps,
            taps,
            pad_shift,
            n_pad,
            deconv,
            half,
            starts,
            weights_x,
            weights_y,
            fft,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn execute(&self, stack: &ImageStack) -> Result<PolarSamples> {
        if stack.side() != self.side {
            return Err(Error::Shape(format!(
                "plan built for side {}, stack has side {}",
                self.side,
                stack.side()
            )));
        }
        let per = self.n_xi * self.n_theta;
        let n = stack.len();
        let mut data = vec![Complex64::new(0.0, 0.0); n * per];
        if self.half {
            // two real images per complex transform
            data.par_chunks_mut(2 * per.max(1))
                .enumerate()
                .for_each_init(
                    || self.workspace(),
                    |ws, (pair, out)| {
                        let a = stack.image(2 * pair);
                        let b = if 2 * pair + 1 < n {
                            Some(stack.image(2 * pair + 1))
                        } else {
                            None
                        };
                        self.transform_pair(a, b, ws, out);
                    },
                );
        } else {
            data.par_chunks_mut(per.max(1))
                .enumerate()
                .for_each_init(
                    || self.workspace(),
                    |ws, (i, out)| self.transform_single(stack.image(i), ws, out),
                );
        }
        PolarSamples::new(
            n,
            self.n_xi,
            self.n_theta,
            self.side,
            Provenance::Nufft,
            Some(self.eps),
            data,
        )
    }

    fn workspace(&self) -> Workspace {
        let scratch = self.fft.get_inplace_scratch_len();
        Workspace {
            grid: vec![Complex64::new(0.0, 0.0); self.n_fft * self.n_fft],
            transposed: vec![Complex64::new(0.0, 0.0); self.n_fft * self.n_fft],
            padded: vec![Complex64::new(0.0, 0.0); self.n_pad * self.n_pad],
            scratch: vec![Complex64::new(0.0, 0.0); scratch],
        }
    }

    /// Deconvolve, zero pad, 2D FFT and wrap into the padded grid.
    fn spread_and_fft(&self, a: &[f64], b: Option<&[f64]>, ws: &mut Workspace) {
        let (l, n) = (self.side, self.n_fft);
        let o = origin(l) as isize;
        ws.grid.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for y in 0..l {
            let row = ((y as isize - o).rem_euclid(n as isize)) as usize;
            let dy = self.deconv[y];
            let dst = &mut ws.grid[row * n..(row + 1) * n];
            for x in 0..l {
                let col = ((x as isize - o).rem_euclid(n as isize)) as usize;
                let d = dy * self.deconv[x];
                let im = b.map_or(0.0, |b| b[y * l + x]);
                dst[col] = Complex64::new(a[y * l + x] * d, im * d);
            }
        }
        // row FFTs on the rows that carry data
        for y in 0..l {
            let row = ((y as isize - o).rem_euclid(n as isize)) as usize;
            self.fft
                .process_with_scratch(&mut ws.grid[row * n..(row + 1) * n], &mut ws.scratch);
        }
        transpose(&ws.grid, &mut ws.transposed, n);
        self.fft.process_with_scratch(&mut ws.transposed, &mut ws.scratch);
        // transposed[m1][m2] now holds G(m1, m2); store padded[m2][m1]
        let np = self.n_pad;
        let shift = self.pad_shift;
        for p2 in 0..np {
            let m2 = ((p2 as isize - shift).rem_euclid(n as isize)) as usize;
            let dst = &mut ws.padded[p2 * np..(p2 + 1) * np];
            for (p1, v) in dst.iter_mut().enumerate() {
                let m1 = ((p1 as isize - shift).rem_euclid(n as isize)) as usize;
                *v = ws.transposed[m1 * n + m2];
            }
        }
    }

    fn interpolate(&self, node: usize, padded: &[Complex64]) -> Complex64 {
        let t = self.taps;
        let (s1, s2) = self.starts[node];
        let wx = &self.weights_x[node * t..(node + 1) * t];
        let wy = &self.weights_y[node * t..(node + 1) * t];
        let mut acc = Complex64::new(0.0, 0.0);
        for (b, &w2) in wy.iter().enumerate() {
            let row = (s2 as usize + b) * self.n_pad + s1 as usize;
            let line = &padded[row..row + t];
            let mut inner = Complex64::new(0.0, 0.0);
            for (v, &w1) in line.iter().zip(wx) {
                inner += v * w1;
            }
            acc += inner * w2;
        }
        acc
    }

    fn transform_single(&self, img: &[f64], ws: &mut Workspace, out: &mut [Complex64]) {
        self.spread_and_fft(img, None, ws);
        for (node, v) in out.iter_mut().enumerate() {
            *v = self.interpolate(node, &ws.padded);
        }
    }

    /// `out` holds one or two images. Requires even `n_theta`: the node at
    /// angle `l + n_theta/2` is the negative of the node at `l`.
    fn transform_pair(&self, a: &[f64], b: Option<&[f64]>, ws: &mut Workspace, out: &mut [Complex64]) {
        self.spread_and_fft(a, b, ws);
        let (nt, h) = (self.n_theta, self.n_theta / 2);
        let per = self.n_xi * nt;
        for j in 0..self.n_xi {
            for l in 0..h {
                let node = j * h + l;
                let f = self.interpolate(node, &ws.padded);
                if b.is_none() {
                    out[j * nt + l] = f;
                    out[j * nt + l + h] = f.conj();
                    continue;
                }
                let g = self.interpolate_negated(node, &ws.padded);
                // f = Fa + i Fb at xi, g = Fa - i Fb conjugated at -xi
                let fa = (f + g.conj()) * 0.5;
                let fb = (f - g.conj()) * Complex64::new(0.0, -0.5);
                out[j * nt + l] = fa;
                out[j * nt + l + h] = fa.conj();
                out[per + j * nt + l] = fb;
                out[per + j * nt + l + h] = fb.conj();
            }
        }
    }

    /// Value of the packed transform at the negated node.
    fn interpolate_negated(&self, node: usize, padded: &[Complex64]) -> Complex64 {
        // the kernel is even, so the stencil at -t uses the mirrored weights
        // around the mirrored start index
        let t = self.taps;
        let (s1, s2) = self.starts[node];
        let shift = self.pad_shift;
        let m1 = s1 as isize - shift;
        let m2 = s2 as isize - shift;
        let (n1, n2) = (-(m1 + t as isize - 1), -(m2 + t as isize - 1));
        let (p1, p2) = ((n1 + shift) as usize, (n2 + shift) as usize);
        let wx = &self.weights_x[node * t..(node + 1) * t];
        let wy = &self.weights_y[node * t..(node + 1) * t];
        let mut acc = Complex64::new(0.0, 0.0);
        for b in 0..t {
            let row = (p2 + b) * self.n_pad + p1;
            let line = &padded[row..row + t];
            let mut inner = Complex64::new(0.0, 0.0);
            for (a, v) in line.iter().enumerate() {
                inner += v * wx[t - 1 - a];
            }
            acc += inner * wy[t - 1 - b];
        }
        acc
    }
}

struct Workspace {
    grid: Vec<Complex64>,
    transposed: Vec<Complex64>,
    padded: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    const BLOCK: usize = 32;
    for bi in (0..n).step_by(BLOCK) {
        for bj in (0..n).step_by(BLOCK) {
            for i in bi..(bi + BLOCK).min(n) {
                for j in bj..(bj + BLOCK).min(n) {
                    dst[j * n + i] = src[i * n + j];
                }
            }
        }
    }
}
