//! Fourier-Bessel coefficients: expansion from polar samples (angular FFT plus
//! radial Gauss-Legendre sums), synthesis back to the polar grid, steering,
//! and the rotation-invariant mean.
//!
//! Coefficients follow the continuous Fourier transform convention: for an
//! image `I(i) = f(i)` the stored `a_{k,q}` approximate
//! `int F(f) conj(psi^{k,q})`, i.e. `L^2` times the quadrature applied to
//! the normalized polar samples.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::basis::{BasisSpec, RadialTable};
use crate::error::{Error, Result};
use crate::image::ImageStack;
use crate::polarft::{polar_ft_direct, NufftPlan, PolarGrid, PolarSamples, Provenance, DEFAULT_EPS};

pub const DEFAULT_BLOCK_SIZE: usize = 1024;
const FBC_MAGIC: &[u8; 4] = b"FBC1";
const FBC_VERSION: u32 = 1;

/// Coefficients `a[i][k][q]` for `k = 0..=k_max`, `q = 1..=p_k`, stored flat
/// per image in the order of [`BasisSpec::offset`].
#[derive(Debug, Clone, PartialEq)]
pub struct FBCoeffs {
    spec: BasisSpec,
    side: usize,
    n_images: usize,
    data: Vec<Complex64>,
}

impl FBCoeffs {
    pub fn new(spec: BasisSpec, side: usize, n_images: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != n_images * spec.n_coeffs() {
            return Err(Error::Shape(format!(
                "coefficients: expected {} values, got {}",
                n_images * spec.n_coeffs(),
                data.len()
            )));
        }
        Ok(FBCoeffs {
            spec,
            side,
            n_images,
            data,
        })
    }

    pub fn zeros(spec: BasisSpec, side: usize, n_images: usize) -> Self {
        let n = spec.n_coeffs() * n_images;
        FBCoeffs {
            spec,
            side,
            n_images,
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    /// Side length of the source images; scales between normalized polar
    /// samples and coefficients.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.n_images
    }

    pub fn is_empty(&self) -> bool {
        self.n_images == 0
    }

    pub fn image(&self, i: usize) -> &[Complex64] {
        let s = self.spec.n_coeffs();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [Complex64] {
        let s = self.spec.n_coeffs();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// `a[i][k][1..=p_k]`.
    pub fn block(&self, i: usize, k: usize) -> &[Complex64] {
        let img = self.image(i);
        &img[self.spec.offset(k)..self.spec.offset(k + 1)]
    }

    pub fn block_mut(&mut self, i: usize, k: usize) -> &mut [Complex64] {
        let (a, b) = (self.spec.offset(k), self.spec.offset(k + 1));
        &mut self.image_mut(i)[a..b]
    }

    /// Coefficient `a[i][k][q]` with 1-based `q`.
    pub fn get(&self, i: usize, k: usize, q: usize) -> Result<Complex64> {
        if !self.spec.is_retained(k, q) {
            return Err(Error::Index { k, q });
        }
        Ok(self.image(i)[self.spec.offset(k) + q - 1])
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// `sum |a|^2` with `k > 0` counted twice (negative frequencies).
    pub fn energy(&self, i: usize) -> f64 {
        (0..=self.spec.k_max())
            .map(|k| {
                let w = if k == 0 { 1.0 } else { 2.0 };
                w * self.block(i, k).iter().map(|v| v.norm_sqr()).sum::<f64>()
            })
            .sum()
    }

    /// Images `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> FBCoeffs {
        let s = self.spec.n_coeffs();
        FBCoeffs {
            spec: self.spec.clone(),
            side: self.side,
            n_images: end - start,
            data: self.data[start * s..end * s].to_vec(),
        }
    }
}

/// `g(xi_j, k) = (2 pi / n_theta) sum_l F(xi_j, theta_l) e^{-2 pi i k l / n_theta}`
/// for `k = 0..=k_max`, laid out `[image][j][k]`.
pub fn angular_transform(samples: &PolarSamples, k_max: usize) -> Result<Vec<Complex64>> {
    let nt = samples.n_theta();
    if 2 * k_max >= nt {
        return Err(Error::Config(format!(
            "angular aliasing: k_max = {k_max} needs n_theta > {}, got {nt}",
            2 * k_max
        )));
    }
    let nk = k_max + 1;
    let n_rings = samples.len() * samples.n_xi();
    let fft = FftPlanner::new().plan_fft_forward(nt);
    let scale = 2.0 * PI / nt as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); n_rings * nk];
    out.par_chunks_mut(nk).enumerate().for_each_init(
        || (vec![Complex64::new(0.0, 0.0); nt], vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()]),
        |(buf, scratch), (ring, dst)| {
            let (i, j) = (ring / samples.n_xi(), ring % samples.n_xi());
            buf.copy_from_slice(samples.ring(i, j));
            fft.process_with_scratch(buf, scratch);
            for (d, v) in dst.iter_mut().zip(buf.iter()) {
                *d = v * scale;
            }
        },
    );
    Ok(out)
}

fn check_compatible(spec: &BasisSpec, grid: &PolarGrid, table: &RadialTable) -> Result<()> {
    if spec.c() != grid.c() || spec.radius() != grid.radius() {
        return Err(Error::Config(format!(
            "basis (c={}, R={}) and grid (c={}, R={}) differ",
            spec.c(),
            spec.radius(),
            grid.c(),
            grid.radius()
        )));
    }
    if table.n_xi() != grid.n_xi() || table.k_max() != spec.k_max() {
        return Err(Error::Config("radial table does not match basis and grid".into()));
    }
    if 2 * spec.k_max() >= grid.n_theta() {
        return Err(Error::Config(format!(
            "n_theta = {} does not resolve k_max = {}",
            grid.n_theta(),
            spec.k_max()
        )));
    }
    Ok(())
}

/// How [`expand_with`] samples the polar grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolarMethod {
    Nufft { eps: f64 },
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpandOptions {
    pub method: PolarMethod,
    /// Images processed per batch; bounds peak memory.
    pub block_size: usize,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions {
            method: PolarMethod::Nufft { eps: DEFAULT_EPS },
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

/// Fourier-Bessel coefficients of every image, `k >= 0`.
pub fn expand(stack: &ImageStack, spec: &BasisSpec, grid: &PolarGrid, table: &RadialTable) -> Result<FBCoeffs> {
    expand_with(stack, spec, grid, table, ExpandOptions::default())
}

pub fn expand_with(
    stack: &ImageStack,
    spec: &BasisSpec,
    grid: &PolarGrid,
    table: &RadialTable,
    opts: ExpandOptions,
) -> Result<FBCoeffs> {
    check_compatible(spec, grid, table)?;
    if opts.block_size == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let plan = match opts.method {
        PolarMethod::Nufft { eps } => Some(NufftPlan::new(stack.side(), grid, eps)?),
        PolarMethod::Direct => None,
    };
    let mut out = FBCoeffs::zeros(spec.clone(), stack.side(), stack.len());
    let per = spec.n_coeffs();
    let mut start = 0;
    while start < stack.len() {
        let end = (start + opts.block_size).min(stack.len());
        let block = stack.slice(start, end);
        let samples = match &plan {
            Some(p) => p.execute(&block)?,
            None => polar_ft_direct(&block, grid)?,
        };
        let coeffs = expand_polar(&samples, spec, table)?;
        out.data[start * per..end * per].copy_from_slice(&coeffs.data);
        start = end;
    }
    Ok(out)
}

/// Coefficients from polar samples. Samples that came from images of side
/// `L` are scaled by `L^2`; synthesized samples (side 0) are not scaled.
pub fn expand_polar(samples: &PolarSamples, spec: &BasisSpec, table: &RadialTable) -> Result<FBCoeffs> {
    if samples.n_xi() != table.n_xi() || table.k_max() != spec.k_max() {
        return Err(Error::Config("polar samples do not match the radial table".into()));
    }
    let g = angular_transform(samples, spec.k_max())?;
    radial_quadrature(&g, samples.len(), samples.side(), spec, table)
}

/// Radial Gauss-Legendre step: `a_{k,q} = s sum_j g[j][k] N J_k(R xi_j / c) xi_j w_j`
/// for angular transforms laid out as in [`angular_transform`], with
/// `s = L^2` (1 for `side = 0`).
pub fn radial_quadrature(
    g: &[Complex64],
    n_images: usize,
    side: usize,
    spec: &BasisSpec,
    table: &RadialTable,
) -> Result<FBCoeffs> {
    let nk = spec.k_max() + 1;
    let n_xi = table.n_xi();
    if g.len() != n_images * n_xi * nk || table.k_max() != spec.k_max() {
        return Err(Error::Shape("angular transform does not match the radial table".into()));
    }
    let scale = if side == 0 { 1.0 } else { (side * side) as f64 };
    let xw = table.xi_weights();
    let per = spec.n_coeffs();
    let mut data = vec![Complex64::new(0.0, 0.0); n_images * per];
    data.par_chunks_mut(per.max(1)).enumerate().for_each(|(i, dst)| {
        let gi = &g[i * n_xi * nk..(i + 1) * n_xi * nk];
        for k in 0..nk {
            let off = spec.offset(k);
            for q in 0..spec.p_k(k) {
                let row = table.row(k, q);
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n_xi {
                    acc += gi[j * nk + k] * (row[j] * xw[j]);
                }
                dst[off + q] = acc * scale;
            }
        }
        // real images have real k = 0 coefficients
        for v in &mut dst[..spec.p_k(0)] {
            v.im = 0.0;
        }
    });
    FBCoeffs::new(spec.clone(), side, n_images, data)
}

/// Evaluates the truncated series on the polar grid, divided by `L^2` so the
/// samples are on the same scale as [`polar_ft_direct`] output.
pub fn synthesize_polar(coeffs: &FBCoeffs, grid: &PolarGrid, table: &RadialTable) -> Result<PolarSamples> {
    let spec = coeffs.spec();
    if table.n_xi() != grid.n_xi() || table.k_max() != spec.k_max() {
        return Err(Error::Config("radial table does not match coefficients and grid".into()));
    }
    let nt = grid.n_theta();
    if 2 * spec.k_max() >= nt {
        return Err(Error::Config("n_theta does not resolve k_max".into()));
    }
    let n_xi = grid.n_xi();
    let side = coeffs.side();
    let scale = if side == 0 { 1.0 } else { 1.0 / (side * side) as f64 };
    let ifft = FftPlanner::new().plan_fft_inverse(nt);
    let per = n_xi * nt;
    let mut data = vec![Complex64::new(0.0, 0.0); coeffs.len() * per];
    data.par_chunks_mut(per.max(1)).enumerate().for_each(|(i, dst)| {
        let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
        for j in 0..n_xi {
            let ring = &mut dst[j * nt..(j + 1) * nt];
            for k in 0..=spec.k_max() {
                let a = coeffs.block(i, k);
                let mut h = Complex64::new(0.0, 0.0);
                for (q, &v) in a.iter().enumerate() {
                    h += v * table.row(k, q)[j];
                }
                ring[k] = h * scale;
                if k > 0 {
                    // psi^{-k,q} = (-1)^k N J_k e^{-ik theta}, a_{-k,q} = conj(a_{k,q})
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    ring[nt - k] = h.conj() * (sign * scale);
                }
            }
            ifft.process_with_scratch(ring, &mut scratch);
        }
    });
    PolarSamples::new(coeffs.len(), n_xi, nt, side, Provenance::Direct, None, data)
}

/// Coefficients of every image rotated by `alpha`: `a_{k,q} e^{-ik alpha}`.
pub fn rotate_coeffs(coeffs: &FBCoeffs, alpha: f64) -> FBCoeffs {
    let mut out = coeffs.clone();
    if alpha != 0.0 {
        apply_phases(&mut out, alpha, false);
    }
    out
}

/// Coefficients of the images mirrored by `(x, y) -> (-x, y)` and then
/// rotated by `alpha`: `conj(a_{k,q}) e^{-ik alpha}`.
pub fn reflect_coeffs(coeffs: &FBCoeffs, alpha: f64) -> FBCoeffs {
    let mut out = coeffs.clone();
    apply_phases(&mut out, alpha, true);
    out
}

fn apply_phases(coeffs: &mut FBCoeffs, alpha: f64, conjugate: bool) {
    let spec = coeffs.spec.clone();
    let phases: Vec<Complex64> = (0..=spec.k_max()).map(|k| Complex64::from_polar(1.0, -(k as f64) * alpha)).collect();
    let per = spec.n_coeffs();
    coeffs.data.par_chunks_mut(per.max(1)).for_each(|img| {
        for (k, ph) in phases.iter().enumerate() {
            for v in &mut img[spec.offset(k)..spec.offset(k + 1)] {
                let base = if conjugate { v.conj() } else { *v };
                // a zero angle must leave the bits alone, signed zeros included
                *v = if k == 0 || alpha == 0.0 { base } else { base * ph };
            }
        }
    });
}

/// Mean of the `k = 0` coefficients, `(1/n) sum_i a^i_{0,q}`. The mean over
/// all rotations and reflections has no other content.
pub fn mean_coeffs(coeffs: &FBCoeffs) -> Result<Vec<f64>> {
    if coeffs.is_empty() {
        return Err(Error::Argument("mean of an empty coefficient set".into()));
    }
    let p0 = coeffs.spec.p_k(0);
    let mut mean = vec![0.0; p0];
    for i in 0..coeffs.len() {
        for (m, v) in mean.iter_mut().zip(coeffs.block(i, 0)) {
            *m += v.re;
        }
    }
    let n = coeffs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Writes the `FBC1` little-endian coefficient format.
pub fn write_fbc<W: Write>(coeffs: &FBCoeffs, mut w: W) -> Result<()> {
    let spec = coeffs.spec();
    w.write_all(FBC_MAGIC)?;
    w.write_all(&FBC_VERSION.to_le_bytes())?;
    w.write_all(&spec.c().to_le_bytes())?;
    w.write_all(&spec.radius().to_le_bytes())?;
    w.write_all(&(coeffs.side() as u32).to_le_bytes())?;
    w.write_all(&(coeffs.len() as u32).to_le_bytes())?;
    w.write_all(&(spec.k_max() as u32).to_le_bytes())?;
    for &pk in spec.p() {
        w.write_all(&(pk as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(16 * spec.n_coeffs());
    for i in 0..coeffs.len() {
        buf.clear();
        for v in coeffs.block(i, 0) {
            buf.extend_from_slice(&v.re.to_le_bytes());
        }
        for k in 1..=spec.k_max() {
            for v in coeffs.block(i, k) {
                buf.extend_from_slice(&v.re.to_le_bytes());
                buf.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `FBC1` file, rebuilding the basis from its `(c, R)` header and
/// checking the stored radial counts against it.
pub fn read_fbc<R: Read>(mut r: R) -> Result<FBCoeffs> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != FBC_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"FBC1\"")));
    }
    let version = cur.u32("version")?;
    if version != FBC_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let c = cur.f64("c")?;
    let radius = cur.u32("R")?;
    let side = cur.u32("L")? as usize;
    let n = cur.u32("n")? as usize;
    let k_max_pos = cur.pos as u64;
    let k_max = cur.u32("k_max")? as usize;
    let p_pos = cur.pos as u64;
    let mut p = Vec::with_capacity(k_max + 1);
    for _ in 0..=k_max {
        p.push(cur.u32("p_k")? as usize);
    }
    let spec = crate::basis::build_basis(c, radius)
        .map_err(|e| Error::format(8, format!("header (c={c}, R={radius}) is not a valid basis: {e}")))?;
    if spec.k_max() != k_max {
        return Err(Error::format(
            k_max_pos,
            format!("k_max {k_max} disagrees with basis k_max {}", spec.k_max()),
        ));
    }
    if spec.p() != p.as_slice() {
        return Err(Error::format(p_pos, "p_k array disagrees with the basis for (c, R)"));
    }
    let per_bytes = 8 * p[0] + 16 * p[1..].iter().sum::<usize>();
    let expected = cur.pos + n * per_bytes;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("payload holds {} bytes, expected {} for {n} images", bytes.len() - cur.pos.min(bytes.len()), n * per_bytes),
        ));
    }
    let mut data = Vec::with_capacity(n * spec.n_coeffs());
    for _ in 0..n {
        for _ in 0..p[0] {
            data.push(Complex64::new(cur.f64("coefficient")?, 0.0));
        }
        for &pk in &p[1..] {
            for _ in 0..pk {
                let re = cur.f64("coefficient")?;
                let im = cur.f64("coefficient")?;
                data.push(Complex64::new(re, im));
            }
        }
    }
    FBCoeffs::new(spec, side, n, data)
}

pub(crate) struct ByteCursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    /// Fails unless every byte has been consumed.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Renders the real-space images `sum_{k,q} a_{k,q} F^-1(psi^{k,q})` on the
/// `side x side` pixel grid, using `a_{-k,q} = conj(a_{k,q})`.
pub fn synthesize_images(coeffs: &FBCoeffs, side: usize) -> Result<ImageStack> {
    if side == 0 {
        return Err(Error::Shape("image side must be positive".into()));
    }
    let spec = coeffs.spec();
    let n = coeffs.len();
    let npix = side * side;
    let mut by_pixel = vec![0.0; npix * n];
    by_pixel.par_chunks_mut(n.max(1)).enumerate().for_each_init(
        || (vec![0.0; spec.n_coeffs()], vec![Complex64::new(0.0, 0.0); spec.k_max() + 1]),
        |(radial, angular), (pix, dst)| {
            let (r, phi) = crate::image::pixel_polar(side, pix % side, pix / side);
            real_space_factors(spec, r, phi, radial, angular);
            for (i, v) in dst.iter_mut().enumerate() {
                *v = eval_real_space(coeffs.image(i), spec, radial, angular);
            }
        },
    );
    let mut data = vec![0.0; n * npix];
    for (pix, vals) in by_pixel.chunks(n.max(1)).enumerate() {
        for (i, &v) in vals.iter().enumerate().take(n) {
            data[i * npix + pix] = v;
        }
    }
    ImageStack::new(n, side, data)
}

/// Real radial factors of every `F^-1(psi^{k,q})` at radius `r` (flat
/// coefficient order) and the angular factors `i^k e^{ik phi}`.
pub(crate) fn real_space_factors(
    spec: &BasisSpec,
    r: f64,
    phi: f64,
    radial: &mut [f64],
    angular: &mut [Complex64],
) {
    let x = 2.0 * PI * spec.c() * r;
    let js = crate::specfun::jn_orders(spec.k_max(), x);
    for k in 0..=spec.k_max() {
        let off = spec.offset(k);
        for q in 0..spec.p_k(k) {
            let zero = spec.zeros(k)[q];
            radial[off + q] = crate::basis::psi_real_radial_with(spec.c(), k, q + 1, zero, x, || js[k]);
        }
        angular[k] = crate::basis::i_pow(k) * Complex64::from_polar(1.0, k as f64 * phi);
    }
}

/// `a_0 . rad_0 + 2 Re sum_{k>=1} ang_k (a_k . rad_k)` for one image.
pub(crate) fn eval_real_space(a: &[Complex64], spec: &BasisSpec, radial: &[f64], angular: &[Complex64]) -> f64 {
    let mut total = 0.0;
    for k in 0..=spec.k_max() {
        let (lo, hi) = (spec.offset(k), spec.offset(k + 1));
        let mut s = Complex64::new(0.0, 0.0);
        for (v, &w) in a[lo..hi].iter().zip(&radial[lo..hi]) {
            s += v * w;
        }
        let term = (angular[k] * s).re;
        total += if k == 0 { term } else { 2.0 * term };
    }
    total
}
