//! Synthetic data: white-noise stacks, band-limited phantoms from random
//! Fourier-Bessel coefficients, CTF-envelope filtering and integer shifts.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)` with one stream
//! per (generator, index): stream id `(tag << 48) | index`, tags 1 noise
//! images, 2 phantom classes, 3 phantom assignment, 4 shifts.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::fbcoeff::{rotate_coeffs, synthesize_images, FBCoeffs};
use crate::image::{fft2, signed_freq, ImageStack};

const TAG_NOISE: u64 = 1;
const TAG_CLASS: u64 = 2;
const TAG_ASSIGN: u64 = 3;
const TAG_SHIFT: u64 = 4;

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | index);
    rng
}

/// I.i.d. Gaussian pixels with standard deviation `sigma`.
pub fn gen_noise_stack(n: usize, side: usize, sigma: f64, seed: u64) -> Result<ImageStack> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let npix = side * side;
    let mut data = vec![0.0; n * npix];
    data.par_chunks_mut(npix.max(1)).enumerate().for_each(|(i, img)| {
        let mut rng = stream(seed, TAG_NOISE, i as u64);
        img.iter_mut().for_each(|v| *v = sigma * rng.sample::<f64, _>(StandardNormal));
    });
    ImageStack::new(n, side, data)
}

/// Adds i.i.d. Gaussian noise to a copy of `stack`.
pub fn add_noise(stack: &ImageStack, sigma: f64, seed: u64) -> Result<ImageStack> {
    let noise = gen_noise_stack(stack.len(), stack.side(), sigma, seed)?;
    let data = stack.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    ImageStack::with_pixel_size(stack.len(), stack.side(), stack.pixel_size(), data)
}

/// The default phantom energy profile `exp(-(k^2 + q^2) / tau^2)`,
/// `tau = k_max / 3` (at least 1), `q` 1-based.
pub fn default_decay(spec: &BasisSpec) -> impl Fn(usize, usize) -> f64 + Sync {
    let tau = (spec.k_max() as f64 / 3.0).max(1.0);
    move |k, q| (-((k * k + q * q) as f64) / (tau * tau)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomOptions {
    pub n_classes: usize,
    /// Rotate each image's class by a uniform random in-plane angle.
    pub rotate: bool,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            n_classes: 1,
            rotate: false,
        }
    }
}

/// Band-limited phantoms: `n_classes` random coefficient vectors with
/// Gaussian amplitudes scaled by `decay(k, q)`, one class per image (drawn
/// uniformly), rendered on the `side x side` grid. Returns the images and
/// their exact coefficients.
pub fn gen_bandlimited_stack(
    spec: &BasisSpec,
    side: usize,
    n: usize,
    opts: PhantomOptions,
    decay: &(dyn Fn(usize, usize) -> f64 + Sync),
    seed: u64,
) -> Result<(ImageStack, FBCoeffs)> {
    if opts.n_classes == 0 {
        return Err(Error::Argument("need at least one phantom class".into()));
    }
    let m = spec.n_coeffs();
    let mut classes = Vec::with_capacity(opts.n_classes * m);
    for j in 0..opts.n_classes {
        let mut rng = stream(seed, TAG_CLASS, j as u64);
        for k in 0..=spec.k_max() {
            for q in 1..=spec.p_k(k) {
                let s = decay(k, q);
                let re: f64 = rng.sample(StandardNormal);
                let v = if k == 0 {
                    Complex64::new(s * re, 0.0)
                } else {
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re, im) * (s / 2f64.sqrt())
                };
                classes.push(v);
            }
        }
    }
    let classes = FBCoeffs::new(spec.clone(), side, opts.n_classes, classes)?;
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let mut rng = stream(seed, TAG_ASSIGN, i as u64);
        let j = rng.random_range(0..opts.n_classes);
        let class = classes.slice(j, j + 1);
        let a = if opts.rotate { rotate_coeffs(&class, rng.random_range(0.0..2.0 * PI)) } else { class };
        data.extend_from_slice(a.image(0));
    }
    let coeffs = FBCoeffs::new(spec.clone(), side, n, data)?;
    let images = synthesize_images(&coeffs, side)?;
    Ok((images, coeffs))
}

/// Parameters of the CTF envelope `min(pi lambda z f^2 + a, 1) exp(-B f^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    /// Electron wavelength (A).
    pub lambda: f64,
    /// Defocus (A).
    pub defocus: f64,
    /// Phase constant (rad).
    pub a: f64,
    /// Envelope decay (A^2).
    pub b: f64,
    /// Pixel size (A/pixel).
    pub pixel_size: f64,
}

impl CtfParams {
    /// 300 kV wavelength, 2.5 um defocus, `a = 0.1`, `B = 100`.
    pub fn reference(pixel_size: f64) -> Self {
        CtfParams {
            lambda: 0.0197,
            defocus: 2.5e4,
            a: 0.1,
            b: 100.0,
            pixel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(pos(self.lambda) && pos(self.defocus) && pos(self.pixel_size)) || !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::Config(format!("invalid CTF parameters {self:?}")));
        }
        if !(0.0..PI / 2.0).contains(&self.a) {
            return Err(Error::Config(format!("phase constant must lie in [0, pi/2), got {}", self.a)));
        }
        Ok(())
    }

    /// Envelope value at physical frequency `f` (1/A).
    pub fn envelope(&self, f: f64) -> f64 {
        (PI * self.lambda * self.defocus * f * f + self.a).min(1.0) * (-self.b * f * f).exp()
    }

    /// Frequency where the linear ramp reaches 1.
    pub fn crossover(&self) -> f64 {
        ((1.0 - self.a) / (PI * self.lambda * self.defocus)).max(0.0).sqrt()
    }
}

/// Multiplies each image's DFT by the envelope at `f = |m| / (L pixel_size)`.
pub fn apply_ctf_envelope(stack: &ImageStack, params: &CtfParams) -> Result<ImageStack> {
    params.validate()?;
    let side = stack.side();
    let npix = side * side;
    let filt: Vec<f64> = (0..npix)
        .map(|p| {
            let m = signed_freq(p % side, side).hypot(signed_freq(p / side, side));
            params.envelope(m / (side as f64 * params.pixel_size))
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(side);
    let inv = planner.plan_fft_inverse(side);
    let mut data = vec![0.0; stack.len() * npix];
    data.par_chunks_mut(npix).enumerate().for_each_init(
        || (vec![Complex64::new(0.0, 0.0); npix], vec![Complex64::new(0.0, 0.0); npix]),
        |(buf, scratch), (i, dst)| {
            buf.iter_mut().zip(stack.image(i)).for_each(|(b, &v)| *b = Complex64::new(v, 0.0));
            fft2(buf, scratch, side, fwd.as_ref());
            buf.iter_mut().zip(&filt).for_each(|(b, f)| *b *= f);
            fft2(buf, scratch, side, inv.as_ref());
            dst.iter_mut().zip(buf.iter()).for_each(|(d, b)| *d = b.re / npix as f64);
        },
    );
    ImageStack::with_pixel_size(stack.len(), side, stack.pixel_size(), data)
}

/// Random integer circular shifts, uniform in `[-max_shift, max_shift]^2`.
pub fn apply_shifts(stack: &ImageStack, max_shift: usize, seed: u64) -> Result<(ImageStack, Vec<(i64, i64)>)> {
    if max_shift > stack.side() / 4 {
        return Err(Error::Config(format!(
            "max shift {max_shift} exceeds L/4 = {}",
            stack.side() / 4
        )));
    }
    let s = max_shift as i64;
    let shifts: Vec<(i64, i64)> = (0..stack.len())
        .map(|i| {
            let mut rng = stream(seed, TAG_SHIFT, i as u64);
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        })
        .collect();
    Ok((shift_images(stack, &shifts)?, shifts))
}

/// Circularly moves pixel `(x, y)` of image `i` to `(x + dx_i, y + dy_i)`.
pub fn shift_images(stack: &ImageStack, shifts: &[(i64, i64)]) -> Result<ImageStack> {
    if shifts.len() != stack.len() {
        return Err(Error::Shape(format!("{} shifts for {} images", shifts.len(), stack.len())));
    }
    let side = stack.side();
    let l = side as i64;
    let mut out = stack.clone();
    for (i, &(dx, dy)) in shifts.iter().enumerate() {
        let src = stack.image(i);
        let dst = out.image_mut(i);
        for y in 0..side {
            let ty = (y as i64 + dy).rem_euclid(l) as usize;
            for x in 0..side {
                let tx = (x as i64 + dx).rem_euclid(l) as usize;
                dst[ty * side + tx] = src[y * side + x];
            }
        }
    }
    Ok(out)
}

/// Total power of the images inside the disk of radius `R` per pixel, used
/// to set the noise level for a target SNR.
pub fn disk_power(stack: &ImageStack, radius: f64) -> f64 {
    let pixels = crate::spca::disk_pixels(stack.side(), radius);
    let total: f64 = (0..stack.len())
        .map(|i| pixels.iter().map(|&p| stack.image(i)[p].powi(2)).sum::<f64>())
        .sum();
    total / (stack.len() * pixels.len()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::fbcoeff::expand;
    use crate::image::pixel_polar;
    use crate::polarft::make_polar_grid;
    use crate::basis::RadialTable;

    #[test]
    fn noise_examples() {
        let z = gen_noise_stack(3, 8, 0.0, 1).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let a = gen_noise_stack(4, 16, 1.0, 5).unwrap();
        let b = gen_noise_stack(4, 16, 1.0, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_noise_stack(4, 16, 1.0, 6).unwrap());
        // prefix property of per-image streams
        assert_eq!(gen_noise_stack(2, 16, 1.0, 5).unwrap().image(1), a.image(1));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(pool.install(|| gen_noise_stack(4, 16, 1.0, 5).unwrap()), a);
        assert!(gen_noise_stack(1, 4, -1.0, 0).is_err());
    }

    #[test]
    fn noise_variance_law_of_large_numbers() {
        let s = gen_noise_stack(2500, 64, 2.0, 9).unwrap();
        let n = s.data().len() as f64;
        assert!(n >= 1e7);
        let mean = s.data().iter().sum::<f64>() / n;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / 4.0 - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn phantom_examples() {
        let spec = build_basis(0.25, 12).unwrap();
        let (img, coeffs) = gen_bandlimited_stack(&spec, 32, 5, PhantomOptions::default(), &|_, _| 0.0, 1).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert!(coeffs.data().iter().all(|v| v.norm() == 0.0));
        let decay = default_decay(&spec);
        let opts = PhantomOptions { n_classes: 3, rotate: false };
        let (img, coeffs) = gen_bandlimited_stack(&spec, 32, 6, opts, &decay, 2).unwrap();
        let (img2, _) = gen_bandlimited_stack(&spec, 32, 6, opts, &decay, 2).unwrap();
        assert_eq!(img, img2);
        // every image equals one of the classes
        let distinct: std::collections::HashSet<_> =
            (0..6).map(|i| coeffs.image(i).iter().map(|v| v.re.to_bits()).collect::<Vec<_>>()).collect();
        assert!(distinct.len() <= 3);
        assert!(gen_bandlimited_stack(&spec, 32, 1, PhantomOptions { n_classes: 0, rotate: false }, &decay, 0).is_err());
    }

    #[test]
    fn phantom_energy_is_inside_support() {
        let spec = build_basis(0.3, 20).unwrap();
        let decay = default_decay(&spec);
        let opts = PhantomOptions { n_classes: 4, rotate: true };
        let (img, _) = gen_bandlimited_stack(&spec, 64, 4, opts, &decay, 3).unwrap();
        let (mut inside, mut total) = (0.0, 0.0);
        for i in 0..4 {
            for (p, v) in img.image(i).iter().enumerate() {
                let r = pixel_polar(64, p % 64, p / 64).0;
                total += v * v;
                if r <= 20.0 {
                    inside += v * v;
                }
            }
        }
        assert!(1.0 - inside / total <= 0.01, "outside fraction {}", 1.0 - inside / total);
    }

    #[test]
    fn phantom_expands_to_planted_coefficients() {
        // limited by the real-space tails cut at the image border
        let spec = build_basis(0.3, 20).unwrap();
        let grid = make_polar_grid(0.3, 20).unwrap();
        let table = RadialTable::new(&spec, grid.rule()).unwrap();
        let decay = default_decay(&spec);
        let (img, a) = gen_bandlimited_stack(&spec, 64, 1, PhantomOptions::default(), &decay, 4).unwrap();
        let b = expand(&img, &spec, &grid, &table).unwrap();
        let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        let scale = a.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
        eprintln!("phantom round trip: max err {err:e}, relative {:e}", err / scale);
        assert!(err < 1e-2 * scale);
    }

    #[test]
    fn ctf_examples() {
        let p = CtfParams::reference(1.0);
        assert!((p.envelope(0.0) - 0.1).abs() < 1e-15);
        assert!((p.crossover() - 0.024118).abs() < 1e-5, "{}", p.crossover());
        let fc = p.crossover();
        assert!((PI * p.lambda * p.defocus * fc * fc + p.a - 1.0).abs() < 1e-12);
        let s = gen_noise_stack(2, 16, 1.0, 1).unwrap();
        let ident = CtfParams { a: 1.0, b: 0.0, ..p };
        let out = apply_ctf_envelope(&s, &ident).unwrap();
        for (x, y) in s.data().iter().zip(out.data()) {
            assert!((x - y).abs() < 1e-13);
        }
        // DC scaled by a
        let ones = ImageStack::new(1, 16, vec![1.0; 256]).unwrap();
        let out = apply_ctf_envelope(&ones, &p).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.1).abs() < 1e-13));
        assert!(apply_ctf_envelope(&s, &CtfParams { pixel_size: 0.0, ..p }).is_err());
        assert!(apply_ctf_envelope(&s, &CtfParams { a: 2.0, ..p }).is_err());
    }

    #[test]
    fn ctf_keeps_radial_symmetry() {
        let side = 33;
        let o = side / 2;
        let data = (0..side * side)
            .map(|p| {
                let r2 = ((p % side) as f64 - o as f64).powi(2) + ((p / side) as f64 - o as f64).powi(2);
                (-r2 / 20.0).exp()
            })
            .collect();
        let s = ImageStack::new(1, side, data).unwrap();
        let out = apply_ctf_envelope(&s, &CtfParams::reference(2.0)).unwrap();
        let at = |x: usize, y: usize| out.image(0)[y * side + x];
        // the 8 lattice symmetries of the square fix the radial function
        for dy in 0..=o {
            for dx in 0..=o {
                let v = at(o + dx, o + dy);
                for (x, y) in [(o - dx, o + dy), (o + dx, o - dy), (o - dx, o - dy), (o + dy, o + dx)] {
                    assert!((at(x, y) - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn shift_examples() {
        let s = gen_noise_stack(5, 20, 1.0, 3).unwrap();
        let (same, shifts) = apply_shifts(&s, 0, 1).unwrap();
        assert_eq!(same, s);
        assert!(shifts.iter().all(|&d| d == (0, 0)));
        let (moved, shifts) = apply_shifts(&s, 5, 2).unwrap();
        assert!(shifts.iter().all(|&(x, y)| x.abs() <= 5 && y.abs() <= 5));
        assert!(shifts.iter().any(|&d| d != (0, 0)));
        let back: Vec<_> = shifts.iter().map(|&(x, y)| (-x, -y)).collect();
        assert_eq!(shift_images(&moved, &back).unwrap(), s);
        for i in 0..5 {
            let a: f64 = s.image(i).iter().sum();
            let b: f64 = moved.image(i).iter().sum();
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(apply_shifts(&s, 6, 0), Err(Error::Config(_))));
    }
}
