//! Noise, support and band-limit estimation, Marchenko-Pastur component
//! selection, eigenvalue shrinkage, real-space reconstruction and metrics.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbcoeff::{mean_coeffs, real_space_factors, FBCoeffs};
use crate::image::{fft2, pixel_polar, signed_freq, ImageStack};
use crate::spca::{center_coeffs, spca_coeffs, BaselinePca, SteerableBasis};

/// PSNR written to files in place of `+inf` for exact matches.
pub const PSNR_SENTINEL: f64 = 999.0;

/// Fraction of radii (below `L/2`) used for the noise level.
const OUTER_FRACTION: f64 = 0.1;

/// Default energy fraction for the support and band-limit estimates.
pub const DEFAULT_FRACTION: f64 = 0.999;

/// Per-pixel variance over the stack (unbiased, mean image removed).
fn pixel_variance(stack: &ImageStack) -> Vec<f64> {
    let n = stack.len();
    let npix = stack.side() * stack.side();
    let mut mean = vec![0.0; npix];
    for i in 0..n {
        mean.iter_mut().zip(stack.image(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; npix];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(stack.image(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    var
}

/// Pixel count and mean of `values` in integer radius bins `0..L/2`
/// (complete rings only; bin `b` holds `round(r) = b`).
fn radial_bins(side: usize, values: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let nb = side / 2;
    let mut count = vec![0usize; nb];
    let mut sum = vec![0.0; nb];
    for y in 0..side {
        for x in 0..side {
            let b = pixel_polar(side, x, y).0.round() as usize;
            if b < nb {
                count[b] += 1;
                sum[b] += values[y * side + x];
            }
        }
    }
    let mean = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    (count, mean)
}

fn outer_bins(side: usize) -> std::ops::Range<usize> {
    let nb = side / 2;
    let lo = ((1.0 - OUTER_FRACTION) * nb as f64).ceil() as usize;
    lo.min(nb - 1)..nb
}

fn check_stack(stack: &ImageStack) -> Result<()> {
    if stack.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 images, got {}", stack.len())));
    }
    if stack.side() < 16 {
        return Err(Error::Config(format!("need L >= 16, got {}", stack.side())));
    }
    Ok(())
}

/// Noise variance: the angularly averaged per-radius variance of the
/// mean-subtracted images, averaged over the outer 10% of radii below `L/2`.
pub fn estimate_noise_variance(stack: &ImageStack) -> Result<f64> {
    check_stack(stack)?;
    let (count, prof) = radial_bins(stack.side(), &pixel_variance(stack));
    let outer = outer_bins(stack.side());
    let w: usize = count[outer.clone()].iter().sum();
    Ok(outer.map(|b| prof[b] * count[b] as f64).sum::<f64>() / w as f64)
}

/// Smallest bin whose cumulative weighted excess reaches `fraction` of the
/// total. Fails unless the unclamped excess clears three standard errors.
fn cumulative_cutoff(count: &[usize], excess: &[f64], se: f64, fraction: f64, what: &str) -> Result<usize> {
    let raw: f64 = count.iter().zip(excess).map(|(&c, &e)| c as f64 * e).sum();
    let clamped: Vec<f64> = count.iter().zip(excess).map(|(&c, &e)| c as f64 * e.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) || raw <= 3.0 * se {
        return Err(Error::Estimation(format!(
            "no {what} signal above the noise (excess {raw:.3e}, standard error {se:.3e})"
        )));
    }
    if fraction >= 1.0 {
        return Ok(count.len() - 1);
    }
    let mut acc = 0.0;
    for (b, v) in clamped.iter().enumerate() {
        acc += v;
        if acc >= fraction * total {
            return Ok(b);
        }
    }
    Ok(count.len() - 1)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    Ok(())
}

/// Support radius: the radius holding `fraction` of the noise-subtracted
/// per-radius variance, weighted by ring area.
pub fn estimate_support(stack: &ImageStack, sigma2: f64, fraction: f64) -> Result<f64> {
    check_stack(stack)?;
    check_fraction(fraction)?;
    let side = stack.side();
    let n = stack.len();
    let var = pixel_variance(stack);
    let (count, prof) = radial_bins(side, &var);
    let excess: Vec<f64> = prof.iter().map(|v| v - sigma2).collect();
    // per-image totals give the sampling error; the outer-ring noise
    // estimate adds its own error on every counted pixel
    let m: usize = count.iter().sum();
    let m_outer: usize = count[outer_bins(side)].iter().sum();
    let mut mean = vec![0.0; side * side];
    for i in 0..n {
        mean.iter_mut().zip(stack.image(i)).for_each(|(s, v)| *s += v / n as f64);
    }
    let inside: Vec<bool> = (0..side * side)
        .map(|p| (pixel_polar(side, p % side, p / side).0.round() as usize) < side / 2)
        .collect();
    let t: Vec<f64> = (0..n)
        .map(|i| {
            stack.image(i).iter().zip(&mean).zip(&inside).filter(|(_, &ok)| ok).map(|((v, mu), _)| (v - mu).powi(2)).sum()
        })
        .collect();
    let tm = t.iter().sum::<f64>() / n as f64;
    let tvar = t.iter().map(|v| (v - tm).powi(2)).sum::<f64>() / (n - 1) as f64;
    let noise_term = (m as f64 * sigma2).powi(2) * 2.0 / (n as f64 * m_outer as f64);
    let se = (tvar / n as f64 + noise_term).sqrt();
    Ok(cumulative_cutoff(&count, &excess, se, fraction, "support")? as f64)
}

/// Mean periodogram `|DFT(I - mean)|^2 / L^2` binned by `round(|m|)`,
/// `m` the integer frequency; white noise of variance `s^2` has level `s^2`.
/// Returns per-bin counts and means for bins `0..=L/2` and the per-image
/// bin totals for the error estimate.
fn radial_power(stack: &ImageStack) -> (Vec<usize>, Vec<f64>, Vec<Vec<f64>>) {
    let side = stack.side();
    let n = stack.len();
    let npix = side * side;
    let nb = side / 2 + 1;
    let mut mean = vec![0.0; npix];
    for i in 0..n {
        mean.iter_mut().zip(stack.image(i)).for_each(|(s, v)| *s += v / n as f64);
    }
    let bin: Vec<Option<usize>> = (0..npix)
        .map(|p| {
            let (fx, fy) = (signed_freq(p % side, side), signed_freq(p / side, side));
            let b = fx.hypot(fy).round() as usize;
            (b < nb).then_some(b)
        })
        .collect();
    let mut count = vec![0usize; nb];
    bin.iter().flatten().for_each(|&b| count[b] += 1);
    let fft = FftPlanner::new().plan_fft_forward(side);
    let per_image: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![Complex64::new(0.0, 0.0); npix], vec![Complex64::new(0.0, 0.0); npix]),
            |(buf, scratch), i| {
                for ((b, v), m) in buf.iter_mut().zip(stack.image(i)).zip(&mean) {
                    *b = Complex64::new(v - m, 0.0);
                }
                fft2(buf, scratch, side, fft.as_ref());
                let mut tot = vec![0.0; nb];
                for (v, b) in buf.iter().zip(&bin) {
                    if let Some(b) = b {
                        tot[*b] += v.norm_sqr() / npix as f64;
                    }
                }
                tot
            },
        )
        .collect();
    let mut avg = vec![0.0; nb];
    for t in &per_image {
        avg.iter_mut().zip(t).for_each(|(a, v)| *a += v);
    }
    // the mean image removal leaves (n-1)/n of the variance
    let scale = 1.0 / (n - 1) as f64;
    avg.iter_mut().zip(&count).for_each(|(a, &c)| *a *= scale / c.max(1) as f64);
    (count, avg, per_image)
}

/// Band limit in cycles/pixel: the frequency holding `fraction` of the
/// noise-subtracted mean power spectrum over `(0, 1/2]`.
pub fn estimate_bandlimit(stack: &ImageStack, sigma2: f64, fraction: f64) -> Result<f64> {
    check_stack(stack)?;
    check_fraction(fraction)?;
    let side = stack.side();
    let n = stack.len();
    let (count, prof, per_image) = radial_power(stack);
    let mut count = count;
    count[0] = 0;
    let excess: Vec<f64> = prof.iter().map(|v| v - sigma2).collect();
    let t: Vec<f64> = per_image.iter().map(|b| b[1..].iter().sum()).collect();
    let tm = t.iter().sum::<f64>() / n as f64;
    let tvar = t.iter().map(|v| (v - tm).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m: usize = count.iter().sum();
    let m_outer: usize = count_outer_pixels(side);
    let noise_term = (m as f64 * sigma2).powi(2) * 2.0 / (n as f64 * m_outer as f64);
    let se = (tvar / n as f64 + noise_term).sqrt();
    let b = cumulative_cutoff(&count, &excess, se, fraction, "spectral")?;
    Ok(b as f64 / side as f64)
}

fn count_outer_pixels(side: usize) -> usize {
    let (count, _) = radial_bins(side, &vec![0.0; side * side]);
    count[outer_bins(side)].iter().sum()
}

/// White-noise model of the coefficient blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma2: f64,
    n_images: usize,
    gamma: Vec<f64>,
}

impl NoiseModel {
    /// `gamma_0 = p_0 / n` and `gamma_k = p_k / (2n)` for `k > 0`.
    pub fn new(sigma2: f64, n_images: usize, p: &[usize]) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Argument(format!("noise variance must be finite and >= 0, got {sigma2}")));
        }
        if n_images == 0 {
            return Err(Error::Argument("noise model needs n >= 1".into()));
        }
        let gamma = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| pk as f64 / if k == 0 { n_images as f64 } else { 2.0 * n_images as f64 })
            .collect();
        Ok(NoiseModel { sigma2, n_images, gamma })
    }

    pub fn for_basis(sigma2: f64, basis: &SteerableBasis) -> Result<Self> {
        let p: Vec<usize> = (0..=basis.k_max()).map(|k| basis.p_k(k)).collect();
        Self::new(sigma2, basis.n_images(), &p)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn gamma(&self, k: usize) -> f64 {
        self.gamma[k]
    }

    pub fn k_max(&self) -> usize {
        self.gamma.len() - 1
    }

    /// Upper Marchenko-Pastur edge `sigma^2 (1 + sqrt(gamma_k))^2`.
    pub fn edge(&self, k: usize) -> f64 {
        mp_edge(self.sigma2, self.gamma[k])
    }
}

pub fn mp_edge(sigma2: f64, gamma: f64) -> f64 {
    sigma2 * (1.0 + gamma.sqrt()).powi(2)
}

/// Per-`k` mask of components with eigenvalue above the edge.
pub fn select_components(basis: &SteerableBasis, model: &NoiseModel) -> Result<Vec<Vec<bool>>> {
    if model.k_max() != basis.k_max() || model.n_images() != basis.n_images() {
        return Err(Error::Config("noise model does not match the steerable basis".into()));
    }
    Ok((0..=basis.k_max())
        .map(|k| {
            let edge = model.edge(k);
            basis.eigenvalues(k).iter().map(|&l| l > edge).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shrinkage {
    Soft,
    #[default]
    Spiked,
}

impl std::str::FromStr for Shrinkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Shrinkage::Soft),
            "spiked" => Ok(Shrinkage::Spiked),
            _ => Err(Error::Config(format!("unknown shrinkage mode {s:?} (soft | spiked)"))),
        }
    }
}

/// Clean-eigenvalue estimate `l` and filter weight `h = l / (l + sigma^2)`.
pub fn shrink_eigenvalue(lambda: f64, sigma2: f64, gamma: f64, mode: Shrinkage) -> (f64, f64) {
    let ell = match mode {
        Shrinkage::Soft => (lambda - sigma2).max(0.0),
        Shrinkage::Spiked => {
            if lambda > mp_edge(sigma2, gamma) {
                let b = lambda - sigma2 * (1.0 + gamma);
                let disc = (b * b - 4.0 * gamma * sigma2 * sigma2).max(0.0);
                (b + disc.sqrt()) / 2.0
            } else {
                0.0
            }
        }
    };
    let h = if ell + sigma2 > 0.0 { ell / (ell + sigma2) } else { 0.0 };
    (ell, h)
}

/// Filter weights per `(k, l)`: shrinkage for selected components, 0 for
/// the rest.
pub fn filter_weights(
    basis: &SteerableBasis,
    model: &NoiseModel,
    selection: &[Vec<bool>],
    mode: Shrinkage,
) -> Vec<Vec<f64>> {
    (0..=basis.k_max())
        .map(|k| {
            basis
                .eigenvalues(k)
                .iter()
                .zip(&selection[k])
                .map(|(&l, &sel)| if sel { shrink_eigenvalue(l, model.sigma2(), model.gamma(k), mode).1 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Denoised Fourier-Bessel coefficients: the `k = 0` mean plus
/// `sum_l h_l c_{k,l} u_l` over the centered coefficients.
pub fn denoise_coeffs(coeffs: &FBCoeffs, basis: &SteerableBasis, weights: &[Vec<f64>]) -> Result<FBCoeffs> {
    let spec = coeffs.spec();
    if basis.spec().p() != spec.p() || weights.len() != spec.k_max() + 1 {
        return Err(Error::Config("coefficients, basis and weights disagree".into()));
    }
    let mean = mean_coeffs(coeffs)?;
    let centered = center_coeffs(coeffs)?;
    let eig: Vec<_> = (0..=spec.k_max()).map(|k| basis.eigenpairs(k).clone()).collect();
    let c = spca_coeffs(&centered, &eig)?;
    let mut out = FBCoeffs::zeros(spec.clone(), coeffs.side(), coeffs.len());
    for i in 0..coeffs.len() {
        for k in 0..=spec.k_max() {
            let dst = out.block_mut(i, k);
            for (l, (&h, &cl)) in weights[k].iter().zip(c.block(i, k)).enumerate() {
                if h != 0.0 {
                    let u = basis.eigenvector(k, l);
                    dst.iter_mut().zip(u).for_each(|(d, &uq)| *d += h * cl * uq);
                }
            }
        }
        out.block_mut(i, 0).iter_mut().zip(&mean).for_each(|(d, &m)| d.re += m);
    }
    Ok(out)
}

/// Eigenimages `G^{k,l}(x) = sum_q u_l(q) F^-1(psi^{k,q})(x)` for the
/// components with nonzero weight, plus the mean image.
struct Eigenimages {
    mean: Vec<f64>,
    /// `(k, l, G)` per retained component.
    images: Vec<(usize, usize, Vec<Complex64>)>,
}

fn eigenimages(basis: &SteerableBasis, mean: &[f64], weights: &[Vec<f64>], side: usize) -> Eigenimages {
    let spec = basis.spec();
    let keep: Vec<(usize, usize)> = (0..=spec.k_max())
        .flat_map(|k| weights[k].iter().enumerate().filter(|(_, &h)| h != 0.0).map(move |(l, _)| (k, l)))
        .collect();
    let npix = side * side;
    let per_pixel: Vec<(f64, Vec<Complex64>)> = (0..npix)
        .into_par_iter()
        .map_init(
            || (vec![0.0; spec.n_coeffs()], vec![Complex64::new(0.0, 0.0); spec.k_max() + 1]),
            |(radial, angular), pix| {
                let (r, phi) = pixel_polar(side, pix % side, pix / side);
                real_space_factors(spec, r, phi, radial, angular);
                let off0 = spec.offset(0);
                let m: f64 = mean.iter().zip(&radial[off0..off0 + spec.p_k(0)]).map(|(a, b)| a * b).sum();
                let g = keep
                    .iter()
                    .map(|&(k, l)| {
                        let o = spec.offset(k);
                        let s: f64 = basis.eigenvector(k, l).iter().zip(&radial[o..o + spec.p_k(k)]).map(|(u, v)| u * v).sum();
                        angular[k] * s
                    })
                    .collect();
                (m, g)
            },
        )
        .collect();
    let mean_img = per_pixel.iter().map(|(m, _)| *m).collect();
    let images = keep
        .iter()
        .enumerate()
        .map(|(t, &(k, l))| (k, l, per_pixel.iter().map(|(_, g)| g[t]).collect()))
        .collect();
    Eigenimages { mean: mean_img, images }
}

/// Real-space denoised images
/// `mean + sum_{(k,l)} w_k Re{h_l c_{k,l} G^{k,l}}` with `w_0 = 1`, `w_k = 2`.
pub fn denoise_images(coeffs: &FBCoeffs, basis: &SteerableBasis, weights: &[Vec<f64>], side: usize) -> Result<ImageStack> {
    let spec = coeffs.spec();
    if basis.spec().p() != spec.p() || weights.len() != spec.k_max() + 1 {
        return Err(Error::Config("coefficients, basis and weights disagree".into()));
    }
    if weights.iter().zip(spec.p()).any(|(w, &p)| w.len() != p) {
        return Err(Error::Config("weights do not match p_k".into()));
    }
    if side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    let mean = mean_coeffs(coeffs)?;
    let centered = center_coeffs(coeffs)?;
    let eig: Vec<_> = (0..=spec.k_max()).map(|k| basis.eigenpairs(k).clone()).collect();
    let c = spca_coeffs(&centered, &eig)?;
    let g = eigenimages(basis, &mean, weights, side);
    let npix = side * side;
    let mut data = vec![0.0; coeffs.len() * npix];
    data.par_chunks_mut(npix).enumerate().for_each(|(i, dst)| {
        dst.copy_from_slice(&g.mean);
        for (k, l, img) in &g.images {
            let hc = weights[*k][*l] * c.block(i, *k)[*l];
            let w = if *k == 0 { 1.0 } else { 2.0 };
            for (d, gv) in dst.iter_mut().zip(img) {
                *d += w * (hc * gv).re;
            }
        }
    });
    ImageStack::new(coeffs.len(), side, data)
}

/// Dense-PCA denoising: projects the disk pixels onto the eigenimages above
/// the Marchenko-Pastur edge (`gamma = pixels / n`) with the same
/// shrinkage. Pixels outside the disk are set to the mean, which is zero
/// there by construction.
pub fn baseline_denoise(stack: &ImageStack, pca: &BaselinePca, sigma2: f64, mode: Shrinkage) -> Result<ImageStack> {
    if stack.side() != pca.side {
        return Err(Error::Config("stack and baseline PCA sizes differ".into()));
    }
    let m = pca.n_pixels();
    let gamma = m as f64 / pca.n_images as f64;
    let edge = mp_edge(sigma2, gamma);
    let keep: Vec<(usize, f64)> = pca
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > edge)
        .map(|(l, &lam)| (l, shrink_eigenvalue(lam, sigma2, gamma, mode).1))
        .collect();
    let npix = stack.side() * stack.side();
    let mut data = vec![0.0; stack.len() * npix];
    data.par_chunks_mut(npix).enumerate().for_each(|(i, dst)| {
        let img = stack.image(i);
        let x: Vec<f64> = pca.pixels.iter().zip(&pca.mean).map(|(&p, mu)| img[p] - mu).collect();
        let mut y = pca.mean.clone();
        for &(l, h) in &keep {
            let u = pca.eigenimage(l);
            let c: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
            y.iter_mut().zip(u).for_each(|(v, &b)| *v += h * c * b);
        }
        for (&p, v) in pca.pixels.iter().zip(y) {
            dst[p] = v;
        }
    });
    ImageStack::new(stack.len(), stack.side(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    /// `+inf` for an exact match.
    pub psnr: f64,
}

/// MSE over pixels with `r <= R` and PSNR with peak `max |clean|` over the
/// same disk.
pub fn metrics(clean: &ImageStack, test: &ImageStack, radius: f64) -> Result<Vec<ImageMetrics>> {
    if clean.len() != test.len() || clean.side() != test.side() {
        return Err(Error::Shape(format!(
            "clean {}x{}, test {}x{}",
            clean.len(),
            clean.side(),
            test.len(),
            test.side()
        )));
    }
    let pixels = crate::spca::disk_pixels(clean.side(), radius);
    if pixels.is_empty() {
        return Err(Error::Argument(format!("no pixels within radius {radius}")));
    }
    Ok((0..clean.len())
        .map(|i| {
            let (a, b) = (clean.image(i), test.image(i));
            let mse = pixels.iter().map(|&p| (a[p] - b[p]).powi(2)).sum::<f64>() / pixels.len() as f64;
            let peak = pixels.iter().fold(0.0f64, |m, &p| m.max(a[p].abs()));
            let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() };
            ImageMetrics { mse, psnr }
        })
        .collect())
}

pub fn mean_psnr(m: &[ImageMetrics]) -> f64 {
    m.iter().map(|v| v.psnr).sum::<f64>() / m.len() as f64
}

pub fn mean_mse(m: &[ImageMetrics]) -> f64 {
    m.iter().map(|v| v.mse).sum::<f64>() / m.len() as f64
}

/// CSV with columns `index,mse,psnr`; infinite PSNR becomes the sentinel.
pub fn write_metrics_csv<W: Write>(m: &[ImageMetrics], mut w: W) -> Result<()> {
    writeln!(w, "index,mse,psnr")?;
    for (i, v) in m.iter().enumerate() {
        let psnr = if v.psnr.is_finite() { v.psnr } else { PSNR_SENTINEL };
        writeln!(w, "{i},{:e},{}", v.mse, psnr)?;
    }
    Ok(())
}

/// Summary of a denoising run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub n_images: usize,
    pub sigma2: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    pub c: f64,
    pub shrinkage: Shrinkage,
    pub selected_per_k: Vec<usize>,
    pub total_selected: usize,
    pub weights: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_psnr: Option<f64>,
}

impl DenoiseReport {
    pub fn new(model: &NoiseModel, basis: &SteerableBasis, selection: &[Vec<bool>], weights: Vec<Vec<f64>>, mode: Shrinkage) -> Self {
        let selected_per_k: Vec<usize> = selection.iter().map(|s| s.iter().filter(|&&b| b).count()).collect();
        DenoiseReport {
            n_images: model.n_images(),
            sigma2: model.sigma2(),
            radius: basis.spec().radius() as f64,
            c: basis.spec().c(),
            shrinkage: mode,
            total_selected: selected_per_k.iter().sum(),
            selected_per_k,
            weights,
            mean_mse: None,
            mean_psnr: None,
        }
    }

    /// Attaches metrics; an infinite mean PSNR is stored as the sentinel.
    pub fn with_metrics(mut self, m: &[ImageMetrics]) -> Self {
        let p = mean_psnr(m);
        self.mean_mse = Some(mean_mse(m));
        self.mean_psnr = Some(if p.is_finite() { p } else { PSNR_SENTINEL });
        self
    }
}
