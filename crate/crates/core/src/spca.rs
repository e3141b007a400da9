//! Steerable PCA: rotation- and reflection-invariant block covariance of
//! Fourier-Bessel coefficients, its per-frequency eigendecomposition, and a
//! dense pixel PCA baseline.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, RadialTable};
use crate::error::{Error, Result};
use crate::fbcoeff::{mean_coeffs, ByteCursor, FBCoeffs};
use crate::image::{pixel_polar, ImageStack};

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;
const MAX_BASELINE_SIDE: usize = 128;

/// The symmetric blocks `C^(k)`, each row-major `p_k x p_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCovariance {
    p: Vec<usize>,
    blocks: Vec<Vec<f64>>,
}

impl BlockCovariance {
    pub fn from_blocks(p: Vec<usize>, blocks: Vec<Vec<f64>>) -> Result<Self> {
        if p.len() != blocks.len() || p.iter().zip(&blocks).any(|(&pk, b)| b.len() != pk * pk) {
            return Err(Error::Shape("covariance blocks do not match p_k".into()));
        }
        Ok(BlockCovariance { p, blocks })
    }

    pub fn k_max(&self) -> usize {
        self.p.len() - 1
    }

    pub fn p_k(&self, k: usize) -> usize {
        self.p[k]
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.blocks[k]
    }

    pub fn get(&self, k: usize, q1: usize, q2: usize) -> f64 {
        self.blocks[k][q1 * self.p[k] + q2]
    }

    /// `sum_k w_k trace(C^(k))` with `w_0 = 1` and `w_k = 2` otherwise.
    pub fn weighted_trace(&self) -> f64 {
        (0..self.p.len())
            .map(|k| {
                let t: f64 = (0..self.p[k]).map(|q| self.get(k, q, q)).sum();
                if k == 0 { t } else { 2.0 * t }
            })
            .sum()
    }
}

/// Copy of `coeffs` with the `k = 0` sample mean removed.
pub fn center_coeffs(coeffs: &FBCoeffs) -> Result<FBCoeffs> {
    let mean = mean_coeffs(coeffs)?;
    let mut out = coeffs.clone();
    for i in 0..out.len() {
        for (v, m) in out.block_mut(i, 0).iter_mut().zip(&mean) {
            v.re -= m;
        }
    }
    Ok(out)
}

/// `[Re A | Im A] / sqrt(n)` for block `k`, `p_k x 2n`.
fn real_augmented(coeffs: &FBCoeffs, k: usize) -> DMatrix<f64> {
    let n = coeffs.len();
    let pk = coeffs.spec().p_k(k);
    let scale = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(pk, 2 * n, |q, col| {
        let v = coeffs.block(col % n, k)[q];
        scale * if col < n { v.re } else { v.im }
    })
}

/// Centers the `k = 0` block, then forms `C^(k) = Re{A^(k) A^(k)*} / n`.
/// Sums run in image order independent of the worker count.
pub fn block_covariance(coeffs: &FBCoeffs) -> Result<BlockCovariance> {
    let centered = center_coeffs(coeffs)?;
    let spec = coeffs.spec();
    let n = coeffs.len();
    let blocks = (0..=spec.k_max())
        .into_par_iter()
        .map(|k| {
            let pk = spec.p_k(k);
            let mut c = vec![0.0; pk * pk];
            for i in 0..n {
                let a = centered.block(i, k);
                for q1 in 0..pk {
                    for q2 in q1..pk {
                        c[q1 * pk + q2] += a[q1].re * a[q2].re + a[q1].im * a[q2].im;
                    }
                }
            }
            for q1 in 0..pk {
                for q2 in q1..pk {
                    let v = c[q1 * pk + q2] / n as f64;
                    c[q1 * pk + q2] = v;
                    c[q2 * pk + q1] = v;
                }
            }
            c
        })
        .collect();
    Ok(BlockCovariance {
        p: spec.p().to_vec(),
        blocks,
    })
}

/// Eigenvalues (descending) and orthonormal eigenvectors of one block.
/// `vectors[l * p + q]` is component `q` of eigenvector `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl Eigenpairs {
    pub fn p(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, l: usize) -> &[f64] {
        let p = self.p();
        &self.vectors[l * p..(l + 1) * p]
    }

    pub fn identity(p: usize) -> Self {
        let mut vectors = vec![0.0; p * p];
        for q in 0..p {
            vectors[q * p + q] = 1.0;
        }
        Eigenpairs {
            values: vec![0.0; p],
            vectors,
        }
    }
}

/// Sorts descending and flips each vector so its first non-negligible
/// component is positive.
fn normalize_pairs(mut pairs: Vec<(f64, Vec<f64>)>) -> Eigenpairs {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let p = pairs.len();
    let mut values = Vec::with_capacity(p);
    let mut vectors = Vec::with_capacity(p * p);
    for (v, mut u) in pairs {
        if let Some(first) = u.iter().copied().find(|x| x.abs() > 1e-10) {
            if first < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
            }
        }
        values.push(v);
        vectors.extend(u);
    }
    Eigenpairs { values, vectors }
}

fn eig_block(c: &[f64], p: usize, k: usize) -> Result<Eigenpairs> {
    if p == 0 {
        return Ok(Eigenpairs { values: vec![], vectors: vec![] });
    }
    let m = DMatrix::from_row_slice(p, p, c);
    let eig = SymmetricEigen::try_new(m, EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::Numeric(format!("eigendecomposition of block k = {k} did not converge")))?;
    let pairs = (0..p)
        .map(|l| (eig.eigenvalues[l], eig.eigenvectors.column(l).iter().copied().collect()))
        .collect();
    Ok(normalize_pairs(pairs))
}

/// Symmetric eigendecomposition of every block.
pub fn block_eig(cov: &BlockCovariance) -> Result<Vec<Eigenpairs>> {
    (0..=cov.k_max())
        .into_par_iter()
        .map(|k| eig_block(cov.block(k), cov.p_k(k), k))
        .collect()
}

fn svd_block(centered: &FBCoeffs, k: usize) -> Result<Eigenpairs> {
    let p = centered.spec().p_k(k);
    if p == 0 {
        return Ok(Eigenpairs { values: vec![], vectors: vec![] });
    }
    let b = real_augmented(centered, k);
    let svd = SVD::try_new(b, true, false, EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::Numeric(format!("SVD of block k = {k} did not converge")))?;
    let u = svd.u.as_ref().ok_or_else(|| Error::Internal("SVD without left factor".into()))?;
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..svd.singular_values.len())
        .map(|l| (svd.singular_values[l].powi(2), u.column(l).iter().copied().collect()))
        .collect();
    // a short block (2n < p_k) leaves the null space out; complete it
    if pairs.len() < p {
        for e in 0..p {
            if pairs.len() == p {
                break;
            }
            let mut v = vec![0.0; p];
            v[e] = 1.0;
            for _ in 0..2 {
                for (_, w) in &pairs {
                    let d: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(w).for_each(|(a, b)| *a -= d * b);
                }
            }
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= nrm);
                pairs.push((0.0, v));
            }
        }
    }
    Ok(normalize_pairs(pairs))
}

/// Left singular vectors of the real-augmented centered blocks
/// `[Re A | Im A] / sqrt(n)`; squared singular values are the eigenvalues of
/// `C^(k)`.
pub fn block_svd(coeffs: &FBCoeffs) -> Result<Vec<Eigenpairs>> {
    let centered = center_coeffs(coeffs)?;
    (0..=coeffs.spec().k_max())
        .into_par_iter()
        .map(|k| svd_block(&centered, k))
        .collect()
}

/// `f^{k,l}(xi_j) = sum_q table[k][q][j] u_l(q)`, row-major `p_k x n_xi`
/// per `k`.
pub fn radial_eigenfunctions(table: &RadialTable, eig: &[Eigenpairs]) -> Result<Vec<Vec<f64>>> {
    if eig.len() != table.k_max() + 1 {
        return Err(Error::Config("eigenpairs do not match the radial table".into()));
    }
    let nx = table.n_xi();
    eig.iter()
        .enumerate()
        .map(|(k, e)| {
            let p = table.p_k(k);
            if e.p() != p {
                return Err(Error::Config(format!("block k = {k} has {} eigenpairs, expected {p}", e.p())));
            }
            let mut f = vec![0.0; p * nx];
            for l in 0..p {
                let u = e.vector(l);
                let dst = &mut f[l * nx..(l + 1) * nx];
                for (q, &uq) in u.iter().enumerate() {
                    for (d, &t) in dst.iter_mut().zip(table.row(k, q)) {
                        *d += uq * t;
                    }
                }
            }
            Ok(f)
        })
        .collect()
}

/// Steerable principal components: per-`k` eigenpairs of the block
/// covariance plus their radial functions on the quadrature radii.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerableBasis {
    spec: BasisSpec,
    n_images: usize,
    n_xi: usize,
    eig: Vec<Eigenpairs>,
    radial: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    format: String,
    c: f64,
    #[serde(rename = "R")]
    radius: u32,
    n_images: usize,
    n_xi: usize,
    k: Vec<usize>,
    p: Vec<usize>,
    eigenvalues: Vec<Vec<f64>>,
}

const BASIS_FORMAT: &str = "ffbspca-steerable-basis-1";

impl SteerableBasis {
    pub fn new(spec: BasisSpec, n_images: usize, table: &RadialTable, eig: Vec<Eigenpairs>) -> Result<Self> {
        let radial = radial_eigenfunctions(table, &eig)?;
        Ok(SteerableBasis {
            spec,
            n_images,
            n_xi: table.n_xi(),
            eig,
            radial,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    /// Number of images the covariance was estimated from.
    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_xi(&self) -> usize {
        self.n_xi
    }

    pub fn k_max(&self) -> usize {
        self.eig.len() - 1
    }

    pub fn p_k(&self, k: usize) -> usize {
        self.eig[k].p()
    }

    pub fn eigenpairs(&self, k: usize) -> &Eigenpairs {
        &self.eig[k]
    }

    pub fn eigenvalues(&self, k: usize) -> &[f64] {
        &self.eig[k].values
    }

    pub fn eigenvector(&self, k: usize, l: usize) -> &[f64] {
        self.eig[k].vector(l)
    }

    /// Samples of `f^{k,l}` at the quadrature radii.
    pub fn radial(&self, k: usize, l: usize) -> &[f64] {
        &self.radial[k][l * self.n_xi..(l + 1) * self.n_xi]
    }

    /// Writes `<stem>.json` (header and eigenvalues) and `<stem>.bin`
    /// (eigenvectors then radial samples, f64 little-endian, k ascending).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = BasisHeader {
            format: BASIS_FORMAT.into(),
            c: self.spec.c(),
            radius: self.spec.radius(),
            n_images: self.n_images,
            n_xi: self.n_xi,
            k: (0..self.eig.len()).collect(),
            p: self.eig.iter().map(|e| e.p()).collect(),
            eigenvalues: self.eig.iter().map(|e| e.values.clone()).collect(),
        };
        let (json, bin) = basis_paths(stem);
        fs::write(json, serde_json::to_string_pretty(&header)?)?;
        let mut buf = Vec::new();
        for e in &self.eig {
            e.vectors.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        for f in &self.radial {
            f.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        fs::write(bin, buf)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json, bin) = basis_paths(stem);
        let header: BasisHeader = serde_json::from_str(&fs::read_to_string(json)?)?;
        if header.format != BASIS_FORMAT {
            return Err(Error::format(0, format!("unknown basis format {:?}", header.format)));
        }
        let spec = crate::basis::build_basis(header.c, header.radius)?;
        if header.p != spec.p() || header.eigenvalues.len() != header.p.len() {
            return Err(Error::format(0, "basis header does not match rebuilt basis"));
        }
        let bytes = fs::read(bin)?;
        let mut cur = ByteCursor::new(&bytes);
        let mut eig = Vec::with_capacity(header.p.len());
        for (k, &p) in header.p.iter().enumerate() {
            if header.eigenvalues[k].len() != p {
                return Err(Error::format(0, format!("block k = {k} lists the wrong eigenvalue count")));
            }
            let vectors = (0..p * p).map(|_| cur.f64("eigenvector")).collect::<Result<Vec<_>>>()?;
            eig.push(Eigenpairs {
                values: header.eigenvalues[k].clone(),
                vectors,
            });
        }
        let mut radial = Vec::with_capacity(header.p.len());
        for &p in &header.p {
            radial.push((0..p * header.n_xi).map(|_| cur.f64("radial sample")).collect::<Result<Vec<_>>>()?);
        }
        cur.finish()?;
        Ok(SteerableBasis {
            spec,
            n_images: header.n_images,
            n_xi: header.n_xi,
            eig,
            radial,
        })
    }
}

fn basis_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Full steerable PCA of a coefficient set. Blocks with fewer images than
/// radial functions use the SVD route, the rest the covariance route.
pub fn steerable_pca(coeffs: &FBCoeffs, table: &RadialTable) -> Result<SteerableBasis> {
    let n = coeffs.len();
    if n == 0 {
        return Err(Error::Argument("steerable PCA of an empty coefficient set".into()));
    }
    let centered = center_coeffs(coeffs)?;
    let cov = block_covariance(coeffs)?;
    let eig = (0..=coeffs.spec().k_max())
        .into_par_iter()
        .map(|k| {
            let p = cov.p_k(k);
            if n < p {
                svd_block(&centered, k)
            } else {
                eig_block(cov.block(k), p, k)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SteerableBasis::new(coeffs.spec().clone(), n, table, eig)
}

/// `c^i_{k,l} = sum_q a^i_{k,q} u^(k)_l(q)` in the same flat layout as the
/// Fourier-Bessel coefficients (`l` in place of `q`).
#[derive(Debug, Clone, PartialEq)]
pub struct SPCACoeffs {
    p: Vec<usize>,
    offsets: Vec<usize>,
    n_images: usize,
    data: Vec<Complex64>,
}

impl SPCACoeffs {
    pub fn len(&self) -> usize {
        self.n_images
    }

    pub fn is_empty(&self) -> bool {
        self.n_images == 0
    }

    pub fn k_max(&self) -> usize {
        self.p.len() - 1
    }

    pub fn p_k(&self, k: usize) -> usize {
        self.p[k]
    }

    pub fn image(&self, i: usize) -> &[Complex64] {
        let m = self.offsets[self.p.len()];
        &self.data[i * m..(i + 1) * m]
    }

    pub fn block(&self, i: usize, k: usize) -> &[Complex64] {
        &self.image(i)[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn block_mut(&mut self, i: usize, k: usize) -> &mut [Complex64] {
        let m = self.offsets[self.p.len()];
        let (lo, hi) = (self.offsets[k], self.offsets[k + 1]);
        &mut self.data[i * m + lo..i * m + hi]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

/// Projects (already centered) coefficients onto the eigenvectors.
pub fn spca_coeffs(coeffs: &FBCoeffs, eig: &[Eigenpairs]) -> Result<SPCACoeffs> {
    let spec = coeffs.spec();
    if eig.len() != spec.k_max() + 1 || eig.iter().enumerate().any(|(k, e)| e.p() != spec.p_k(k)) {
        return Err(Error::Config("eigenpairs do not match the coefficient basis".into()));
    }
    let m = spec.n_coeffs();
    let mut data = vec![Complex64::new(0.0, 0.0); coeffs.len() * m];
    data.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, dst)| {
        for (k, e) in eig.iter().enumerate() {
            let a = coeffs.block(i, k);
            let off = spec.offset(k);
            for l in 0..e.p() {
                dst[off + l] = a.iter().zip(e.vector(l)).map(|(v, &u)| v * u).sum();
            }
        }
    });
    Ok(SPCACoeffs {
        p: spec.p().to_vec(),
        offsets: (0..=spec.k_max() + 1).map(|k| spec.offset(k)).collect(),
        n_images: coeffs.len(),
        data,
    })
}

/// Dense PCA over the pixels within radius `R`, without rotations.
#[derive(Debug, Clone)]
pub struct BaselinePca {
    pub side: usize,
    /// Flat indices of the pixels inside the disk.
    pub pixels: Vec<usize>,
    pub mean: Vec<f64>,
    /// Descending; one per pixel in the disk.
    pub eigenvalues: Vec<f64>,
    /// `eigenimages[l * pixels.len() + m]`, restricted to the disk.
    pub eigenimages: Vec<f64>,
    pub n_images: usize,
}

impl BaselinePca {
    pub fn n_pixels(&self) -> usize {
        self.pixels.len()
    }

    pub fn eigenimage(&self, l: usize) -> &[f64] {
        let m = self.pixels.len();
        &self.eigenimages[l * m..(l + 1) * m]
    }

    /// Eigenimage `l` on the full `side x side` grid.
    pub fn full_eigenimage(&self, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.side * self.side];
        for (&pix, &v) in self.pixels.iter().zip(self.eigenimage(l)) {
            out[pix] = v;
        }
        out
    }
}

/// Flat indices of the pixels with centered radius `r <= R`.
pub fn disk_pixels(side: usize, radius: f64) -> Vec<usize> {
    (0..side * side)
        .filter(|&pix| pixel_polar(side, pix % side, pix / side).0 <= radius)
        .collect()
}

/// Pixel PCA of the mean-subtracted disk pixels, by covariance
/// eigendecomposition when `n >= pixels` and by thin SVD otherwise.
pub fn baseline_pca(stack: &ImageStack, radius: f64) -> Result<BaselinePca> {
    let side = stack.side();
    if side > MAX_BASELINE_SIDE {
        return Err(Error::Config(format!(
            "baseline PCA is limited to L <= {MAX_BASELINE_SIDE}, got {side}"
        )));
    }
    let n = stack.len();
    if n == 0 {
        return Err(Error::Argument("baseline PCA of an empty stack".into()));
    }
    let pixels = disk_pixels(side, radius);
    let m = pixels.len();
    if m == 0 {
        return Err(Error::Argument(format!("no pixels within radius {radius}")));
    }
    let mut mean = vec![0.0; m];
    for i in 0..n {
        let img = stack.image(i);
        for (s, &pix) in mean.iter_mut().zip(&pixels) {
            *s += img[pix];
        }
    }
    mean.iter_mut().for_each(|s| *s /= n as f64);
    let scale = 1.0 / (n as f64).sqrt();
    // m x n data matrix, columns are centered images
    let x = DMatrix::from_fn(m, n, |r, i| scale * (stack.image(i)[pixels[r]] - mean[r]));
    let pairs: Vec<(f64, Vec<f64>)> = if n >= m {
        let cov = &x * x.transpose();
        let eig = SymmetricEigen::try_new(cov, EIG_EPS, EIG_MAX_ITER)
            .ok_or_else(|| Error::Numeric("baseline PCA eigendecomposition did not converge".into()))?;
        (0..m)
            .map(|l| (eig.eigenvalues[l], eig.eigenvectors.column(l).iter().copied().collect()))
            .collect()
    } else {
        let svd = SVD::try_new(x, true, false, EIG_EPS, EIG_MAX_ITER)
            .ok_or_else(|| Error::Numeric("baseline PCA SVD did not converge".into()))?;
        let u = svd.u.as_ref().ok_or_else(|| Error::Internal("SVD without left factor".into()))?;
        (0..svd.singular_values.len())
            .map(|l| (svd.singular_values[l].powi(2), u.column(l).iter().copied().collect()))
            .collect()
    };
    let e = normalize_pairs(pairs);
    Ok(BaselinePca {
        side,
        pixels,
        mean,
        eigenvalues: e.values,
        eigenimages: e.vectors,
        n_images: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::fbcoeff::{reflect_coeffs, rotate_coeffs};
    use crate::polarft::{make_polar_grid, PolarGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_coeffs(spec: &BasisSpec, n: usize, seed: u64) -> FBCoeffs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * spec.n_coeffs());
        for _ in 0..n {
            for k in 0..=spec.k_max() {
                for q in 0..spec.p_k(k) {
                    // uneven scales keep the spectrum non-degenerate
                    let s = 1.0 / (1.0 + k as f64 + 0.7 * q as f64);
                    let re = s * rng.random_range(-1.0..1.0);
                    let im = if k == 0 { 0.0 } else { s * rng.random_range(-1.0..1.0) };
                    data.push(Complex64::new(re + if k == 0 { 0.3 } else { 0.0 }, im));
                }
            }
        }
        FBCoeffs::new(spec.clone(), 0, n, data).unwrap()
    }

    fn max_block_diff(a: &BlockCovariance, b: &BlockCovariance) -> f64 {
        (0..=a.k_max())
            .flat_map(|k| a.block(k).iter().zip(b.block(k)).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    fn table_for(spec: &BasisSpec) -> RadialTable {
        let grid = make_polar_grid(spec.c(), spec.radius()).unwrap();
        RadialTable::new(spec, grid.rule()).unwrap()
    }

    #[test]
    fn single_image_covariance() {
        let spec = build_basis(0.5, 6).unwrap();
        let a = random_coeffs(&spec, 1, 1);
        let cov = block_covariance(&a).unwrap();
        assert!(cov.block(0).iter().all(|&v| v == 0.0));
        for k in 1..=spec.k_max() {
            let b = a.block(0, k);
            let p = spec.p_k(k);
            for q1 in 0..p {
                for q2 in 0..p {
                    let want = b[q1].re * b[q2].re + b[q1].im * b[q2].im;
                    assert!((cov.get(k, q1, q2) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn empty_set_is_rejected() {
        let spec = build_basis(0.5, 6).unwrap();
        let a = FBCoeffs::zeros(spec, 0, 0);
        assert!(matches!(block_covariance(&a), Err(Error::Argument(_))));
    }

    /// Dense covariance of the dataset augmented by all grid rotations and
    /// the reflection, over the full complex coefficient vector.
    pub(crate) fn augmented_covariance(a: &FBCoeffs, n_theta: usize) -> (Vec<Complex64>, Vec<Complex64>, usize) {
        let spec = a.spec();
        let m = spec.n_coeffs();
        let mut copies = Vec::new();
        for refl in [false, true] {
            let base = if refl { reflect_coeffs(a, 0.0) } else { a.clone() };
            for s in 0..n_theta {
                copies.push(rotate_coeffs(&base, 2.0 * PI * s as f64 / n_theta as f64));
            }
        }
        let total = (copies.len() * a.len()) as f64;
        let mut mean = vec![Complex64::new(0.0, 0.0); m];
        for c in &copies {
            for i in 0..a.len() {
                mean.iter_mut().zip(c.image(i)).for_each(|(s, v)| *s += v / total);
            }
        }
        let mut cov = vec![Complex64::new(0.0, 0.0); m * m];
        let mut pseudo = vec![Complex64::new(0.0, 0.0); m * m];
        for c in &copies {
            for i in 0..a.len() {
                let x: Vec<_> = c.image(i).iter().zip(&mean).map(|(v, mu)| v - mu).collect();
                for r in 0..m {
                    for s in 0..m {
                        cov[r * m + s] += x[r] * x[s].conj() / total;
                        pseudo[r * m + s] += x[r] * x[s] / total;
                    }
                }
            }
        }
        (cov, pseudo, m)
    }

    #[test]
    fn matches_rotation_reflection_augmented_covariance() {
        let spec = build_basis(0.5, 5).unwrap();
        assert!(spec.p().iter().all(|&p| p <= 8));
        let grid = make_polar_grid(0.5, 5).unwrap();
        let a = random_coeffs(&spec, 10, 3);
        let cov = block_covariance(&a).unwrap();
        let (dense, pseudo, m) = augmented_covariance(&a, grid.n_theta());
        let block_of = |idx: usize| (0..=spec.k_max()).find(|&k| idx < spec.offset(k + 1)).unwrap();
        for r in 0..m {
            for s in 0..m {
                let (kr, ks) = (block_of(r), block_of(s));
                let want = if kr == ks {
                    cov.get(kr, r - spec.offset(kr), s - spec.offset(kr))
                } else {
                    0.0
                };
                assert!((dense[r * m + s] - want).norm() < 1e-10, "({r},{s})");
                // a_k and a_{-k} = conj(a_k) decorrelate for k > 0
                if kr > 0 || ks > 0 {
                    assert!(pseudo[r * m + s].norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rotation_and_reflection_leave_covariance_unchanged() {
        let spec = build_basis(0.5, 8).unwrap();
        let a = random_coeffs(&spec, 12, 4);
        let cov = block_covariance(&a).unwrap();
        for alpha in [0.3, 1.7, -2.9] {
            let r = block_covariance(&rotate_coeffs(&a, alpha)).unwrap();
            assert!(max_block_diff(&cov, &r) < 1e-10);
            let f = block_covariance(&reflect_coeffs(&a, alpha)).unwrap();
            assert!(max_block_diff(&cov, &f) < 1e-10);
        }
    }

    #[test]
    fn permutation_and_thread_count() {
        let spec = build_basis(0.5, 8).unwrap();
        let a = random_coeffs(&spec, 15, 5);
        let cov = block_covariance(&a).unwrap();
        let mut perm = FBCoeffs::zeros(spec.clone(), 0, 15);
        for i in 0..15 {
            perm.image_mut(i).copy_from_slice(a.image((i * 7) % 15));
        }
        let e1 = block_eig(&cov).unwrap();
        let e2 = block_eig(&block_covariance(&perm).unwrap()).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            for (u, v) in x.values.iter().zip(&y.values) {
                assert!((u - v).abs() <= 1e-13 * x.values[0].abs().max(1e-300));
            }
        }
        let pool = |t| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
        let one = pool(1).install(|| block_covariance(&a).unwrap());
        let four = pool(4).install(|| block_covariance(&a).unwrap());
        assert_eq!(one, four);
        assert_eq!(one, cov);
    }

    #[test]
    fn total_variance_bookkeeping() {
        let spec = build_basis(0.5, 8).unwrap();
        let a = random_coeffs(&spec, 9, 6);
        let cov = block_covariance(&a).unwrap();
        let centered = center_coeffs(&a).unwrap();
        let energy: f64 = (0..9).map(|i| centered.energy(i)).sum::<f64>() / 9.0;
        assert!((cov.weighted_trace() - energy).abs() < 1e-10 * energy);
    }

    #[test]
    fn eig_examples() {
        let cov = BlockCovariance::from_blocks(vec![2, 3], vec![vec![2.0, 1.0, 1.0, 2.0], vec![1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]]).unwrap();
        let e = block_eig(&cov).unwrap();
        assert!((e[0].values[0] - 3.0).abs() < 1e-14 && (e[0].values[1] - 1.0).abs() < 1e-14);
        let h = 0.5f64.sqrt();
        assert!((e[0].vector(0)[0] - h).abs() < 1e-14 && (e[0].vector(0)[1] - h).abs() < 1e-14);
        assert_eq!(e[1].values, vec![5.0, 3.0, 1.0]);
        assert_eq!(e[1].vectors, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(BlockCovariance::from_blocks(vec![2], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn eig_and_svd_routes_agree() {
        let spec = build_basis(0.5, 8).unwrap();
        for n in [40usize, 3] {
            let a = random_coeffs(&spec, n, 7 + n as u64);
            let e = block_eig(&block_covariance(&a).unwrap()).unwrap();
            let s = block_svd(&a).unwrap();
            for k in 0..=spec.k_max() {
                let top = e[k].values[0].abs().max(1e-300);
                assert_eq!(s[k].p(), spec.p_k(k));
                for l in 0..spec.p_k(k) {
                    assert!((e[k].values[l] - s[k].values[l]).abs() <= 1e-9 * top, "k={k} l={l}");
                    // vectors are unique only for simple eigenvalues
                    let simple = (l == 0 || e[k].values[l - 1] - e[k].values[l] > 1e-6 * top)
                        && (l + 1 == spec.p_k(k) || e[k].values[l] - e[k].values[l + 1] > 1e-6 * top)
                        && e[k].values[l] > 1e-6 * top;
                    if simple {
                        for (x, y) in e[k].vector(l).iter().zip(s[k].vector(l)) {
                            assert!((x - y).abs() < 1e-8, "k={k} l={l}");
                        }
                    }
                }
                // completed bases stay orthonormal
                check_orthonormal(&s[k], 1e-10);
            }
        }
    }

    fn check_orthonormal(e: &Eigenpairs, tol: f64) {
        for l1 in 0..e.p() {
            for l2 in 0..e.p() {
                let d: f64 = e.vector(l1).iter().zip(e.vector(l2)).map(|(a, b)| a * b).sum();
                let want = if l1 == l2 { 1.0 } else { 0.0 };
                assert!((d - want).abs() < tol, "({l1},{l2}) {d}");
            }
        }
    }

    #[test]
    fn radial_eigenfunctions_examples() {
        // at smaller cR the default radial rule leaves ~1e-8 residue
        let spec = build_basis(0.5, 30).unwrap();
        let table = table_for(&spec);
        let ident: Vec<_> = (0..=spec.k_max()).map(|k| Eigenpairs::identity(spec.p_k(k))).collect();
        let f = radial_eigenfunctions(&table, &ident).unwrap();
        for k in 0..=spec.k_max() {
            assert_eq!(f[k].len(), spec.p_k(k) * table.n_xi());
            assert_eq!(&f[k][..], table.block(k));
        }
        let a = random_coeffs(&spec, 50, 8);
        let basis = steerable_pca(&a, &table).unwrap();
        let w = table.xi_weights();
        for k in [0, 1, 5, spec.k_max()] {
            check_orthonormal(basis.eigenpairs(k), 1e-10);
            for l1 in 0..spec.p_k(k) {
                for l2 in 0..spec.p_k(k) {
                    let d: f64 = (0..table.n_xi()).map(|j| basis.radial(k, l1)[j] * basis.radial(k, l2)[j] * w[j]).sum();
                    let want = if l1 == l2 { 1.0 / (2.0 * PI) } else { 0.0 };
                    assert!((d - want).abs() < 1e-8, "k={k} ({l1},{l2}) {d}");
                }
            }
        }
    }

    #[test]
    fn spca_coeffs_examples() {
        let spec = build_basis(0.5, 8).unwrap();
        let a = center_coeffs(&random_coeffs(&spec, 6, 9)).unwrap();
        let ident: Vec<_> = (0..=spec.k_max()).map(|k| Eigenpairs::identity(spec.p_k(k))).collect();
        let c = spca_coeffs(&a, &ident).unwrap();
        assert_eq!(c.data(), a.data());
        let eig = block_eig(&block_covariance(&a).unwrap()).unwrap();
        let c = spca_coeffs(&a, &eig).unwrap();
        for i in 0..6 {
            for k in 0..=spec.k_max() {
                let na: f64 = a.block(i, k).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                let nc: f64 = c.block(i, k).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                assert!((na - nc).abs() < 1e-10 * na.max(1.0));
            }
        }
        let alpha = 0.83;
        let cr = spca_coeffs(&rotate_coeffs(&a, alpha), &eig).unwrap();
        for i in 0..6 {
            for k in 0..=spec.k_max() {
                let ph = Complex64::from_polar(1.0, -(k as f64) * alpha);
                for (x, y) in c.block(i, k).iter().zip(cr.block(i, k)) {
                    assert!((x * ph - y).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn steerable_basis_save_load() {
        let spec = build_basis(0.5, 8).unwrap();
        let table = table_for(&spec);
        let basis = steerable_pca(&random_coeffs(&spec, 20, 10), &table).unwrap();
        for k in 0..=spec.k_max() {
            assert!(basis.eigenvalues(k).windows(2).all(|w| w[0] >= w[1]));
        }
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("basis");
        basis.save(&stem).unwrap();
        assert_eq!(SteerableBasis::load(&stem).unwrap(), basis);
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(SteerableBasis::load(&stem), Err(Error::Format { .. })));
    }

    #[test]
    fn short_blocks_use_svd_route() {
        let spec = build_basis(0.5, 20).unwrap();
        let table = table_for(&spec);
        let a = random_coeffs(&spec, 4, 11);
        let basis = steerable_pca(&a, &table).unwrap();
        let cov = block_covariance(&a).unwrap();
        let e = block_eig(&cov).unwrap();
        for k in 0..=spec.k_max() {
            let top = e[k].values[0].abs().max(1e-300);
            for (x, y) in basis.eigenvalues(k).iter().zip(&e[k].values) {
                assert!((x - y).abs() <= 1e-9 * top);
            }
            check_orthonormal(basis.eigenpairs(k), 1e-10);
        }
    }

    fn noise_stack(n: usize, side: usize, sigma: f64, seed: u64) -> ImageStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * side * side)
            .map(|_| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        ImageStack::new(n, side, data).unwrap()
    }

    #[test]
    fn baseline_examples() {
        let one = noise_stack(1, 16, 1.0, 1);
        let mut rep = ImageStack::zeros(5, 16);
        for i in 0..5 {
            rep.image_mut(i).copy_from_slice(one.image(0));
        }
        let b = baseline_pca(&rep, 6.0).unwrap();
        assert!(b.eigenvalues.iter().all(|v| v.abs() < 1e-20));

        let (n, side, r) = (4000, 16, 6.0);
        let b = baseline_pca(&noise_stack(n, side, 2.0, 2), r).unwrap();
        let m = b.n_pixels() as f64;
        let edge = 4.0 * (1.0 + (m / n as f64).sqrt()).powi(2);
        assert!(b.eigenvalues[0] < 1.1 * edge, "{} vs {edge}", b.eigenvalues[0]);
        for l1 in 0..5 {
            for l2 in 0..5 {
                let d: f64 = b.eigenimage(l1).iter().zip(b.eigenimage(l2)).map(|(x, y)| x * y).sum();
                assert!((d - if l1 == l2 { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        // thin SVD route
        let b = baseline_pca(&noise_stack(20, side, 1.0, 3), r).unwrap();
        assert_eq!(b.eigenvalues.len(), 20);
        assert!(matches!(baseline_pca(&ImageStack::zeros(1, 130), 10.0), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn covariance_is_symmetric_psd(seed in 0u64..10_000, n in 1usize..30) {
            let spec = build_basis(0.5, 6).unwrap();
            let cov = block_covariance(&random_coeffs(&spec, n, seed)).unwrap();
            let eig = block_eig(&cov).unwrap();
            let tr = cov.weighted_trace();
            for k in 0..=spec.k_max() {
                let p = spec.p_k(k);
                for q1 in 0..p {
                    for q2 in 0..p {
                        prop_assert!((cov.get(k, q1, q2) - cov.get(k, q2, q1)).abs() <= 1e-12);
                    }
                }
                prop_assert!(eig[k].values.iter().all(|&v| v >= -1e-10 * tr));
            }
        }
    }

    #[test]
    fn polar_grid_with_more_angles_keeps_covariance() {
        // the augmentation average is exact for any n_theta > 2 k_max
        let spec = build_basis(0.5, 5).unwrap();
        let a = random_coeffs(&spec, 4, 12);
        let cov = block_covariance(&a).unwrap();
        let grid = PolarGrid::with_sizes(0.5, 5, 10, 2 * spec.k_max() + 1).unwrap();
        let (dense, _, m) = augmented_covariance(&a, grid.n_theta());
        for k in 0..=spec.k_max() {
            let o = spec.offset(k);
            for q in 0..spec.p_k(k) {
                assert!((dense[(o + q) * m + o + q].re - cov.get(k, q, q)).abs() < 1e-10);
            }
        }
    }
}
