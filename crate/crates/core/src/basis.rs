//! Truncated Fourier-Bessel basis on the frequency disk of radius `c`.
//!
//! Radial indices `q` are 1-based in the public evaluation functions, matching
//! the usual `R_{k,q}` notation; table storage is 0-based.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfun::{bessel_zeros_through, jn, jn_pair, QuadratureRule};

/// Relative distance `|x^2 - R^2| / R^2` below which the real-space formula
/// switches to a Taylor expansion about the zero.
const SINGULAR_GUARD: f64 = 1e-6;

/// The basis retained by the sampling criterion `R_{k,q+1} <= 2 pi c R`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    c: f64,
    radius: u32,
    p: Vec<usize>,
    /// `zeros[k]` holds `R_{k,1}, ..., R_{k,p_k+1}`.
    zeros: Vec<Vec<f64>>,
    /// `normalizers[k][q-1] = N_{k,q}` for retained `q`.
    normalizers: Vec<Vec<f64>>,
    offsets: Vec<usize>,
}

/// Builds the basis for band limit `c` (cycles/pixel) and support radius `R`
/// (pixels).
pub fn build_basis(c: f64, radius: u32) -> Result<BasisSpec> {
    validate_params(c, radius)?;
    let limit = 2.0 * PI * c * radius as f64;
    let mut p = Vec::new();
    let mut zeros = Vec::new();
    for k in 0.. {
        let mut zs = bessel_zeros_through(k, limit)?;
        let inside = zs.iter().filter(|&&z| z <= limit).count();
        if inside <= 1 {
            break;
        }
        let pk = inside - 1;
        zs.truncate(pk + 1);
        p.push(pk);
        zeros.push(zs);
    }
    if p.is_empty() {
        return Err(Error::Config(format!(
            "no basis function satisfies the sampling criterion for c={c}, R={radius}"
        )));
    }
    BasisSpec::from_parts(c, radius, p, zeros)
}

fn validate_params(c: f64, radius: u32) -> Result<()> {
    if !(c > 0.0 && c <= 0.5) {
        return Err(Error::Config(format!("band limit c must lie in (0, 1/2], got {c}")));
    }
    if radius < 2 {
        return Err(Error::Config(format!("support radius must be >= 2, got {radius}")));
    }
    if c * (radius as f64) < 1.0 {
        return Err(Error::Config(format!(
            "c*R = {} < 1 leaves the basis empty",
            c * radius as f64
        )));
    }
    Ok(())
}

impl BasisSpec {
    fn from_parts(c: f64, radius: u32, p: Vec<usize>, zeros: Vec<Vec<f64>>) -> Result<Self> {
        let normalizers = zeros
            .iter()
            .enumerate()
            .map(|(k, zs)| {
                zs[..zs.len() - 1]
                    .iter()
                    .map(|&z| 1.0 / (c * PI.sqrt() * jn_pair(k, z).1.abs()))
                    .collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity(p.len() + 1);
        let mut acc = 0;
        for &pk in &p {
            offsets.push(acc);
            acc += pk;
        }
        offsets.push(acc);
        Ok(BasisSpec {
            c,
            radius,
            p,
            zeros,
            normalizers,
            offsets,
        })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn k_max(&self) -> usize {
        self.p.len() - 1
    }

    /// Radial counts `p_0, ..., p_kmax`.
    pub fn p(&self) -> &[usize] {
        &self.p
    }

    pub fn p_k(&self, k: usize) -> usize {
        self.p.get(k).copied().unwrap_or(0)
    }

    /// `p_0 + 2 sum_{k>=1} p_k`, the number of real degrees of freedom.
    pub fn p_total(&self) -> usize {
        self.p[0] + 2 * self.p[1..].iter().sum::<usize>()
    }

    /// Number of stored complex coefficients per image (`k >= 0` only).
    pub fn n_coeffs(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Start of block `k` in the flat per-image coefficient layout.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// `R_{k,1}, ..., R_{k,p_k+1}`; the last entry is the first rejected zero.
    pub fn zeros(&self, k: usize) -> &[f64] {
        &self.zeros[k]
    }

    pub fn zero(&self, k: usize, q: usize) -> Result<f64> {
        self.check_index(k, q)?;
        Ok(self.zeros[k][q - 1])
    }

    pub fn normalizers(&self, k: usize) -> &[f64] {
        &self.normalizers[k]
    }

    pub fn normalizer(&self, k: usize, q: usize) -> Result<f64> {
        self.check_index(k, q)?;
        Ok(self.normalizers[k][q - 1])
    }

    pub fn is_retained(&self, k: usize, q: usize) -> bool {
        q >= 1 && k < self.p.len() && q <= self.p[k]
    }

    fn check_index(&self, k: usize, q: usize) -> Result<()> {
        if self.is_retained(k, q) {
            Ok(())
        } else {
            Err(Error::Index { k, q })
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = BasisJson {
            c: self.c,
            r: self.radius,
            k_max: self.k_max(),
            p: self.p.clone(),
            zeros: self.zeros.iter().flatten().copied().collect(),
            normalizers: self.normalizers.iter().flatten().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BasisJson = serde_json::from_str(text)?;
        validate_params(doc.c, doc.r)?;
        if doc.p.len() != doc.k_max + 1 || doc.p.contains(&0) {
            return Err(Error::Config("basis JSON: p must hold k_max+1 positive counts".into()));
        }
        let n_zeros: usize = doc.p.iter().map(|pk| pk + 1).sum();
        let n_norm: usize = doc.p.iter().sum();
        if doc.zeros.len() != n_zeros || doc.normalizers.len() != n_norm {
            return Err(Error::Config(format!(
                "basis JSON: expected {n_zeros} zeros and {n_norm} normalizers, got {} and {}",
                doc.zeros.len(),
                doc.normalizers.len()
            )));
        }
        let mut zeros = Vec::with_capacity(doc.p.len());
        let mut normalizers = Vec::with_capacity(doc.p.len());
        let (mut zi, mut ni) = (0, 0);
        for &pk in &doc.p {
            zeros.push(doc.zeros[zi..zi + pk + 1].to_vec());
            normalizers.push(doc.normalizers[ni..ni + pk].to_vec());
            zi += pk + 1;
            ni += pk;
        }
        let mut spec = BasisSpec::from_parts(doc.c, doc.r, doc.p, zeros)?;
        spec.normalizers = normalizers;
        Ok(spec)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisJson {
    c: f64,
    #[serde(rename = "R")]
    r: u32,
    k_max: usize,
    p: Vec<usize>,
    zeros: Vec<f64>,
    normalizers: Vec<f64>,
}

/// `psi^{k,q}(xi, theta) = N_{k,q} J_k(R_{k,q} xi / c) e^{i k theta}` on the
/// disk, zero outside.
pub fn eval_psi_fourier(spec: &BasisSpec, k: usize, q: usize, xi: f64, theta: f64) -> Result<Complex64> {
    spec.check_index(k, q)?;
    if xi > spec.c {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let radial = spec.normalizers[k][q - 1] * jn(k, spec.zeros[k][q - 1] * xi / spec.c);
    Ok(Complex64::from_polar(1.0, k as f64 * theta) * radial)
}

/// Inverse Fourier transform of `psi^{k,q}` at polar position `(r, phi)` in
/// pixels.
pub fn eval_psi_real(spec: &BasisSpec, k: usize, q: usize, r: f64, phi: f64) -> Result<Complex64> {
    spec.check_index(k, q)?;
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::Argument(format!("radius must be finite and >= 0, got {r}")));
    }
    let radial = psi_real_radial(spec.c, k, q, spec.zeros[k][q - 1], r);
    Ok(i_pow(k) * Complex64::from_polar(radial, k as f64 * phi))
}

/// `i^k`.
pub(crate) fn i_pow(k: usize) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Real radial factor of the inverse transform, without `i^k e^{ik phi}`:
/// `2 c sqrt(pi) (-1)^q R J_k(2 pi c r) / ((2 pi c r)^2 - R^2)`.
pub(crate) fn psi_real_radial(c: f64, k: usize, q: usize, zero: f64, r: f64) -> f64 {
    let x = 2.0 * PI * c * r;
    psi_real_radial_with(c, k, q, zero, x, || jn(k, x))
}

/// Same as [`psi_real_radial`] with `J_k(x)` supplied by the caller, which
/// lets image synthesis reuse one Bessel sweep per pixel.
pub(crate) fn psi_real_radial_with<F: FnOnce() -> f64>(
    c: f64,
    k: usize,
    q: usize,
    zero: f64,
    x: f64,
    jk: F,
) -> f64 {
    let sign = if q.is_multiple_of(2) { 1.0 } else { -1.0 };
    let pref = 2.0 * c * PI.sqrt() * sign;
    let denom = x * x - zero * zero;
    if denom.abs() < SINGULAR_GUARD * zero * zero {
        // J_k(R+t) = J' t - J' t^2/(2R) + J'(2+k^2-R^2) t^3/(6R^2) + ...
        // with J' = -J_{k+1}(R), divided by t (2R + t)
        let t = x - zero;
        let rr = zero;
        let dj = -jn_pair(k, rr).1;
        let kk = (k * k) as f64;
        let series = 1.0 - t / rr
            + (0.5 / (rr * rr) + (2.0 + kk - rr * rr) / (6.0 * rr * rr)) * t * t;
        return pref * 0.5 * dj * series;
    }
    pref * zero * jk() / denom
}

/// Sampled radial functions `N_{k,q} J_k(R_{k,q} xi_j / c)` at the
/// quadrature radii, together with the products `xi_j w_j`.
#[derive(Debug, Clone)]
pub struct RadialTable {
    n_xi: usize,
    /// `values[k]` is row-major `p_k x n_xi`.
    values: Vec<Vec<f64>>,
    xi_w: Vec<f64>,
}

impl RadialTable {
    pub fn new(spec: &BasisSpec, rule: &QuadratureRule) -> Result<Self> {
        let (a, b) = rule.interval;
        if a != 0.0 || (b - spec.c).abs() > 1e-15 * spec.c {
            return Err(Error::Config(format!(
                "radial rule on ({a}, {b}) does not match band limit {}",
                spec.c
            )));
        }
        let n_xi = rule.len();
        let values = (0..=spec.k_max())
            .map(|k| {
                let mut row = Vec::with_capacity(spec.p[k] * n_xi);
                for q in 0..spec.p[k] {
                    let (z, nq) = (spec.zeros[k][q], spec.normalizers[k][q]);
                    row.extend(rule.nodes.iter().map(|&xi| nq * jn(k, z * xi / spec.c)));
                }
                row
            })
            .collect();
        let xi_w = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| x * w).collect();
        Ok(RadialTable { n_xi, values, xi_w })
    }

    pub fn n_xi(&self) -> usize {
        self.n_xi
    }

    pub fn k_max(&self) -> usize {
        self.values.len() - 1
    }

    pub fn p_k(&self, k: usize) -> usize {
        self.values[k].len() / self.n_xi
    }

    /// Samples of radial function `q` (0-based) for angular frequency `k`.
    pub fn row(&self, k: usize, q: usize) -> &[f64] {
        &self.values[k][q * self.n_xi..(q + 1) * self.n_xi]
    }

    /// Row-major `p_k x n_xi` block for angular frequency `k`.
    pub fn block(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    /// `xi_j w_j` for each quadrature radius.
    pub fn xi_weights(&self) -> &[f64] {
        &self.xi_w
    }
}

/// `E(k, q1, q2; n_xi)`: the quadrature error for the unnormalized product
/// integral `int_0^c J_k(R_{k,q1} xi/c) J_k(R_{k,q2} xi/c) xi d xi`.
pub fn quadrature_error(spec: &BasisSpec, k: usize, q1: usize, q2: usize, n_xi: usize) -> Result<f64> {
    spec.check_index(k, q1)?;
    spec.check_index(k, q2)?;
    let rule = crate::specfun::gauss_legendre(n_xi, 0.0, spec.c)?;
    let (z1, z2) = (spec.zeros[k][q1 - 1], spec.zeros[k][q2 - 1]);
    let approx = rule.integrate(|xi| jn(k, z1 * xi / spec.c) * jn(k, z2 * xi / spec.c) * xi);
    let exact = if q1 == q2 {
        let j1 = jn_pair(k, z1).1;
        0.5 * spec.c * spec.c * j1 * j1
    } else {
        0.0
    };
    Ok((approx - exact).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::gauss_legendre;
    use proptest::prelude::*;

    #[test]
    fn census_at_half_band_limit() {
        let spec = build_basis(0.5, 30).unwrap();
        // J_0 zeros below 30 pi = 94.2478 are j_{0,1..30}; j_{0,30} = 93.46
        assert_eq!(spec.p_k(0), 29);
        let kmax = spec.k_max() as f64;
        assert!(kmax > 56.5 - 2.0 && kmax < 92.2 + 2.0, "k_max={kmax}");
        let pt = spec.p_total() as f64;
        let slack = 4.0 * kmax;
        assert!(pt >= 8.0 * 225.0 - slack && pt <= 4.0 * PI * 225.0 + slack, "p_total={pt}");
    }

    #[test]
    fn criterion_boundary() {
        let spec = build_basis(0.4, 17).unwrap();
        let limit = 2.0 * PI * 0.4 * 17.0;
        for k in 0..=spec.k_max() {
            let zs = spec.zeros(k);
            assert_eq!(zs.len(), spec.p_k(k) + 1);
            assert!(zs[spec.p_k(k)] <= limit);
            let next = crate::specfun::bessel_zero(k, spec.p_k(k) + 2).unwrap();
            assert!(next > limit);
            assert!(spec.p_k(k) >= 1);
        }
        assert!(spec.p.windows(2).all(|w| w[0] >= w[1]));
        let beyond = crate::specfun::bessel_zero(spec.k_max() + 1, 2).unwrap();
        assert!(beyond > limit);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(build_basis(0.3, 3), Err(Error::Config(_))));
        assert!(matches!(build_basis(0.6, 30), Err(Error::Config(_))));
        assert!(matches!(build_basis(0.5, 1), Err(Error::Config(_))));
        let spec = build_basis(0.5, 10).unwrap();
        assert!(matches!(
            eval_psi_fourier(&spec, 0, 0, 0.1, 0.0),
            Err(Error::Index { k: 0, q: 0 })
        ));
        let k = spec.k_max() + 1;
        assert!(matches!(eval_psi_real(&spec, k, 1, 1.0, 0.0), Err(Error::Index { .. })));
    }

    #[test]
    fn deterministic_and_json_round_trip() {
        let a = build_basis(0.5, 12).unwrap();
        let b = build_basis(0.5, 12).unwrap();
        assert_eq!(a, b);
        let back = BasisSpec::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn fourier_side_values() {
        let spec = build_basis(0.5, 8).unwrap();
        assert_eq!(eval_psi_fourier(&spec, 2, 1, 0.51, 0.3).unwrap(), Complex64::new(0.0, 0.0));
        for k in 0..=spec.k_max() {
            for q in 1..=spec.p_k(k) {
                assert_eq!(eval_psi_fourier(&spec, k, q, 0.2, 0.0).unwrap().im, 0.0);
            }
        }
    }

    #[test]
    fn disk_orthonormality_by_quadrature() {
        let spec = build_basis(0.5, 6).unwrap();
        let nr = 64;
        let nt = 64;
        let rule = gauss_legendre(nr, 0.0, spec.c()).unwrap();
        let idx: Vec<(usize, usize)> = (0..=spec.k_max())
            .flat_map(|k| (1..=spec.p_k(k)).map(move |q| (k, q)))
            .collect();
        for &(k1, q1) in &idx {
            for &(k2, q2) in &idx {
                let mut s = Complex64::new(0.0, 0.0);
                for (&xi, &w) in rule.nodes.iter().zip(&rule.weights) {
                    for l in 0..nt {
                        let th = 2.0 * PI * l as f64 / nt as f64;
                        let a = eval_psi_fourier(&spec, k1, q1, xi, th).unwrap();
                        let b = eval_psi_fourier(&spec, k2, q2, xi, th).unwrap();
                        s += a * b.conj() * xi * w * (2.0 * PI / nt as f64);
                    }
                }
                let want = if (k1, q1) == (k2, q2) { 1.0 } else { 0.0 };
                assert!((s - want).norm() < 1e-10, "({k1},{q1}) ({k2},{q2}) {s}");
            }
        }
    }

    #[test]
    fn radial_table_orthonormality() {
        for &(c, r) in &[(0.5, 15u32), (0.3, 40), (0.5, 30)] {
            let spec = build_basis(c, r).unwrap();
            // a few nodes beyond the default grid size; at the default size
            // small cR leaves ~1e-9 residue (see quadrature_error tests)
            let n_xi = (4.0 * c * r as f64).ceil() as usize + 12;
            let rule = gauss_legendre(n_xi, 0.0, c).unwrap();
            let table = RadialTable::new(&spec, &rule).unwrap();
            let xw = table.xi_weights();
            for k in (0..=spec.k_max()).step_by(3) {
                let pk = table.p_k(k);
                for q1 in 0..pk {
                    for q2 in 0..pk {
                        let s: f64 = (0..n_xi)
                            .map(|j| table.row(k, q1)[j] * table.row(k, q2)[j] * xw[j])
                            .sum();
                        let want = if q1 == q2 { 0.5 / PI } else { 0.0 };
                        assert!((s - want).abs() < 1e-10, "c={c} R={r} k={k} {q1} {q2} {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn quadrature_error_decay() {
        // reference magnitudes at n = ceil(4cR) from an independent
        // Gauss-Legendre/Bessel implementation: 9.04e-9, 7.29e-12, 1.0e-17
        let reference = [(15u32, 9.040416e-9), (30, 7.293462e-12), (60, 1e-16)];
        for (r, e_ref) in reference {
            let spec = build_basis(0.5, r).unwrap();
            let p0 = spec.p_k(0);
            let n = (4.0 * 0.5 * r as f64).ceil() as usize;
            let e = quadrature_error(&spec, 0, p0, p0, n).unwrap();
            if e_ref > 1e-15 {
                assert!((e - e_ref).abs() < 1e-3 * e_ref, "R={r} E={e:e}");
            } else {
                assert!(e < 1e-13, "R={r} E={e:e}");
            }
            let finer = quadrature_error(&spec, 0, p0, p0, n + 10).unwrap();
            assert!(finer < 1e-13, "R={r} E(n+10)={finer:e}");
            let coarse = quadrature_error(&spec, 0, p0, p0, n / 4).unwrap();
            assert!(coarse > 1e-6);
        }
    }

    #[test]
    fn real_space_vanishes_on_other_zero_circles() {
        let spec = build_basis(0.5, 12).unwrap();
        for &(k, q) in &[(0usize, 3usize), (1, 5), (4, 2)] {
            for q2 in 1..=spec.p_k(k) + 1 {
                if q2 == q {
                    continue;
                }
                let r = spec.zeros(k)[q2 - 1] / (2.0 * PI * 0.5);
                let v = eval_psi_real(&spec, k, q, r, 0.7).unwrap();
                assert!(v.norm() < 1e-12, "k={k} q={q} q2={q2} {v}");
            }
        }
    }

    #[test]
    fn removable_singularity_is_continuous() {
        let spec = build_basis(0.5, 12).unwrap();
        for &(k, q) in &[(0usize, 1usize), (1, 5), (7, 2), (12, 3)] {
            let r0 = spec.zeros(k)[q - 1] / (2.0 * PI * 0.5);
            let exact = eval_psi_real(&spec, k, q, r0, 0.3).unwrap();
            let j1 = jn_pair(k, spec.zeros(k)[q - 1]).1;
            let sign = if q % 2 == 0 { -1.0 } else { 1.0 };
            let limit = i_pow(k) * Complex64::from_polar(0.5 * PI.sqrt() * sign * j1, k as f64 * 0.3);
            assert!((exact - limit).norm() < 1e-14, "k={k} q={q}");
            for &d in &[1e-12, 1e-9, 1e-8, 3e-7, 1e-5] {
                let near = eval_psi_real(&spec, k, q, r0 * (1.0 + d), 0.3).unwrap();
                assert!(near.re.is_finite() && near.im.is_finite());
                assert!((near - exact).norm() < 10.0 * d * r0 + 1e-12, "k={k} q={q} d={d}");
            }
        }
    }

    /// Direct quadrature of the inverse polar Fourier integral: radial
    /// Gauss-Legendre on [0, c] (the integrand is smooth there) and a uniform
    /// angular rule, which is exact for the angular Fourier series.
    fn inverse_ft_oracle(spec: &BasisSpec, k: usize, q: usize, r: f64, phi: f64) -> Complex64 {
        let rule = gauss_legendre(200, 0.0, spec.c()).unwrap();
        let nt = 256;
        let mut s = Complex64::new(0.0, 0.0);
        for (&xi, &w) in rule.nodes.iter().zip(&rule.weights) {
            for l in 0..nt {
                let th = 2.0 * PI * l as f64 / nt as f64;
                let psi = eval_psi_fourier(spec, k, q, xi, th).unwrap();
                let phase = Complex64::from_polar(1.0, 2.0 * PI * r * xi * (th - phi).cos());
                s += psi * phase * xi * w * (2.0 * PI / nt as f64);
            }
        }
        s
    }

    #[test]
    fn closed_form_matches_numerical_inverse_transform() {
        let spec = build_basis(0.5, 10).unwrap();
        for &(k, q) in &[(0usize, 1usize), (1, 5), (2, 3), (3, 4), (7, 1)] {
            for &(r, phi) in &[(0.0, 0.0), (1.3, 0.4), (4.7, 2.9), (9.2, -1.1), (14.0, 5.0)] {
                let got = eval_psi_real(&spec, k, q, r, phi).unwrap();
                let want = inverse_ft_oracle(&spec, k, q, r, phi);
                assert!((got - want).norm() < 1e-6, "k={k} q={q} r={r} got={got} want={want}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn census_invariants(c in 0.1f64..0.5, r in 4u32..48) {
            prop_assume!(c * r as f64 >= 3.0);
            let spec = build_basis(c, r).unwrap();
            let limit = 2.0 * PI * c * r as f64;
            prop_assert!(spec.p.windows(2).all(|w| w[0] >= w[1]));
            for k in 0..=spec.k_max() {
                prop_assert!(spec.zeros(k)[spec.p_k(k)] <= limit);
            }
            let cr = c * r as f64;
            let kmax = spec.k_max() as f64;
            let pt = spec.p_total() as f64;
            prop_assert!(pt >= 8.0 * cr * cr - 4.0 * kmax);
            prop_assert!(pt <= 4.0 * PI * cr * cr + 4.0 * kmax);
        }
    }
}
