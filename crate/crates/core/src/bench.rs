//! Wall-clock benchmark of the expansion and steerable PCA stages.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, RadialTable};
use crate::error::{Error, Result};
use crate::fbcoeff::{angular_transform, radial_quadrature};
use crate::polarft::{make_polar_grid, NufftPlan, DEFAULT_EPS};
use crate::simulate::gen_noise_stack;
use crate::spca::{block_covariance, block_eig};

/// Images per batch; keeps the polar samples of large images in memory.
const BATCH: usize = 64;

/// Seconds per stage, the minimum over repetitions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub polar_ft: f64,
    pub angular_fft: f64,
    pub radial_quadrature: f64,
    pub covariance: f64,
    pub eig: f64,
}

impl StageTimes {
    /// Polar FT, angular FFT and radial quadrature together.
    pub fn expansion(&self) -> f64 {
        self.polar_ft + self.angular_fft + self.radial_quadrature
    }

    fn min(self, o: StageTimes) -> StageTimes {
        StageTimes {
            polar_ft: self.polar_ft.min(o.polar_ft),
            angular_fft: self.angular_fft.min(o.angular_fft),
            radial_quadrature: self.radial_quadrature.min(o.radial_quadrature),
            covariance: self.covariance.min(o.covariance),
            eig: self.eig.min(o.eig),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub side: usize,
    pub n: usize,
    #[serde(rename = "R")]
    pub radius: u32,
    pub c: f64,
    pub p_total: usize,
    pub stages: StageTimes,
    pub expansion: f64,
    /// Share of the expansion spent on the polar Fourier transform.
    pub polar_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of expansion time against `L` at the first `n`.
    pub slope_vs_side: Option<f64>,
    /// Log-log slope of expansion time against `n` at the first `L`.
    pub slope_vs_n: Option<f64>,
}

/// Times every stage on `n` white-noise images of side `L`, with
/// `R = floor(L/2)`. Precomputation (basis, grid, plan) is not timed.
pub fn bench_one(side: usize, n: usize, c: f64, reps: usize, seed: u64) -> Result<BenchRow> {
    if side < 4 || n == 0 || reps == 0 {
        return Err(Error::Config(format!("bench needs L >= 4, n >= 1, reps >= 1 (got {side}, {n}, {reps})")));
    }
    let radius = (side / 2) as u32;
    let spec = build_basis(c, radius)?;
    let grid = make_polar_grid(c, radius)?;
    let table = RadialTable::new(&spec, grid.rule())?;
    let plan = NufftPlan::new(side, &grid, DEFAULT_EPS)?;
    let mut best: Option<StageTimes> = None;
    for _ in 0..reps {
        let mut t = StageTimes::default();
        let mut last_cov = None;
        let mut start = 0;
        while start < n {
            let m = BATCH.min(n - start);
            let stack = gen_noise_stack(m, side, 1.0, seed ^ start as u64)?;
            let t0 = Instant::now();
            let samples = plan.execute(&stack)?;
            let t1 = Instant::now();
            let g = angular_transform(&samples, spec.k_max())?;
            let t2 = Instant::now();
            let coeffs = radial_quadrature(&g, m, side, &spec, &table)?;
            let t3 = Instant::now();
            let cov = block_covariance(&coeffs)?;
            let t4 = Instant::now();
            t.polar_ft += (t1 - t0).as_secs_f64();
            t.angular_fft += (t2 - t1).as_secs_f64();
            t.radial_quadrature += (t3 - t2).as_secs_f64();
            t.covariance += (t4 - t3).as_secs_f64();
            last_cov = Some(cov);
            start += m;
        }
        let cov = last_cov.ok_or_else(|| Error::Internal("no batches ran".into()))?;
        let t0 = Instant::now();
        block_eig(&cov)?;
        t.eig = t0.elapsed().as_secs_f64();
        best = Some(best.map_or(t, |b| b.min(t)));
    }
    let stages = best.ok_or_else(|| Error::Internal("no repetitions ran".into()))?;
    let expansion = stages.expansion();
    Ok(BenchRow {
        side,
        n,
        radius,
        c,
        p_total: spec.p_total(),
        stages,
        expansion,
        polar_fraction: if expansion > 0.0 { stages.polar_ft / expansion } else { 0.0 },
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Argument("slope needs at least two positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Argument("slope needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Runs every side at `ns[0]` and every `n` at `sides[0]`.
pub fn run_bench(sides: &[usize], ns: &[usize], c: f64, reps: usize, seed: u64) -> Result<BenchReport> {
    if sides.is_empty() || ns.is_empty() {
        return Err(Error::Config("bench needs at least one size and one n".into()));
    }
    let mut rows = Vec::new();
    for &l in sides {
        rows.push(bench_one(l, ns[0], c, reps, seed)?);
    }
    for &n in &ns[1..] {
        rows.push(bench_one(sides[0], n, c, reps, seed)?);
    }
    let by_side = &rows[..sides.len()];
    let slope_vs_side = (sides.len() >= 2)
        .then(|| {
            let xs: Vec<f64> = by_side.iter().map(|r| r.side as f64).collect();
            let ys: Vec<f64> = by_side.iter().map(|r| r.expansion).collect();
            loglog_slope(&xs, &ys)
        })
        .transpose()?;
    let slope_vs_n = (ns.len() >= 2)
        .then(|| {
            let sel: Vec<&BenchRow> = std::iter::once(&rows[0]).chain(&rows[sides.len()..]).collect();
            let xs: Vec<f64> = sel.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = sel.iter().map(|r| r.expansion).collect();
            loglog_slope(&xs, &ys)
        })
        .transpose()?;
    Ok(BenchReport {
        rows,
        slope_vs_side,
        slope_vs_n,
    })
}

pub fn write_bench_csv<W: Write>(report: &BenchReport, mut w: W) -> Result<()> {
    writeln!(w, "L,n,R,c,p_total,polar_ft,angular_fft,radial_quadrature,covariance,eig,expansion,polar_fraction")?;
    for r in &report.rows {
        let s = &r.stages;
        writeln!(
            w,
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:.4}",
            r.side, r.n, r.radius, r.c, r.p_total, s.polar_ft, s.angular_fft, s.radial_quadrature, s.covariance, s.eig, r.expansion, r.polar_fraction
        )?;
    }
    Ok(())
}
