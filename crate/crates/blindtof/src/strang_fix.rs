//! Exponential reproduction from a known kernel: Fourier-series
//! coefficients, reproduction weights and moments.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::forward_model::{KernelTrace, MeasurementTrace};
use crate::signal_core::{dft_real, root_of_unity, Grid};
use crate::{Error, Result, C64};

pub const DEFAULT_BAND_THRESHOLD: f64 = 1e-4;

/// Fourier-series coefficients `dft(φ)/N` together with the usable band.
#[derive(Debug, Clone)]
pub struct SpectralKernel {
    coeffs: Vec<C64>,
    band: usize,
    grid: Grid,
}

impl SpectralKernel {
    /// All `N` coefficients, not only the retained band.
    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn band(&self) -> usize {
        self.band
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

pub fn fourier_series_coeffs(kernel: &KernelTrace, band_threshold: f64) -> Result<SpectralKernel> {
    if !(band_threshold > 0.0 && band_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "band_threshold must lie in (0,1), got {band_threshold}"
        )));
    }
    let n = kernel.samples().len() as f64;
    let coeffs: Vec<C64> = dft_real(kernel.samples())?
        .into_iter()
        .map(|v| v / n)
        .collect();
    let peak = coeffs.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::DegenerateKernel);
    }
    let cut = band_threshold * peak;
    let band = coeffs.iter().take_while(|v| v.norm() >= cut).count().max(1);
    Ok(SpectralKernel {
        coeffs,
        band,
        grid: *kernel.grid(),
    })
}

/// Reproduction weights `U[m,n] = e^{-j2πnm/N} / (N·φ̆[m])`, one row per
/// frequency in [`MomentMatrix::frequencies`].
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    u: DMatrix<C64>,
    freqs: Vec<i64>,
}

impl MomentMatrix {
    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.u
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn frequencies(&self) -> &[i64] {
        &self.freqs
    }
}

fn build_moment_matrix(sk: &SpectralKernel, freqs: Vec<i64>) -> Result<MomentMatrix> {
    let n = sk.coeffs.len();
    let bin = |m: i64| m.rem_euclid(n as i64) as usize;
    let peak = sk.coeffs.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if let Some(&m) = freqs
        .iter()
        .find(|&&m| sk.coeffs[bin(m)].norm() <= 1e-14 * peak)
    {
        return Err(Error::StrangFixViolated(bin(m)));
    }
    let u = DMatrix::from_fn(freqs.len(), n, |r, i| {
        let m = freqs[r];
        root_of_unity(n, -(m * i as i64)) / (n as f64 * sk.coeffs[bin(m)])
    });
    Ok(MomentMatrix { u, freqs })
}

/// Rows for `m = 0, …, M−1`.
pub fn exp_repro_coeffs(sk: &SpectralKernel) -> Result<MomentMatrix> {
    build_moment_matrix(sk, (0..sk.band as i64).collect())
}

/// Rows for `m = −(M−1), …, M−1`: the retained band together with its
/// mirror, `2M−1` rows in all. For real kernels the negative rows are the
/// conjugates of the positive ones.
pub fn exp_repro_coeffs_two_sided(sk: &SpectralKernel) -> Result<MomentMatrix> {
    let m = sk.band as i64;
    if 2 * m - 1 > sk.coeffs.len() as i64 {
        return Err(Error::InvalidArgument(format!(
            "two-sided band of {} bins exceeds {}",
            2 * m - 1,
            sk.coeffs.len()
        )));
    }
    build_moment_matrix(sk, (1 - m..m).collect())
}

/// `y = U·g`.
pub fn moments(g: &MeasurementTrace, u: &MomentMatrix) -> Result<Vec<C64>> {
    let n = g.samples().len();
    if u.u.ncols() != n {
        return Err(Error::LengthMismatch(u.u.ncols(), n));
    }
    let gv = DVector::from_iterator(n, g.samples().iter().map(|&v| C64::new(v, 0.0)));
    Ok((&u.u * gv).iter().copied().collect())
}

/// Worst deviation of `Σ_n U[m,n]·φ̄(t − nT)` from `e^{-j2πft/(NT)}`, with
/// `f` the frequency of row `m`, over a grid `oversample` times finer than
/// the samples. `φ̄(t) = φ(−t)` is the time-reversed, periodized kernel.
pub fn reproduction_residual(
    u: &MomentMatrix,
    kernel: &KernelTrace,
    m: usize,
    oversample: usize,
) -> Result<f64> {
    kernel.family().ok_or(Error::MissingDescriptor)?;
    if m >= u.rows() {
        return Err(Error::InvalidArgument(format!(
            "bin {m} outside band of {}",
            u.rows()
        )));
    }
    if oversample < 2 {
        return Err(Error::InvalidArgument(
            "oversample must be at least 2".into(),
        ));
    }
    let grid = kernel.grid();
    let n = grid.n_samples();
    let tp = grid.sample_period();
    let w = grid.window();
    let freq = u.freqs[m] as f64;
    let mut worst = 0.0_f64;
    for i in 0..n * oversample {
        let t = i as f64 * tp / oversample as f64;
        let mut acc = C64::new(0.0, 0.0);
        for k in 0..n {
            acc += u.u[(m, k)] * kernel.eval(k as f64 * tp - t)?;
        }
        let target = C64::from_polar(1.0, -2.0 * PI * freq * t / w);
        worst = worst.max((acc - target).norm());
    }
    Ok(worst)
}
