//! Known-kernel recovery: annihilating filter on the moments, root
//! extraction, and a measurement-domain amplitude fit.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::forward_model::{spike_spectrum, KernelTrace, MeasurementTrace, Spike, SpikeTrain};
use crate::signal_core::{dft_real, idft, Grid, Polynomial};
use crate::strang_fix::{exp_repro_coeffs, fourier_series_coeffs, moments};
use crate::{Error, Result, C64};

/// Unit-norm filter `h[0..=K]` with `Σ_l h[l]·y[m−l] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnihilatingFilter {
    h: Vec<C64>,
}

impl AnnihilatingFilter {
    pub fn new(h: Vec<C64>) -> Result<Self> {
        let n = crate::signal_core::norm(&h);
        if h.len() < 2 || n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidArgument(
                "annihilating filter needs at least two finite taps, not all zero".into(),
            ));
        }
        Ok(Self {
            h: h.into_iter().map(|v| v / n).collect(),
        })
    }

    pub fn taps(&self) -> &[C64] {
        &self.h
    }

    pub fn order(&self) -> usize {
        self.h.len() - 1
    }

    /// `H(z) = Σ h[l] z^{-l}` rewritten as a polynomial in `z` whose roots
    /// are the `u_k`.
    pub fn polynomial(&self) -> Polynomial {
        Polynomial::new(self.h.iter().rev().copied().collect())
    }
}

/// Convolution matrix of `y`: row `r` is `[y[r+K], y[r+K−1], …, y[r]]`,
/// padded with zero rows up to `K+1` rows.
fn toeplitz(y: &[C64], k: usize) -> DMatrix<C64> {
    let rows = y.len().saturating_sub(k);
    DMatrix::from_fn(rows.max(k + 1), k + 1, |r, l| {
        if r < rows {
            y[r + k - l]
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Singular values of the (zero-padded) convolution matrix, ascending.
pub fn toeplitz_singular_values(y: &[C64], k: usize) -> Vec<f64> {
    let mut s: Vec<f64> = toeplitz(y, k).singular_values().iter().copied().collect();
    s.sort_by(f64::total_cmp);
    s
}

pub fn annihilating_filter(y: &[C64], k: usize) -> Result<AnnihilatingFilter> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if y.len() < 2 * k {
        return Err(Error::InsufficientMoments {
            have: y.len(),
            need: 2 * k,
        });
    }
    if y.iter().all(|v| v.norm() == 0.0) {
        return Err(Error::ZeroMoments);
    }
    let svd = SVD::new(toeplitz(y, k), false, true);
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one singular value");
    AnnihilatingFilter::new(vt.row(imin).iter().map(|v| v.conj()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayEstimate {
    /// Delays in `[0, window)`, ascending.
    pub taus: Vec<f64>,
    /// Roots in the same order as `taus`, before projection.
    pub roots: Vec<C64>,
    /// Set when two roots coincide to within round-off of a double root.
    pub degenerate_roots: bool,
}

/// Delay encoded by a root `u = e^{-j2πτ/window}` after projection onto the
/// unit circle.
pub fn delay_from_root(u: C64, window: f64) -> f64 {
    let t = (-window / (2.0 * PI) * u.arg()).rem_euclid(window);
    if t >= window {
        0.0
    } else {
        t
    }
}

/// Keeps the `k` roots closest to the unit circle, discarding roots at the
/// origin or at infinity.
pub(crate) fn usable_roots(mut roots: Vec<C64>, k: usize) -> Result<Vec<C64>> {
    roots.retain(|z| z.re.is_finite() && z.im.is_finite() && z.norm() > 1e-12);
    if roots.len() < k {
        return Err(Error::TooFewRoots(k));
    }
    roots.sort_by(|a, b| (a.norm().ln().abs()).total_cmp(&b.norm().ln().abs()));
    roots.truncate(k);
    Ok(roots)
}

/// A computed double root splits by about `√ε` relative to its magnitude,
/// so repeated roots are recognized at that scale rather than at `1e-10`.
const REPEATED_ROOT_TOL: f64 = 1e-7;

pub(crate) fn has_degenerate_pair(roots: &[C64]) -> bool {
    roots.iter().enumerate().any(|(i, a)| {
        roots[i + 1..]
            .iter()
            .any(|b| (a - b).norm() < REPEATED_ROOT_TOL * a.norm().max(1.0))
    })
}

pub fn delays_from_filter(h: &AnnihilatingFilter, window: f64) -> Result<DelayEstimate> {
    if !(window.is_finite() && window > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "window must be positive, got {window}"
        )));
    }
    let k = h.order();
    let roots = usable_roots(h.polynomial().roots()?, k)?;
    let degenerate_roots = has_degenerate_pair(&roots);
    let mut pairs: Vec<(f64, C64)> = roots
        .into_iter()
        .map(|u| (delay_from_root(u, window), u))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(DelayEstimate {
        taus: pairs.iter().map(|p| p.0).collect(),
        roots: pairs.iter().map(|p| p.1).collect(),
        degenerate_roots,
    })
}

/// Columns `Re(φ ⊛ d(τ_k))` of the measurement-domain design matrix.
pub(crate) fn spike_columns(
    kernel_spec: &[C64],
    taus: &[f64],
    grid: &Grid,
) -> Result<Vec<Vec<f64>>> {
    taus.iter()
        .map(|&tau| {
            let mut s = spike_spectrum(&[Spike { gamma: 1.0, tau }], grid);
            s.iter_mut().zip(kernel_spec).for_each(|(a, b)| *a *= b);
            Ok(idft(&s)?.into_iter().map(|v| v.re).collect())
        })
        .collect()
}

/// Real least squares over a handful of columns, rejecting rank-deficient
/// designs.
pub(crate) fn column_lsq(cols: &[Vec<f64>], g: &[f64]) -> Result<Vec<f64>> {
    let k = cols.len();
    let gram = DMatrix::from_fn(k, k, |i, j| {
        cols[i]
            .iter()
            .zip(&cols[j])
            .map(|(a, b)| a * b)
            .sum::<f64>()
    });
    let rhs = DVector::from_iterator(
        k,
        cols.iter()
            .map(|c| c.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()),
    );
    let eig = SymmetricEigen::new(gram.clone());
    let hi = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let lo = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if hi.is_nan() || hi <= 0.0 || lo <= 1e-13 * hi {
        return Err(Error::IndistinguishableSpikes);
    }
    let sol = gram
        .cholesky()
        .ok_or(Error::IndistinguishableSpikes)?
        .solve(&rhs);
    Ok(sol.iter().copied().collect())
}

pub fn amplitudes_ls(g: &MeasurementTrace, taus: &[f64], kernel: &KernelTrace) -> Result<Vec<f64>> {
    if g.samples().len() != kernel.samples().len() {
        return Err(Error::LengthMismatch(
            g.samples().len(),
            kernel.samples().len(),
        ));
    }
    if 2 * taus.len() > g.samples().len() {
        return Err(Error::ModelOrder {
            k: taus.len(),
            n: g.samples().len(),
        });
    }
    let spec = dft_real(kernel.samples())?;
    let cols = spike_columns(&spec, taus, g.grid())?;
    column_lsq(&cols, g.samples())
}

/// Coefficients → moments → annihilating filter → roots → amplitudes.
pub fn prony_solve(
    g: &MeasurementTrace,
    kernel: &KernelTrace,
    k: usize,
    band_threshold: f64,
) -> Result<SpikeTrain> {
    let n = g.samples().len();
    if k == 0 || 2 * k > n {
        return Err(Error::ModelOrder { k, n });
    }
    let sk = fourier_series_coeffs(kernel, band_threshold)?;
    if sk.band() < 2 * k {
        return Err(Error::InsufficientMoments {
            have: sk.band(),
            need: 2 * k,
        });
    }
    let u = exp_repro_coeffs(&sk)?;
    let y = moments(g, &u)?;
    let h = annihilating_filter(&y, k)?;
    let est = delays_from_filter(&h, g.grid().window())?;
    let gammas = amplitudes_ls(g, &est.taus, kernel)?;
    let spikes = est
        .taus
        .iter()
        .zip(&gammas)
        .map(|(&tau, &gamma)| Spike { gamma, tau })
        .collect();
    SpikeTrain::new(spikes, g.grid())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expo(amps: &[f64], us: &[C64], m: usize) -> Vec<C64> {
        (0..m)
            .map(|i| {
                amps.iter()
                    .zip(us)
                    .map(|(a, u)| *a * u.powu(i as u32))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn single_exponential_filter() {
        let u = C64::from_polar(1.0, -PI / 5.0);
        let y = expo(&[1.0], &[u], 6);
        let h = annihilating_filter(&y, 1).unwrap();
        let ratio = h.taps()[1] / h.taps()[0];
        assert!((ratio + u).norm() < 1e-12);
    }

    #[test]
    fn two_exponentials_rerooted() {
        let us = [C64::from_polar(1.0, -0.7), C64::from_polar(1.0, 2.1)];
        let y = expo(&[2.0, 0.5], &us, 8);
        let h = annihilating_filter(&y, 2).unwrap();
        let r = h.polynomial().roots().unwrap();
        for u in us {
            assert!(r.iter().any(|z| (z - u).norm() < 1e-9));
        }
    }

    #[test]
    fn insufficient_and_zero_moments() {
        let y = vec![C64::new(1.0, 0.0); 3];
        assert!(matches!(
            annihilating_filter(&y, 2),
            Err(Error::InsufficientMoments { have: 3, need: 4 })
        ));
        assert!(matches!(
            annihilating_filter(&[C64::new(0.0, 0.0); 6], 2),
            Err(Error::ZeroMoments)
        ));
    }

    #[test]
    fn trivial_delays() {
        let h = AnnihilatingFilter::new(vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]).unwrap();
        let d = delays_from_filter(&h, 5.0).unwrap();
        assert!(d.taus[0].abs() < 1e-15);
        let u = C64::from_polar(1.0, -2.0 * PI * 0.25);
        let h = AnnihilatingFilter::new(vec![C64::new(1.0, 0.0), -u]).unwrap();
        let d = delays_from_filter(&h, 8.0).unwrap();
        assert!((d.taus[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exp_one_delays_round_trip() {
        let window = 2976.0 * 70e-12;
        let taus = [8.45e-8, 9.44e-8];
        // taps of Π(1 − u_k·z⁻¹) are the coefficients of the polynomial with roots 1/u_k
        let inv: Vec<C64> = taus
            .iter()
            .map(|t| C64::from_polar(1.0, 2.0 * PI * t / window))
            .collect();
        let h = AnnihilatingFilter::new(crate::signal_core::poly_from_roots(&inv).into_coeffs())
            .unwrap();
        let d = delays_from_filter(&h, window).unwrap();
        for (a, b) in d.taus.iter().zip(taus) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn degenerate_roots_flagged() {
        let u = C64::from_polar(1.0, 0.3);
        let h = AnnihilatingFilter::new(crate::signal_core::poly_from_roots(&[u, u]).into_coeffs())
            .unwrap();
        // poly_from_roots builds Π(1 − z/u); reversed taps give roots 1/u twice
        assert!(delays_from_filter(&h, 1.0).unwrap().degenerate_roots);
    }

    #[test]
    fn amplitudes_zero_and_duplicate() {
        let g = Grid::new(32, 1.0).unwrap();
        let mut s = vec![0.0; 32];
        s[0] = 1.0;
        s[1] = 0.5;
        let k = KernelTrace::new(s, g).unwrap();
        let zero = MeasurementTrace::new(vec![0.0; 32], g).unwrap();
        assert_eq!(
            amplitudes_ls(&zero, &[3.0, 9.5], &k).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(matches!(
            amplitudes_ls(&zero, &[3.0, 3.0], &k),
            Err(Error::IndistinguishableSpikes)
        ));
    }
}
