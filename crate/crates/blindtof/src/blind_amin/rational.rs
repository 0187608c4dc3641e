//! Rational spike model `d = P(ξ)/Q(ξ)` and its linearized fit against a
//! fixed kernel.

use nalgebra::{DMatrix, DVector};

use crate::forward_model::{dirichlet_spikes, Spike, SpikeTrain};
use crate::prony::{delay_from_root, has_degenerate_pair, usable_roots};
use crate::signal_core::{
    circ_lsq_spectral, dft, idft, modulate, norm, root_of_unity, to_complex, Grid, Polynomial,
};
use crate::{Error, Result, C64};

use super::SolverConfig;

/// Coefficients of `P` (degree `K−1`) and `Q` (degree `K`), constant
/// term first.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalSpikeModel {
    pub p: Vec<C64>,
    pub q: Vec<C64>,
}

impl RationalSpikeModel {
    pub fn order(&self) -> usize {
        self.q.len().saturating_sub(1)
    }

    /// `d[n] = P(ξ_N^n)/Q(ξ_N^n)` with the denominator clamped.
    pub fn eval(&self, n: usize, q_clamp: f64) -> Vec<C64> {
        let pv = on_grid(&self.p, n);
        let qv = clamp_denominator(on_grid(&self.q, n), q_clamp);
        pv.iter().zip(&qv).map(|(a, b)| a / b).collect()
    }
}

/// `V_N^{len}·c`: polynomial values at the N-th roots of unity, scaled by 1/N.
pub fn on_grid(c: &[C64], n: usize) -> Vec<C64> {
    let s = 1.0 / n as f64;
    (0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| v * root_of_unity(n, (i * k) as i64))
                .sum::<C64>()
                * s
        })
        .collect()
}

/// Floors magnitudes at `q_clamp·max` while keeping phases.
pub fn clamp_denominator(mut v: Vec<C64>, q_clamp: f64) -> Vec<C64> {
    let peak = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let floor = q_clamp * peak;
    for z in v.iter_mut() {
        let m = z.norm();
        if m < floor {
            *z = if m == 0.0 {
                C64::new(floor, 0.0)
            } else {
                *z * (floor / m)
            };
        }
    }
    v
}

/// Matrices of one linearized fit: minimize `‖u + A·q − B·p‖₂`.
#[derive(Debug, Clone)]
pub struct P1System {
    pub a: DMatrix<C64>,
    pub b: DMatrix<C64>,
    pub u: Vec<C64>,
}

/// Kernel spectrum, `d⁰` and `u` for one kernel; shared by every inner
/// iteration of a fit.
pub(crate) struct P1Context {
    phi_hat: Vec<C64>,
    d0: Vec<C64>,
    u: Vec<C64>,
    g: Vec<C64>,
    k: usize,
    q_clamp: f64,
}

fn conv_spectral(phi_hat: &[C64], x: &[C64]) -> Result<Vec<C64>> {
    let mut fx = dft(x)?;
    fx.iter_mut().zip(phi_hat).for_each(|(a, b)| *a *= b);
    idft(&fx)
}

impl P1Context {
    pub(crate) fn new(phi: &[C64], g: &[C64], k: usize, cfg: &SolverConfig) -> Result<Self> {
        if phi.len() != g.len() {
            return Err(Error::LengthMismatch(phi.len(), g.len()));
        }
        let phi_hat = dft(phi)?;
        let d0 = circ_lsq_spectral(&phi_hat, g, cfg.pinv_rel_threshold)?;
        Self::with_d0(phi_hat, d0, g, k, cfg.q_clamp)
    }

    fn with_d0(phi_hat: Vec<C64>, d0: Vec<C64>, g: &[C64], k: usize, q_clamp: f64) -> Result<Self> {
        let fit = conv_spectral(&phi_hat, &d0)?;
        let u = g.iter().zip(&fit).map(|(a, b)| a - b).collect();
        Ok(Self {
            phi_hat,
            d0,
            u,
            g: g.to_vec(),
            k,
            q_clamp,
        })
    }

    pub(crate) fn build(&self, q_j: &[C64]) -> Result<P1System> {
        let n = self.g.len();
        let k = self.k;
        if q_j.len() != k + 1 {
            return Err(Error::LengthMismatch(q_j.len(), k + 1));
        }
        if q_j.iter().all(|v| v.norm() == 0.0) {
            return Err(Error::ZeroPolynomial);
        }
        let r: Vec<C64> = clamp_denominator(on_grid(q_j, n), self.q_clamp)
            .into_iter()
            .map(|v| v.inv())
            .collect();
        let s = 1.0 / n as f64;
        let mut a = DMatrix::zeros(n, k + 1);
        let mut b = DMatrix::zeros(n, k);
        for col in 0..=k {
            let x: Vec<C64> = (0..n)
                .map(|i| r[i] * root_of_unity(n, (i * col) as i64) * s)
                .collect();
            let with_d0: Vec<C64> = x.iter().zip(&self.d0).map(|(a, d)| a * d).collect();
            a.set_column(
                col,
                &DVector::from_vec(conv_spectral(&self.phi_hat, &with_d0)?),
            );
            if col < k {
                b.set_column(col, &DVector::from_vec(conv_spectral(&self.phi_hat, &x)?));
            }
        }
        Ok(P1System {
            a,
            b,
            u: self.u.clone(),
        })
    }

    /// `‖g − φ ⊛ d(p,q)‖₂`.
    pub(crate) fn residual(&self, model: &RationalSpikeModel) -> Result<f64> {
        let d = model.eval(self.g.len(), self.q_clamp);
        let fit = conv_spectral(&self.phi_hat, &d)?;
        Ok(self
            .g
            .iter()
            .zip(&fit)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt())
    }
}

/// Assembles `A = T_φ·R·diag(d⁰)·V^{K+1}`, `B = T_φ·R·V^K` and
/// `u = g − φ⊛d⁰`, with `R = diag(V^{K+1}q_j)^{-1}` after clamping.
pub fn p1_build(
    phi: &[C64],
    g: &[C64],
    q_j: &[C64],
    d0: &[C64],
    k: usize,
    q_clamp: f64,
) -> Result<P1System> {
    if phi.len() != g.len() || d0.len() != g.len() {
        return Err(Error::LengthMismatch(phi.len(), g.len()));
    }
    P1Context::with_d0(dft(phi)?, d0.to_vec(), g, k, q_clamp)?.build(q_j)
}

/// Result of one constrained least-squares solve.
#[derive(Debug, Clone)]
pub struct P1Step {
    pub p: Vec<C64>,
    pub q: Vec<C64>,
    pub lambda: C64,
}

/// Solves `min ‖u + A·q − B·p‖₂` subject to `⟨q0, q⟩ = 1` through its KKT
/// system.
pub fn p1_step(sys: &P1System, q0: &[C64]) -> Result<P1Step> {
    let k1 = sys.a.ncols();
    let k = sys.b.ncols();
    if q0.len() != k1 {
        return Err(Error::LengthMismatch(q0.len(), k1));
    }
    let n = sys.a.nrows();
    let m = k1 + k;
    let mut c = DMatrix::zeros(n, m);
    c.columns_mut(0, k1).copy_from(&(-&sys.a));
    c.columns_mut(k1, k).copy_from(&sys.b);
    let ch = c.adjoint();
    let gram = &ch * &c;
    let rhs_top = &ch * DVector::from_column_slice(&sys.u);
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    kkt.view_mut((0, 0), (m, m)).copy_from(&gram);
    let mut rhs = DVector::zeros(m + 1);
    rhs.rows_mut(0, m).copy_from(&rhs_top);
    rhs[m] = C64::new(1.0, 0.0);
    for (i, &v) in q0.iter().enumerate() {
        kkt[(i, m)] = v;
        kkt[(m, i)] = v.conj();
    }
    let x = kkt.lu().solve(&rhs).ok_or(Error::DegenerateLinearization)?;
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::DegenerateLinearization);
    }
    let q: Vec<C64> = x.rows(0, k1).iter().copied().collect();
    let p: Vec<C64> = x.rows(k1, k).iter().copied().collect();
    if (inner(q0, &q) - C64::new(1.0, 0.0)).norm() > 1e-6 {
        return Err(Error::DegenerateLinearization);
    }
    Ok(P1Step { p, q, lambda: x[m] })
}

/// `Σ conj(a_i)·b_i`.
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[derive(Debug, Clone)]
pub struct P1Outcome {
    pub model: RationalSpikeModel,
    pub residual: f64,
    pub iterations: usize,
}

/// Iterates the linearized fit of real traces from `q0` for at most `jmax`
/// steps and returns the iterate with the smallest measurement-domain
/// residual. The fit runs in the demodulated frame used by
/// [`extract_spikes`].
pub fn p1_solve(
    phi: &[f64],
    g: &[f64],
    k: usize,
    q0: &[C64],
    cfg: &SolverConfig,
) -> Result<P1Outcome> {
    let l0 = (g.len() / 2) as i64;
    let ctx = P1Context::new(
        &modulate(&to_complex(phi), l0),
        &modulate(&to_complex(g), l0),
        k,
        cfg,
    )?;
    p1_iterate(&ctx, q0, q0, cfg.jmax, cfg.sigma.unwrap_or(0.0))
}

pub(crate) fn p1_iterate(
    ctx: &P1Context,
    q0: &[C64],
    q_start: &[C64],
    jmax: usize,
    sigma: f64,
) -> Result<P1Outcome> {
    let mut q = q_start.to_vec();
    let mut best: Option<P1Outcome> = None;
    for j in 0..jmax.max(1) {
        let step = ctx.build(&q).and_then(|sys| p1_step(&sys, q0));
        let step = match (step, &best) {
            (Ok(s), _) => s,
            (Err(_), Some(_)) => break,
            (Err(e), None) => return Err(e),
        };
        let model = RationalSpikeModel {
            p: step.p,
            q: step.q,
        };
        let residual = ctx.residual(&model)?;
        q = model.q.clone();
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(P1Outcome {
                model,
                residual,
                iterations: j + 1,
            });
        }
        if residual <= sigma {
            break;
        }
    }
    Ok(best.expect("at least one iterate"))
}

/// Spikes read off a rational model.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub spikes: SpikeTrain,
    /// Largest `|Im Γ_k| / |Γ_k|` discarded when taking real amplitudes.
    pub imag_residue: f64,
    pub degenerate_roots: bool,
    pub used_fallback: bool,
}

/// Delays from the roots of `Q` and amplitudes from the partial-fraction
/// residues.
///
/// The model is read in the demodulated frame `ξ^{n⌊N/2⌋}·d[n]`, where the
/// centred periodized sinc becomes exactly rational, so each residue picks
/// up a factor `u^{⌊N/2⌋}`.
pub fn extract_spikes(model: &RationalSpikeModel, grid: &Grid) -> Result<Extraction> {
    let k = model.order();
    let n = grid.n_samples();
    let l0 = (n / 2) as i32;
    let qpoly = Polynomial::new(model.q.clone());
    if k == 0 || qpoly.degree() != k {
        return Err(Error::TooFewRoots(k.max(1)));
    }
    let zs = usable_roots(qpoly.roots()?, k)?;
    let degenerate_roots = has_degenerate_pair(&zs);
    let ppoly = Polynomial::new(model.p.clone());
    let dq = qpoly.derivative();
    let mut taus = Vec::with_capacity(k);
    let mut gammas = Vec::with_capacity(k);
    let mut on_grid_root = false;
    for &z in &zs {
        let u_exact = z.inv();
        let u = u_exact / u_exact.norm();
        taus.push(delay_from_root(u, grid.window()));
        let denom = C64::new(1.0, 0.0) - u.powi(n as i32);
        if denom.norm() < 1e-6 {
            on_grid_root = true;
        }
        let residue = -u_exact * ppoly.eval(z) / dq.eval(z);
        gammas.push(residue * n as f64 * u.powi(l0) / denom);
    }
    if on_grid_root {
        gammas = fallback_amplitudes(model, &taus, grid)?;
    }
    let imag_residue = gammas
        .iter()
        .map(|g| {
            if g.norm() > 0.0 {
                g.im.abs() / g.norm()
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    let spikes = taus
        .iter()
        .zip(&gammas)
        .map(|(&tau, g)| Spike { gamma: g.re, tau })
        .collect();
    Ok(Extraction {
        spikes: SpikeTrain::new(spikes, grid)?,
        imag_residue,
        degenerate_roots,
        used_fallback: on_grid_root,
    })
}

/// Complex least squares of the model's `d` against single-spike columns.
fn fallback_amplitudes(model: &RationalSpikeModel, taus: &[f64], grid: &Grid) -> Result<Vec<C64>> {
    let n = grid.n_samples();
    let l0 = (n / 2) as i64;
    let target = model.eval(n, 1e-12);
    let cols: Vec<Vec<C64>> = taus
        .iter()
        .map(|&tau| modulate(&dirichlet_spikes(&[Spike { gamma: 1.0, tau }], grid), l0))
        .collect();
    let k = cols.len();
    let gram = DMatrix::from_fn(k, k, |i, j| inner(&cols[i], &cols[j]));
    let rhs = DVector::from_iterator(k, cols.iter().map(|c| inner(c, &target)));
    let sol = gram
        .lu()
        .solve(&rhs)
        .ok_or(Error::IndistinguishableSpikes)?;
    if norm(sol.as_slice()).is_nan() {
        return Err(Error::IndistinguishableSpikes);
    }
    Ok(sol.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_core::poly_from_roots;
    use std::f64::consts::PI;

    /// Builds `(p, q)` for the demodulated spike vector by partial fractions.
    fn model_from_spikes(spikes: &[Spike], grid: &Grid) -> RationalSpikeModel {
        let n = grid.n_samples();
        let l0 = (n / 2) as i32;
        let us: Vec<C64> = spikes
            .iter()
            .map(|s| C64::from_polar(1.0, -2.0 * PI * s.tau / grid.window()))
            .collect();
        let zs: Vec<C64> = us.iter().map(|u| u.inv()).collect();
        // Q(z) = Π(1 − u_k z); P(z) = Σ_k c_k Π_{i≠k}(1 − u_i z), scaled so d = P/Q
        let q = poly_from_roots(&zs).into_coeffs();
        let mut p = vec![C64::new(0.0, 0.0); spikes.len()];
        for (k, s) in spikes.iter().enumerate() {
            let c =
                s.gamma * (C64::new(1.0, 0.0) - us[k].powi(n as i32)) / (n as f64 * us[k].powi(l0));
            let others: Vec<C64> = zs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, z)| *z)
                .collect();
            for (i, v) in poly_from_roots(&others).coeffs().iter().enumerate() {
                p[i] += c * v;
            }
        }
        RationalSpikeModel { p, q }
    }

    #[test]
    fn closed_form_matches_demodulated_sum() {
        let grid = Grid::new(32, 1.0).unwrap();
        let spikes = [
            Spike {
                gamma: 1.3,
                tau: 4.37,
            },
            Spike {
                gamma: -0.4,
                tau: 19.81,
            },
        ];
        let m = model_from_spikes(&spikes, &grid);
        let direct = modulate(&dirichlet_spikes(&spikes, &grid), 16);
        for (a, b) in m.eval(32, 1e-12).iter().zip(&direct) {
            assert!((a - b).norm() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn extraction_inverts_construction() {
        let grid = Grid::new(40, 0.5).unwrap();
        let spikes = [
            Spike {
                gamma: 0.9,
                tau: 3.123,
            },
            Spike {
                gamma: 2.2,
                tau: 11.7,
            },
        ];
        let ex = extract_spikes(&model_from_spikes(&spikes, &grid), &grid).unwrap();
        for (a, b) in ex.spikes.spikes().iter().zip(&spikes) {
            assert!((a.tau - b.tau).abs() < 1e-9);
            assert!((a.gamma - b.gamma).abs() < 1e-9);
        }
        assert!(ex.imag_residue < 1e-9);
        assert!(!ex.used_fallback);
    }

    #[test]
    fn quarter_turn_root() {
        let grid = Grid::new(16, 1.0).unwrap();
        let u = C64::from_polar(1.0, -2.0 * PI * 0.3);
        let m = RationalSpikeModel {
            p: vec![C64::new(1.0, 0.0)],
            q: vec![C64::new(1.0, 0.0), -u],
        };
        let ex = extract_spikes(&m, &grid).unwrap();
        assert!((ex.spikes.taus()[0] - 0.3 * 16.0).abs() < 1e-12);
    }

    #[test]
    fn on_grid_uses_fallback() {
        let grid = Grid::new(16, 1.0).unwrap();
        let spikes = [Spike {
            gamma: 1.5,
            tau: 5.0,
        }];
        let target = modulate(&dirichlet_spikes(&spikes, &grid), 8);
        // Dirac at 5 in the demodulated frame has a root exactly on the grid
        let u = C64::from_polar(1.0, -2.0 * PI * 5.0 / 16.0);
        let q = vec![C64::new(1.0, 0.0), -u];
        // Q vanishes at sample 5, so the clamped denominator sets the peak
        let qv = clamp_denominator(on_grid(&q, 16), 1e-12);
        let p = vec![target[5] * qv[5] * 16.0];
        let ex = extract_spikes(&RationalSpikeModel { p, q }, &grid).unwrap();
        assert!(ex.used_fallback);
        assert!((ex.spikes.taus()[0] - 5.0).abs() < 1e-9);
        assert!(
            (ex.spikes.gammas()[0] - 1.5).abs() < 1e-9,
            "{:?}",
            ex.spikes.gammas()
        );
    }

    #[test]
    fn transparent_kernel_system() {
        let n = 16;
        let mut phi = vec![C64::new(0.0, 0.0); n];
        phi[0] = C64::new(1.0, 0.0);
        let g = to_complex(&(0..n).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let cfg = SolverConfig::new(2);
        let ctx = P1Context::new(&phi, &g, 2, &cfg).unwrap();
        assert!(ctx.u.iter().all(|v| v.norm() < 1e-12));
        let mut q = vec![C64::new(0.0, 0.0); 3];
        q[0] = C64::new(1.0, 0.0);
        let sys = ctx.build(&q).unwrap();
        assert_eq!(
            (
                sys.a.nrows(),
                sys.a.ncols(),
                sys.b.nrows(),
                sys.b.ncols(),
                sys.u.len()
            ),
            (16, 3, 16, 2, 16)
        );
        // Q ≡ 1 gives R = N·I, which cancels the 1/N in V: B holds plain monomials
        for i in 0..n {
            assert!((sys.b[(i, 1)] - root_of_unity(n, i as i64)).norm() < 1e-12);
        }
    }
}
