//! Kernel updates: the spectral least-squares kernel, its support-limited
//! variant, and a joint Levenberg–Marquardt refinement of kernel and spikes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::forward_model::Spike;
use crate::signal_core::{centered_freq, circ_lsq, dft_real, idft, norm_real, to_complex, Grid};
use crate::{Error, Result, C64};

/// Full-band kernel `argmin_φ ‖g − d⊛φ‖₂`, real part kept.
pub fn p2_kernel(d: &[C64], g: &[f64], rel_threshold: f64) -> Result<Vec<f64>> {
    if d.iter().all(|v| v.norm() == 0.0) {
        return Err(Error::DegenerateKernel);
    }
    Ok(circ_lsq(d, &to_complex(g), rel_threshold)?
        .into_iter()
        .map(|v| v.re)
        .collect())
}

/// Circular offsets `[-⌊W/2⌋, W−⌊W/2⌋)` of a centred support window.
pub fn support_offsets(width: usize) -> Vec<i64> {
    let h = (width / 2) as i64;
    (0..width as i64).map(|i| i - h).collect()
}

fn wrap(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

/// `c[s] = Σ_m a[m]·b[m+s]` for all circular lags `s`.
fn xcorr(fa: &[C64], b: &[f64]) -> Result<Vec<f64>> {
    let mut fb = dft_real(b)?;
    fb.iter_mut().zip(fa).for_each(|(y, x)| *y *= x.conj());
    Ok(idft(&fb)?.into_iter().map(|v| v.re).collect())
}

fn solve_spd(h: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let ridge = 1e-12
        * h.diagonal()
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(1e-300);
    let mut hr = h;
    for i in 0..hr.nrows() {
        hr[(i, i)] += ridge;
    }
    hr.lu().solve(b)
}

/// Kernel restricted to `width` samples centred on time zero,
/// `argmin ‖g − d⊛φ‖₂` over that support.
pub fn p2_kernel_windowed(d: &[f64], g: &[f64], width: usize) -> Result<Vec<f64>> {
    let n = g.len();
    if d.len() != n {
        return Err(Error::LengthMismatch(d.len(), n));
    }
    if width == 0 || width > n {
        return Err(Error::InvalidArgument(format!(
            "kernel support {width} outside 1..={n}"
        )));
    }
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateKernel);
    }
    let offs = support_offsets(width);
    let fd = dft_real(d)?;
    let auto = xcorr(&fd, d)?;
    let cross = xcorr(&fd, g)?;
    let gram = DMatrix::from_fn(width, width, |i, j| auto[wrap(offs[j] - offs[i], n)]);
    let rhs = DVector::from_iterator(width, offs.iter().map(|&o| cross[wrap(o, n)]));
    let sol = solve_spd(gram, &rhs).ok_or(Error::DegenerateKernel)?;
    let mut phi = vec![0.0; n];
    for (&o, v) in offs.iter().zip(sol.iter()) {
        phi[wrap(o, n)] = *v;
    }
    Ok(phi)
}

/// Kernel, amplitudes and delays (in samples) of a joint model
/// `g ≈ Σ_k Γ_k·φ⊛d(τ_k)` with `φ` confined to a centred window.
#[derive(Debug, Clone)]
pub(crate) struct JointState {
    pub phi_w: Vec<f64>,
    pub gammas: Vec<f64>,
    pub taus: Vec<f64>,
}

struct Evaluated {
    resid: Vec<f64>,
    dtot: Vec<f64>,
    gamma_cols: Vec<Vec<f64>>,
    tau_cols: Vec<Vec<f64>>,
    norm: f64,
}

struct Joint<'a> {
    g: &'a [f64],
    offs: Vec<i64>,
    freqs: Vec<f64>,
}

impl Joint<'_> {
    fn full_kernel(&self, phi_w: &[f64]) -> Vec<f64> {
        let n = self.g.len();
        let mut phi = vec![0.0; n];
        for (&o, &v) in self.offs.iter().zip(phi_w) {
            phi[wrap(o, n)] = v;
        }
        phi
    }

    fn evaluate(&self, s: &JointState) -> Result<Evaluated> {
        let n = self.g.len();
        let fphi = dft_real(&self.full_kernel(&s.phi_w))?;
        let mut dtot_hat = vec![C64::new(0.0, 0.0); n];
        let mut gamma_cols = Vec::with_capacity(s.taus.len());
        let mut tau_cols = Vec::with_capacity(s.taus.len());
        let mut model = vec![0.0; n];
        for (&gam, &tau) in s.gammas.iter().zip(&s.taus) {
            let dh: Vec<C64> = self
                .freqs
                .iter()
                .map(|&f| C64::from_polar(1.0, -2.0 * PI * f * tau / n as f64))
                .collect();
            dtot_hat
                .iter_mut()
                .zip(&dh)
                .for_each(|(a, b)| *a += b * gam);
            let col: Vec<C64> = dh.iter().zip(&fphi).map(|(a, b)| a * b).collect();
            let dcol: Vec<C64> = col
                .iter()
                .zip(&self.freqs)
                .map(|(v, &f)| v * C64::new(0.0, -2.0 * PI * f / n as f64) * gam)
                .collect();
            let c: Vec<f64> = idft(&col)?.into_iter().map(|v| v.re).collect();
            model.iter_mut().zip(&c).for_each(|(m, v)| *m += gam * v);
            gamma_cols.push(c);
            tau_cols.push(idft(&dcol)?.into_iter().map(|v| v.re).collect());
        }
        let dtot = idft(&dtot_hat)?.into_iter().map(|v| v.re).collect();
        let resid: Vec<f64> = self.g.iter().zip(&model).map(|(a, b)| a - b).collect();
        let norm = norm_real(&resid);
        Ok(Evaluated {
            resid,
            dtot,
            gamma_cols,
            tau_cols,
            norm,
        })
    }

    /// Normal equations `JᵀJ`, `Jᵀr`; the kernel block is Toeplitz in the
    /// autocorrelation of the spike vector.
    fn normal_equations(&self, e: &Evaluated) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = self.g.len();
        let w = self.offs.len();
        let k = e.gamma_cols.len();
        let m = w + 2 * k;
        let fd = dft_real(&e.dtot)?;
        let auto = xcorr(&fd, &e.dtot)?;
        let others: Vec<&Vec<f64>> = e.gamma_cols.iter().chain(e.tau_cols.iter()).collect();
        let cross: Vec<Vec<f64>> = others
            .iter()
            .map(|c| xcorr(&fd, c))
            .collect::<Result<_>>()?;
        let cross_r = xcorr(&fd, &e.resid)?;
        let mut h = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for i in 0..w {
            for j in 0..w {
                h[(i, j)] = auto[wrap(self.offs[j] - self.offs[i], n)];
            }
            for (c, cc) in cross.iter().enumerate() {
                let v = cc[wrap(self.offs[i], n)];
                h[(i, w + c)] = v;
                h[(w + c, i)] = v;
            }
            b[i] = cross_r[wrap(self.offs[i], n)];
        }
        for (a, ca) in others.iter().enumerate() {
            for (c, cc) in others.iter().enumerate().skip(a) {
                let v: f64 = ca.iter().zip(cc.iter()).map(|(x, y)| x * y).sum();
                h[(w + a, w + c)] = v;
                h[(w + c, w + a)] = v;
            }
            b[w + a] = ca.iter().zip(&e.resid).map(|(x, y)| x * y).sum();
        }
        Ok((h, b))
    }
}

/// Levenberg–Marquardt on `(φ, Γ, τ)`. Returns the refined state and its
/// residual norm; never returns a state worse than the input.
pub(crate) fn polish(
    g: &[f64],
    width: usize,
    start: JointState,
    iters: usize,
    sigma: f64,
) -> Result<(JointState, f64)> {
    let n = g.len();
    let joint = Joint {
        g,
        offs: support_offsets(width),
        freqs: (0..n).map(|b| centered_freq(b, n) as f64).collect(),
    };
    let mut state = start;
    let mut cur = joint.evaluate(&state)?;
    let mut mu = 1e-3;
    for _ in 0..iters {
        if cur.norm <= sigma {
            break;
        }
        let (h, b) = joint.normal_equations(&cur)?;
        let mut accepted = false;
        while mu <= 1e8 {
            let mut damped = h.clone();
            for i in 0..h.nrows() {
                damped[(i, i)] += mu * h[(i, i)].max(1e-300);
            }
            let Some(step) = solve_spd(damped, &b) else {
                mu *= 4.0;
                continue;
            };
            let w = width;
            let k = state.gammas.len();
            let cand = JointState {
                phi_w: state
                    .phi_w
                    .iter()
                    .zip(step.rows(0, w).iter())
                    .map(|(a, d)| a + d)
                    .collect(),
                gammas: state
                    .gammas
                    .iter()
                    .zip(step.rows(w, k).iter())
                    .map(|(a, d)| a + d)
                    .collect(),
                taus: state
                    .taus
                    .iter()
                    .zip(step.rows(w + k, k).iter())
                    .map(|(a, d)| a + d)
                    .collect(),
            };
            let next = joint.evaluate(&cand)?;
            if next.norm < cur.norm {
                let gain = cur.norm - next.norm;
                state = cand;
                cur = next;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if gain <= 1e-14 * cur.norm.max(1e-300) {
                    return Ok((state, cur.norm));
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    Ok((state, cur.norm))
}

/// Residual `‖g − Re(φ⊛d)‖₂` of a spike train against a full kernel.
pub(crate) fn model_residual(g: &[f64], phi: &[f64], spikes: &[Spike], grid: &Grid) -> Result<f64> {
    let mut s = crate::forward_model::spike_spectrum(spikes, grid);
    let fphi = dft_real(phi)?;
    s.iter_mut().zip(&fphi).for_each(|(a, b)| *a *= b);
    let fit = idft(&s)?;
    Ok(g.iter()
        .zip(&fit)
        .map(|(a, b)| (a - b.re).powi(2))
        .sum::<f64>()
        .sqrt())
}
