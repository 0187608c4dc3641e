//! DFT conventions, Vandermonde matrices, circulant algebra and polynomial
//! root finding shared by every recovery route.
//!
//! Forward transform is unnormalized, `X[m] = Σ x[n] e^{-j2πnm/N}`; the
//! inverse carries the `1/N`.

use std::cell::RefCell;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rustfft::FftPlanner;

use crate::{Error, Result, C64};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Sample count and sampling period of a trace.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    n_samples: usize,
    sample_period: f64,
}

impl Grid {
    pub fn new(n_samples: usize, sample_period: f64) -> Result<Self> {
        if n_samples < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 samples, got {n_samples}"
            )));
        }
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "sample period must be positive, got {sample_period}"
            )));
        }
        Ok(Self {
            n_samples,
            sample_period,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    /// Length of the periodic observation window, `N·T`.
    pub fn window(&self) -> f64 {
        self.n_samples as f64 * self.sample_period
    }
}

/// `e^{j2πk/n}`, with the exponent reduced modulo `n` first so large
/// products stay accurate.
pub fn root_of_unity(n: usize, k: i64) -> C64 {
    let r = k.rem_euclid(n as i64) as f64;
    C64::from_polar(1.0, 2.0 * PI * r / n as f64)
}

/// Signed frequency carried by DFT bin `b` when the spectrum is read as the
/// centred window `[-⌊N/2⌋, N-1-⌊N/2⌋]`.
pub fn centered_freq(b: usize, n: usize) -> i64 {
    if b < n - n / 2 {
        b as i64
    } else {
        b as i64 - n as i64
    }
}

fn transform(buf: &mut [C64], inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let fft = if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        };
        fft.process(buf);
    });
}

pub fn dft(x: &[C64]) -> Result<Vec<C64>> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let mut buf = x.to_vec();
    transform(&mut buf, false);
    Ok(buf)
}

pub fn dft_real(x: &[f64]) -> Result<Vec<C64>> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    transform(&mut buf, false);
    Ok(buf)
}

pub fn idft(x: &[C64]) -> Result<Vec<C64>> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let mut buf = x.to_vec();
    transform(&mut buf, true);
    let s = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|v| *v *= s);
    Ok(buf)
}

/// N×M matrix with entries `e^{-j2πnm/N}`.
pub fn vandermonde_w(n: usize, m: usize) -> DMatrix<C64> {
    DMatrix::from_fn(n, m, |r, c| root_of_unity(n, -((r * c) as i64)))
}

/// N×M matrix with entries `e^{j2πnm/N}/N`.
pub fn vandermonde_v(n: usize, m: usize) -> DMatrix<C64> {
    let s = 1.0 / n as f64;
    DMatrix::from_fn(n, m, |r, c| root_of_unity(n, (r * c) as i64) * s)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(Error::EmptySignal);
    }
    Ok(())
}

/// Circular convolution, evaluated as a product of spectra.
pub fn circ_conv(a: &[C64], b: &[C64]) -> Result<Vec<C64>> {
    check_len(a.len(), b.len())?;
    let fa = dft(a)?;
    let mut fb = dft(b)?;
    fb.iter_mut().zip(&fa).for_each(|(y, x)| *y *= x);
    idft(&fb)
}

pub fn circ_conv_real(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), b.len())?;
    let fa = dft_real(a)?;
    let mut fb = dft_real(b)?;
    fb.iter_mut().zip(&fa).for_each(|(y, x)| *y *= x);
    Ok(idft(&fb)?.into_iter().map(|v| v.re).collect())
}

/// Least-squares deconvolution `argmin ‖g − a⊛x‖₂` through a truncated
/// spectral pseudoinverse: bins where `|â| < rel_threshold·max|â|` are zeroed.
pub fn circ_lsq(a: &[C64], g: &[C64], rel_threshold: f64) -> Result<Vec<C64>> {
    check_len(a.len(), g.len())?;
    let fa = dft(a)?;
    circ_lsq_spectral(&fa, g, rel_threshold)
}

/// Same as [`circ_lsq`] with the kernel spectrum already computed.
pub fn circ_lsq_spectral(fa: &[C64], g: &[C64], rel_threshold: f64) -> Result<Vec<C64>> {
    check_len(fa.len(), g.len())?;
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rel_threshold must lie in (0,1), got {rel_threshold}"
        )));
    }
    let peak = fa.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if peak == 0.0 || !peak.is_finite() {
        return Err(Error::DegenerateKernel);
    }
    let cut = rel_threshold * peak;
    let mut fg = dft(g)?;
    for (y, a) in fg.iter_mut().zip(fa) {
        let m = a.norm();
        *y = if m >= cut {
            *y * a.conj() / (m * m)
        } else {
            C64::new(0.0, 0.0)
        };
    }
    idft(&fg)
}

/// Multiply `x[n]` by `e^{j2πnk/N}`.
pub fn modulate(x: &[C64], k: i64) -> Vec<C64> {
    let n = x.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| v * root_of_unity(n, i as i64 * k))
        .collect()
}

pub fn norm(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn norm_real(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn to_complex(x: &[f64]) -> Vec<C64> {
    x.iter().map(|&v| C64::new(v, 0.0)).collect()
}

/// Complex polynomial, coefficients stored constant term first.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<C64>,
}

const TRIM_REL: f64 = 1e-14;

impl Polynomial {
    pub fn new(coeffs: Vec<C64>) -> Self {
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Drops trailing coefficients with `|c| ≤ 1e-14·max|c|`.
    pub fn trimmed(&self) -> Polynomial {
        let tol = TRIM_REL * self.max_abs();
        let mut c = self.coeffs.clone();
        while c.len() > 1 && c.last().is_some_and(|v| v.norm() <= tol) {
            c.pop();
        }
        Polynomial::new(c)
    }

    /// Effective degree after trimming.
    pub fn degree(&self) -> usize {
        self.trimmed().coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, z: C64) -> C64 {
        self.coeffs
            .iter()
            .rev()
            .fold(C64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coeffs.len() <= 1 {
            return Polynomial::new(vec![C64::new(0.0, 0.0)]);
        }
        Polynomial::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &c)| c * i as f64)
                .collect(),
        )
    }

    pub fn roots(&self) -> Result<Vec<C64>> {
        poly_roots(self)
    }
}

/// Builds `Π_{r≠0} (1 − z/r) · z^{#zero roots}`, so the constant term is 1
/// whenever no root sits at the origin.
pub fn poly_from_roots(roots: &[C64]) -> Polynomial {
    let mut c = vec![C64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![C64::new(0.0, 0.0); c.len() + 1];
        if r == C64::new(0.0, 0.0) {
            next[1..].copy_from_slice(&c);
        } else {
            let s = -1.0 / r;
            for (i, &v) in c.iter().enumerate() {
                next[i] += v;
                next[i + 1] += v * s;
            }
        }
        c = next;
    }
    Polynomial::new(c)
}

/// Diagonal similarity scaling by powers of two that equalizes row and
/// column norms (the classic balancing sweep, without permutations).
fn balance(m: &mut DMatrix<C64>) {
    let n = m.nrows();
    let radix = 2.0_f64;
    let mut done = false;
    let mut sweeps = 0;
    while !done && sweeps < 100 {
        done = true;
        sweeps += 1;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += m[(j, i)].norm();
                    r += m[(i, j)].norm();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut cc = c;
            while cc < r / radix {
                cc *= radix;
                f *= radix;
            }
            while cc > r * radix {
                cc /= radix;
                f /= radix;
            }
            if (cc + r / f) < 0.95 * s {
                done = false;
                for j in 0..n {
                    m[(i, j)] /= f;
                    m[(j, i)] *= f;
                }
            }
        }
    }
}

fn polish(p: &Polynomial, dp: &Polynomial, mut z: C64) -> C64 {
    let mut pz = p.eval(z).norm();
    for _ in 0..3 {
        let d = dp.eval(z);
        if d.norm() == 0.0 {
            break;
        }
        let cand = z - p.eval(z) / d;
        let pc = p.eval(cand).norm();
        if pc.is_nan() || pc >= pz || !cand.re.is_finite() || !cand.im.is_finite() {
            break;
        }
        z = cand;
        pz = pc;
    }
    z
}

/// All roots of `p` as eigenvalues of the balanced companion matrix,
/// followed by a guarded Newton polish.
pub fn poly_roots(p: &Polynomial) -> Result<Vec<C64>> {
    if p.coeffs
        .iter()
        .any(|c| !c.re.is_finite() || !c.im.is_finite())
    {
        return Err(Error::NonFinite("polynomial coefficients"));
    }
    if p.max_abs() == 0.0 {
        return Err(Error::ZeroPolynomial);
    }
    let t = p.trimmed();
    let d = t.coeffs.len() - 1;
    if d == 0 {
        return Ok(Vec::new());
    }
    let lead = t.coeffs[d];
    if d == 1 {
        return Ok(vec![-t.coeffs[0] / lead]);
    }
    let mut comp = DMatrix::<C64>::zeros(d, d);
    for i in 1..d {
        comp[(i, i - 1)] = C64::new(1.0, 0.0);
    }
    for i in 0..d {
        comp[(i, d - 1)] = -t.coeffs[i] / lead;
    }
    balance(&mut comp);
    let schur = nalgebra::linalg::Schur::try_new(comp, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::InvalidArgument("companion eigenvalue iteration did not converge".into())
    })?;
    let ev: DVector<C64> = schur
        .eigenvalues()
        .ok_or_else(|| Error::InvalidArgument("companion eigenvalues unavailable".into()))?;
    let dp = t.derivative();
    Ok(ev.iter().map(|&z| polish(&t, &dp, z)).collect())
}
