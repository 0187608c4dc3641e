//! Blind recovery by alternating minimization: a rational spike-model fit
//! against the current kernel, then a kernel least-squares update against
//! the current spikes, restarted from fresh initializations until the data
//! are explained to within `σ`.

mod kernel;
mod rational;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::forward_model::{dirichlet_spikes, KernelTrace, MeasurementTrace, Spike, SpikeTrain};
use crate::signal_core::{
    circ_lsq, dft_real, idft, modulate, norm_real, poly_from_roots, root_of_unity, to_complex, Grid,
};
use crate::{Error, Result, C64};

pub use kernel::{p2_kernel, p2_kernel_windowed, support_offsets};
pub use rational::{
    clamp_denominator, extract_spikes, inner, on_grid, p1_build, p1_solve, p1_step, Extraction,
    P1Outcome, P1Step, P1System, RationalSpikeModel,
};

use kernel::{model_residual, polish, JointState};
use rational::{p1_iterate, P1Context};

/// Smallest residual target relative to `‖g‖₂`, so noiseless data stop at
/// round-off instead of exhausting every restart.
pub const RESIDUAL_FLOOR: f64 = 1e-9;

/// Solver settings. `sigma = None` means "estimate from the data".
///
/// `kernel_support` confines the kernel to that many samples centred on
/// time zero. Without it the kernel update is the full-band least-squares
/// solution, under which any spike train is a fixed point, so blind
/// recovery is only meaningful with a support bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub k: usize,
    pub sigma: Option<f64>,
    pub jmax: usize,
    pub max_restarts: usize,
    pub max_outer: usize,
    pub pinv_rel_threshold: f64,
    pub q_clamp: f64,
    pub seed: u64,
    pub band_threshold: f64,
    pub kernel_support: Option<usize>,
    /// Recompute `d⁰` and `u` at every inner iteration instead of once per fit.
    pub refresh_d0: bool,
    /// Levenberg–Marquardt iterations after the alternation; 0 disables.
    pub polish_iters: usize,
    /// Outer loop stops once an iteration improves the residual by less
    /// than this fraction.
    pub stagnation_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k: 1,
            sigma: None,
            jmax: 20,
            max_restarts: 10,
            max_outer: 50,
            pinv_rel_threshold: 1e-8,
            q_clamp: 1e-8,
            seed: 0,
            band_threshold: crate::strang_fix::DEFAULT_BAND_THRESHOLD,
            kernel_support: None,
            refresh_d0: false,
            polish_iters: 100,
            stagnation_tol: 1e-3,
        }
    }
}

impl SolverConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    /// Restart budget for closely spaced returns.
    pub fn close_spikes(mut self) -> Self {
        self.max_restarts = 20;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.jmax == 0 || self.max_restarts == 0 || self.max_outer == 0 {
            return bad("jmax, max_restarts and max_outer must be positive");
        }
        if let Some(s) = self.sigma {
            if !(s.is_finite() && s >= 0.0) {
                return bad("sigma must be non-negative");
            }
        }
        if !(pos(self.pinv_rel_threshold) && self.pinv_rel_threshold < 1.0) {
            return bad("pinv_rel_threshold must lie in (0,1)");
        }
        if !(pos(self.q_clamp) && self.q_clamp < 1.0) {
            return bad("q_clamp must lie in (0,1)");
        }
        if !(pos(self.band_threshold) && self.band_threshold < 1.0) {
            return bad("band_threshold must lie in (0,1)");
        }
        if self.kernel_support == Some(0) {
            return bad("kernel_support must be positive");
        }
        if !(self.stagnation_tol >= 0.0 && self.stagnation_tol < 1.0) {
            return bad("stagnation_tol must lie in [0,1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub spikes: SpikeTrain,
    /// Kernel with its largest-magnitude sample equal to +1 and its circular
    /// centre of mass rounded to sample zero.
    pub kernel: KernelTrace,
    pub residual: f64,
    pub sigma: f64,
    pub restarts_used: usize,
    pub iterations_used: usize,
    pub converged: bool,
    pub degenerate_flags: Vec<String>,
}

/// `φ⁰ = Re(idft(e^{jw} ⊙ dft(g)))` with `w ~ N(0, I)` drawn from `seed`;
/// `None` keeps `w = 0` and returns `g` itself.
pub fn init_kernel(g: &[f64], seed: Option<u64>) -> Vec<f64> {
    match seed {
        None => g.to_vec(),
        Some(s) => random_phase_kernel(g, &mut ChaCha8Rng::seed_from_u64(s)),
    }
}

fn random_phase_kernel(g: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spec = dft_real(g).expect("non-empty trace");
    for v in spec.iter_mut() {
        let w: f64 = rng.sample(StandardNormal);
        *v *= C64::from_polar(1.0, w);
    }
    idft(&spec)
        .expect("non-empty trace")
        .into_iter()
        .map(|v| v.re)
        .collect()
}

/// Indices of the `k` most prominent strict local maxima of `a`, chosen
/// greedily with an exclusion radius of one sample, topped up with the
/// largest remaining entries when there are too few maxima.
pub fn peak_indices(a: &[f64], k: usize) -> Vec<usize> {
    let n = a.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    let dist = |i: usize, j: usize| {
        let d = i.abs_diff(j);
        d.min(n - d)
    };
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if picked.len() == k {
            break;
        }
        let is_max = a[i] > a[(i + n - 1) % n] && a[i] > a[(i + 1) % n];
        if is_max && picked.iter().all(|&j| dist(i, j) > 1) {
            picked.push(i);
        }
    }
    for &i in &order {
        if picked.len() == k {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Unit-norm `Q` whose roots sit at `e^{j2πx/N}` for each position `x`
/// (in samples).
pub fn q_from_positions(pos: &[f64], n: usize) -> Vec<C64> {
    let roots: Vec<C64> = pos
        .iter()
        .map(|&x| C64::from_polar(1.0, 2.0 * PI * x / n as f64))
        .collect();
    let q = poly_from_roots(&roots).into_coeffs();
    let s = crate::signal_core::norm(&q);
    q.into_iter().map(|v| v / s).collect()
}

/// `Q` from the most prominent peaks of `|d⁰|`.
pub fn init_q_deterministic(d0: &[C64], k: usize) -> Vec<C64> {
    let mags: Vec<f64> = d0.iter().map(|v| v.norm()).collect();
    let pos: Vec<f64> = peak_indices(&mags, k)
        .into_iter()
        .map(|i| i as f64)
        .collect();
    q_from_positions(&pos, d0.len())
}

fn random_q(k: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    let q: Vec<C64> = (0..=k)
        .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let s = crate::signal_core::norm(&q);
    q.into_iter().map(|v| v / s).collect()
}

/// Noise level as an ℓ2 budget: `median(|G[b]|)/√(ln 2)` over the bins in
/// the top quarter of the frequency range. For white noise of standard
/// deviation `s` each such `|G[b]|` is Rayleigh with median `s·√(N·ln 2)`,
/// so the estimate targets `s·√N`.
pub fn estimate_sigma(g: &[f64]) -> f64 {
    let n = g.len();
    if n < 2 {
        return 0.0;
    }
    let spec = dft_real(g).expect("non-empty trace");
    let cut = 3.0 * n as f64 / 8.0;
    let mut mags: Vec<f64> = spec
        .iter()
        .enumerate()
        .filter(|(b, _)| (crate::signal_core::centered_freq(*b, n).abs() as f64) > cut)
        .map(|(_, v)| v.norm())
        .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let m = mags.len();
    let median = if m % 2 == 1 {
        mags[m / 2]
    } else {
        0.5 * (mags[m / 2 - 1] + mags[m / 2])
    };
    median / 2f64.ln().sqrt()
}

/// Drops spikes with `|Γ_k| < rel·max|Γ|`; the strongest always survives.
pub fn threshold_spikes(spikes: &SpikeTrain, rel: f64, grid: &Grid) -> Result<SpikeTrain> {
    if !(0.0..1.0).contains(&rel) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in [0,1), got {rel}"
        )));
    }
    let peak = spikes.gammas().iter().map(|g| g.abs()).fold(0.0, f64::max);
    let kept: Vec<Spike> = spikes
        .spikes()
        .iter()
        .copied()
        .filter(|s| s.gamma.abs() >= rel * peak)
        .collect();
    SpikeTrain::new(kept, grid)
}

/// Circular centre of mass of `x` in samples, from the phase of the first
/// harmonic, mapped to `(-N/2, N/2]`.
pub fn circular_center(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let s: C64 = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v * root_of_unity(x.len(), -(i as i64)))
        .sum();
    let c = -s.arg() * n / (2.0 * PI);
    if c > n / 2.0 {
        c - n
    } else if c <= -n / 2.0 {
        c + n
    } else {
        c
    }
}

fn roll(x: &[f64], shift: i64) -> Vec<f64> {
    let n = x.len() as i64;
    (0..n)
        .map(|i| x[(i - shift).rem_euclid(n) as usize])
        .collect()
}

fn localize(phi: &[f64], width: usize) -> Vec<f64> {
    let c = circular_center(phi).round() as i64;
    let rolled = roll(phi, -c);
    let n = phi.len();
    let mut out = vec![0.0; n];
    for o in support_offsets(width) {
        let i = o.rem_euclid(n as i64) as usize;
        out[i] = rolled[i];
    }
    out
}

/// Start positions for the outermost returns from the extent of the
/// signal: with a kernel occupying `[-⌊W/2⌋, W−⌊W/2⌋)`, the first return
/// sits `⌊W/2⌋` after the signal begins and the last `W−⌊W/2⌋−1` before it
/// ends. Interior returns are spread evenly in between.
pub fn support_edge_positions(g: &[f64], width: usize, k: usize, sigma: f64) -> Vec<f64> {
    let n = g.len();
    let peak = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * peak).max(4.0 * sigma / (n as f64).sqrt());
    let above: Vec<usize> = (0..n).filter(|&i| g[i].abs() > floor).collect();
    if above.is_empty() {
        return (0..k).map(|i| (i * n / k) as f64).collect();
    }
    // the signal occupies the complement of the widest quiet gap
    let mut best_gap = 0;
    let mut start = above[0];
    for (i, &a) in above.iter().enumerate() {
        let next = if i + 1 < above.len() {
            above[i + 1]
        } else {
            above[0] + n
        };
        if next - a > best_gap {
            best_gap = next - a;
            start = next % n;
        }
    }
    let end = start + (n - best_gap);
    let h = (width / 2) as f64;
    let first = start as f64 + h;
    let last = end as f64 - (width as f64 - h - 1.0);
    let (first, last) = if last < first {
        ((first + last) / 2.0, (first + last) / 2.0)
    } else {
        (first, last)
    };
    (0..k)
        .map(|i| {
            let x = if k == 1 {
                0.5 * (first + last)
            } else {
                first + (last - first) * i as f64 / (k - 1) as f64
            };
            x.rem_euclid(n as f64)
        })
        .collect()
}

struct RestartOutcome {
    phi: Vec<f64>,
    spikes: Vec<Spike>,
    residual: f64,
    iterations: usize,
}

struct Solver<'a> {
    g: &'a [f64],
    g_mod: Vec<C64>,
    grid: Grid,
    cfg: &'a SolverConfig,
    sigma: f64,
    l0: i64,
}

impl Solver<'_> {
    fn kernel_update(&self, d: &[f64]) -> Result<Vec<f64>> {
        match self.cfg.kernel_support {
            Some(w) => p2_kernel_windowed(d, self.g, w),
            None => p2_kernel(&to_complex(d), self.g, self.cfg.pinv_rel_threshold),
        }
    }

    fn spike_vector(&self, spikes: &[Spike]) -> Vec<f64> {
        dirichlet_spikes(spikes, &self.grid)
            .into_iter()
            .map(|v| v.re)
            .collect()
    }

    fn p1(&self, phi: &[f64], q0: &[C64], q_start: &[C64]) -> Result<P1Outcome> {
        let phi_mod = modulate(&to_complex(phi), self.l0);
        if !self.cfg.refresh_d0 {
            let ctx = P1Context::new(&phi_mod, &self.g_mod, self.cfg.k, self.cfg)?;
            return p1_iterate(&ctx, q0, q_start, self.cfg.jmax, self.sigma);
        }
        let mut q = q_start.to_vec();
        let mut best: Option<P1Outcome> = None;
        for j in 0..self.cfg.jmax {
            let ctx = P1Context::new(&phi_mod, &self.g_mod, self.cfg.k, self.cfg)?;
            let Ok(mut out) = p1_iterate(&ctx, q0, &q, 1, self.sigma) else {
                break;
            };
            out.iterations = j + 1;
            q = out.model.q.clone();
            let done = out.residual <= self.sigma;
            if best.as_ref().is_none_or(|b| out.residual < b.residual) {
                best = Some(out);
            }
            if done {
                break;
            }
        }
        best.ok_or(Error::DegenerateLinearization)
    }

    /// Alternation from `(φ⁰, q0)`, then the joint refinement.
    fn run(&self, mut phi: Vec<f64>, q0: Vec<C64>) -> Result<RestartOutcome> {
        let mut q = q0.clone();
        let mut best: Option<RestartOutcome> = None;
        let mut prev = f64::INFINITY;
        let mut iterations = 0;
        for _ in 0..self.cfg.max_outer {
            let fit = self.p1(&phi, &q0, &q)?;
            iterations += fit.iterations;
            q = fit.model.q.clone();
            let ex = extract_spikes(&fit.model, &self.grid)?;
            let d = self.spike_vector(ex.spikes.spikes());
            phi = self.kernel_update(&d)?;
            let residual = model_residual(self.g, &phi, ex.spikes.spikes(), &self.grid)?;
            if best.as_ref().is_none_or(|b| residual < b.residual) {
                best = Some(RestartOutcome {
                    phi: phi.clone(),
                    spikes: ex.spikes.spikes().to_vec(),
                    residual,
                    iterations,
                });
            }
            if residual <= self.sigma || residual > prev * (1.0 - self.cfg.stagnation_tol) {
                break;
            }
            prev = residual;
        }
        let mut out = best.ok_or(Error::DegenerateLinearization)?;
        out.iterations = iterations;
        if let (Some(w), true) = (
            self.cfg.kernel_support,
            self.cfg.polish_iters > 0 && out.residual > self.sigma,
        ) {
            self.refine(&mut out, w)?;
        }
        Ok(out)
    }

    fn refine(&self, out: &mut RestartOutcome, width: usize) -> Result<()> {
        let n = self.g.len();
        let tp = self.grid.sample_period();
        let start = JointState {
            phi_w: support_offsets(width)
                .iter()
                .map(|&o| out.phi[o.rem_euclid(n as i64) as usize])
                .collect(),
            gammas: out.spikes.iter().map(|s| s.gamma).collect(),
            taus: out.spikes.iter().map(|s| s.tau / tp).collect(),
        };
        let (st, residual) = polish(self.g, width, start, self.cfg.polish_iters, self.sigma)?;
        if residual < out.residual && st.gammas.iter().all(|g| g.is_finite() && *g != 0.0) {
            let mut phi = vec![0.0; n];
            for (&o, &v) in support_offsets(width).iter().zip(&st.phi_w) {
                phi[o.rem_euclid(n as i64) as usize] = v;
            }
            out.phi = phi;
            out.spikes = st
                .gammas
                .iter()
                .zip(&st.taus)
                .map(|(&gamma, &t)| Spike {
                    gamma,
                    tau: (t * tp).rem_euclid(self.grid.window()),
                })
                .map(|s| {
                    if s.tau >= self.grid.window() {
                        Spike { tau: 0.0, ..s }
                    } else {
                        s
                    }
                })
                .collect();
            out.residual = residual;
        }
        Ok(())
    }

    /// Initial `(φ⁰, q0)` for restart `r`.
    fn initialization(&self, r: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<C64>)> {
        let n = self.g.len();
        let k = self.cfg.k;
        let shape = |phi: Vec<f64>| match self.cfg.kernel_support {
            Some(w) => localize(&phi, w),
            None => phi,
        };
        match (r, self.cfg.kernel_support) {
            (0, None) | (1, Some(_)) => {
                let phi = shape(init_kernel(self.g, None));
                let d0 = circ_lsq(
                    &to_complex(&phi),
                    &to_complex(self.g),
                    self.cfg.pinv_rel_threshold,
                )?;
                Ok((phi, init_q_deterministic(&d0, k)))
            }
            (0, Some(w)) => {
                let pos = support_edge_positions(self.g, w, k, self.sigma);
                let spikes: Vec<Spike> = pos
                    .iter()
                    .map(|&x| Spike {
                        gamma: 1.0,
                        tau: x * self.grid.sample_period(),
                    })
                    .collect();
                let phi = self.kernel_update(&self.spike_vector(&spikes))?;
                Ok((phi, q_from_positions(&pos, n)))
            }
            _ => {
                let phi = shape(random_phase_kernel(self.g, rng));
                Ok((phi, random_q(k, rng)))
            }
        }
    }
}

/// Gauge convention: the largest-magnitude sample of φ is +1, and the
/// kernel is rolled by whole samples so its circular centre of mass lands
/// nearest sample zero.
fn fix_gauge(phi: &[f64], spikes: &[Spike], grid: &Grid) -> (Vec<f64>, Vec<Spike>) {
    let scale = phi
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    let scale = if scale != 0.0 { scale } else { 1.0 };
    let unit: Vec<f64> = phi.iter().map(|v| v / scale).collect();
    let c = circular_center(&unit).round() as i64;
    let phi = roll(&unit, -c);
    let w = grid.window();
    let spikes = spikes
        .iter()
        .map(|s| {
            let tau = (s.tau + c as f64 * grid.sample_period()).rem_euclid(w);
            Spike {
                gamma: s.gamma * scale,
                tau: if tau >= w { 0.0 } else { tau },
            }
        })
        .collect();
    (phi, spikes)
}

fn power_of_two_scale(x: f64) -> f64 {
    if x.is_finite() && x > 0.0 {
        2f64.powi(x.log2().round() as i32)
    } else {
        1.0
    }
}

pub fn blind_solve(g: &MeasurementTrace, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let n = g.samples().len();
    if 2 * cfg.k > n {
        return Err(Error::ModelOrder { k: cfg.k, n });
    }
    if let Some(w) = cfg.kernel_support {
        if w > n {
            return Err(Error::InvalidArgument(format!(
                "kernel support {w} exceeds {n} samples"
            )));
        }
    }
    let sigma = cfg
        .sigma
        .unwrap_or_else(|| estimate_sigma(g.samples()))
        .max(RESIDUAL_FLOOR * norm_real(g.samples()));
    // Solving at unit scale by a power of two keeps results exactly
    // equivariant under power-of-two rescaling of the trace.
    let unit = power_of_two_scale(norm_real(g.samples()));
    let scaled: Vec<f64> = g.samples().iter().map(|v| v / unit).collect();
    let l0 = (n / 2) as i64;
    let solver = Solver {
        g: &scaled,
        g_mod: modulate(&to_complex(&scaled), l0),
        grid: *g.grid(),
        cfg,
        sigma: sigma / unit,
        l0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(RestartOutcome, usize)> = None;
    let mut flags = Vec::new();
    let mut iterations = 0;
    let mut restarts = 0;
    for r in 0..cfg.max_restarts {
        restarts = r + 1;
        let outcome = solver
            .initialization(r, &mut rng)
            .and_then(|(phi, q0)| solver.run(phi, q0));
        match outcome {
            Ok(o) => {
                iterations += o.iterations;
                let done = o.residual <= solver.sigma;
                if best.as_ref().is_none_or(|(b, _)| o.residual < b.residual) {
                    best = Some((o, r));
                }
                if done {
                    break;
                }
            }
            Err(e) => flags.push(format!("restart {r}: {e}")),
        }
    }
    let (out, _) = best.ok_or_else(|| Error::AllRestartsDegenerate(flags.join("; ")))?;
    let unscaled: Vec<Spike> = out
        .spikes
        .iter()
        .map(|s| Spike {
            gamma: s.gamma * unit,
            ..*s
        })
        .collect();
    let (phi, spikes) = fix_gauge(&out.phi, &unscaled, g.grid());
    let spikes = SpikeTrain::new(spikes, g.grid())?;
    let residual = model_residual(g.samples(), &phi, spikes.spikes(), g.grid())?;
    let taus = spikes.taus();
    if taus
        .windows(2)
        .any(|w| w[1] - w[0] < 1e-10 * g.grid().window())
    {
        flags.push("degenerate roots".into());
    }
    Ok(SolveReport {
        spikes,
        kernel: KernelTrace::new(phi, *g.grid())?,
        residual,
        sigma,
        restarts_used: restarts,
        iterations_used: iterations,
        converged: residual <= sigma,
        degenerate_flags: flags,
    })
}

/// One outer iteration (fit, extract, kernel update) from a given kernel
/// and denominator. Exposed for fixed-point checks.
pub fn outer_iteration(
    g: &MeasurementTrace,
    phi: &[f64],
    q0: &[C64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SpikeTrain, f64)> {
    let n = g.samples().len();
    let l0 = (n / 2) as i64;
    let solver = Solver {
        g: g.samples(),
        g_mod: modulate(&to_complex(g.samples()), l0),
        grid: *g.grid(),
        cfg,
        sigma: cfg.sigma.unwrap_or(0.0),
        l0,
    };
    let fit = solver.p1(phi, q0, q0)?;
    let ex = extract_spikes(&fit.model, g.grid())?;
    let phi = solver.kernel_update(&solver.spike_vector(ex.spikes.spikes()))?;
    let residual = model_residual(g.samples(), &phi, ex.spikes.spikes(), g.grid())?;
    Ok((phi, ex.spikes, residual))
}

/// Measurement-domain residual `‖g − Re(φ⊛d)‖₂`.
pub fn residual(g: &MeasurementTrace, kernel: &KernelTrace, spikes: &SpikeTrain) -> Result<f64> {
    model_residual(g.samples(), kernel.samples(), spikes.spikes(), g.grid())
}
