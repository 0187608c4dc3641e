//! Synthetic scenes and measurements: kernel families, spike trains, the
//! sampled and circulant forward models, and additive white noise.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::pipeline::ImageTensor;
use crate::signal_core::{centered_freq, dft_real, idft, Grid};
use crate::{Error, Result, C64};

/// Tails below this fraction of the peak count as outside the support.
const TAIL: f64 = 1e-12;

/// Analytic kernel shapes. Times and widths are in seconds.
///
/// `raised_cosine` is `½(1+cos(π(t−c)/width))` on `|t−c| < width`, so
/// `width` is both its full width at half maximum and its half support.
/// `emg` is a unit-peak Gaussian convolved with a unit-area exponential
/// decay. `mseq_autocorr` is one period of the periodic autocorrelation of
/// a maximal-length sequence with `2^order − 1` chips, centred at `center`.
/// `bandlimited_dirichlet` is `(1/N)Σ_{|m|≤l} e^{j2πmt/(NT)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian { center: f64, fwhm: f64 },
    RaisedCosine { center: f64, width: f64 },
    Emg { center: f64, sigma: f64, decay: f64 },
    MseqAutocorr { center: f64, chip: f64, order: u32 },
    BandlimitedDirichlet { l: usize },
}

fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (8.0 * 2f64.ln()).sqrt()
}

fn tail_radius(sigma: f64) -> f64 {
    sigma * (-2.0 * TAIL.ln()).sqrt()
}

impl KernelFamily {
    fn validate(&self, grid: &Grid) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        let valid = match *self {
            KernelFamily::Gaussian { center, fwhm } => center.is_finite() && ok(fwhm),
            KernelFamily::RaisedCosine { center, width } => center.is_finite() && ok(width),
            KernelFamily::Emg {
                center,
                sigma,
                decay,
            } => center.is_finite() && ok(sigma) && ok(decay),
            KernelFamily::MseqAutocorr {
                center,
                chip,
                order,
            } => center.is_finite() && ok(chip) && (2..=30).contains(&order),
            KernelFamily::BandlimitedDirichlet { l } => 2 * l < grid.n_samples(),
        };
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "invalid kernel parameters {self:?}"
            )));
        }
        if let Some((lo, hi)) = self.support(grid) {
            if lo < 0.0 || hi >= grid.window() {
                return Err(Error::KernelNotLocalized);
            }
        }
        Ok(())
    }

    /// Closed interval outside which the kernel is negligible, or `None`
    /// for periodic families.
    pub fn support(&self, _grid: &Grid) -> Option<(f64, f64)> {
        match *self {
            KernelFamily::Gaussian { center, fwhm } => {
                let r = tail_radius(fwhm_to_sigma(fwhm));
                Some((center - r, center + r))
            }
            KernelFamily::RaisedCosine { center, width } => Some((center - width, center + width)),
            KernelFamily::Emg {
                center,
                sigma,
                decay,
            } => {
                let r = tail_radius(sigma);
                Some((center - r, center + r - decay * TAIL.ln()))
            }
            KernelFamily::MseqAutocorr {
                center,
                chip,
                order,
            } => {
                let half = 0.5 * chip * ((1u64 << order) - 1) as f64;
                Some((center - half, center + half))
            }
            KernelFamily::BandlimitedDirichlet { .. } => None,
        }
    }

    /// Value at time `t` without periodization.
    pub fn eval(&self, t: f64, grid: &Grid) -> f64 {
        match *self {
            KernelFamily::Gaussian { center, fwhm } => {
                let s = fwhm_to_sigma(fwhm);
                let x = (t - center) / s;
                (-0.5 * x * x).exp()
            }
            KernelFamily::RaisedCosine { center, width } => {
                let x = (t - center) / width;
                if x.abs() < 1.0 {
                    0.5 * (1.0 + (PI * x).cos())
                } else {
                    0.0
                }
            }
            KernelFamily::Emg {
                center,
                sigma,
                decay,
            } => emg(t - center, sigma, decay),
            KernelFamily::MseqAutocorr {
                center,
                chip,
                order,
            } => {
                let len = ((1u64 << order) - 1) as f64;
                let x = t - center;
                if x.abs() > 0.5 * chip * len {
                    0.0
                } else {
                    let tri = (1.0 - x.abs() / chip).max(0.0);
                    (1.0 + 1.0 / len) * tri - 1.0 / len
                }
            }
            KernelFamily::BandlimitedDirichlet { l } => {
                let w = grid.window();
                let s: f64 = (1..=l).map(|m| (2.0 * PI * m as f64 * t / w).cos()).sum();
                (1.0 + 2.0 * s) / grid.n_samples() as f64
            }
        }
    }

    /// Analytic time derivative.
    pub fn derivative(&self, t: f64, grid: &Grid) -> f64 {
        match *self {
            KernelFamily::Gaussian { center, fwhm } => {
                let s = fwhm_to_sigma(fwhm);
                -(t - center) / (s * s) * self.eval(t, grid)
            }
            KernelFamily::RaisedCosine { center, width } => {
                let x = (t - center) / width;
                if x.abs() < 1.0 {
                    -0.5 * PI / width * (PI * x).sin()
                } else {
                    0.0
                }
            }
            KernelFamily::Emg {
                center,
                sigma,
                decay,
            } => {
                // f' = (gaussian − f)/decay for a unit-peak gaussian convolved with a unit-area decay
                let x = t - center;
                let gauss = (-0.5 * (x / sigma).powi(2)).exp();
                (gauss - emg(x, sigma, decay)) / decay
            }
            KernelFamily::MseqAutocorr {
                center,
                chip,
                order,
            } => {
                let len = ((1u64 << order) - 1) as f64;
                let x = t - center;
                if x.abs() >= chip {
                    0.0
                } else {
                    -(1.0 + 1.0 / len) * x.signum() / chip
                }
            }
            KernelFamily::BandlimitedDirichlet { l } => {
                let w = grid.window();
                let s: f64 = (1..=l)
                    .map(|m| {
                        let k = 2.0 * PI * m as f64 / w;
                        -k * (k * t).sin()
                    })
                    .sum();
                2.0 * s / grid.n_samples() as f64
            }
        }
    }

    /// Largest `|φ'(t)|` over one window, from the analytic derivative on a
    /// fine grid.
    pub fn max_slope(&self, grid: &Grid) -> f64 {
        match *self {
            KernelFamily::Gaussian { fwhm, .. } => 1.0 / (fwhm_to_sigma(fwhm) * 1f64.exp().sqrt()),
            KernelFamily::RaisedCosine { width, .. } => 0.5 * PI / width,
            _ => {
                let steps = grid.n_samples() * 64;
                let dt = grid.window() / steps as f64;
                (0..steps)
                    .map(|i| self.derivative(i as f64 * dt, grid).abs())
                    .fold(0.0, f64::max)
            }
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, KernelFamily::BandlimitedDirichlet { .. })
    }
}

fn emg(x: f64, sigma: f64, decay: f64) -> f64 {
    let lam = 1.0 / decay;
    let a = (sigma * lam - x / sigma) / 2f64.sqrt();
    let gauss = (-0.5 * (x / sigma).powi(2)).exp();
    if a > 25.0 {
        // erfc(a)·e^{a²} ≈ 1/(a√π)·(1 − 1/(2a²)), folded into the gaussian factor
        let scaled = (1.0 - 0.5 / (a * a)) / (a * PI.sqrt());
        return sigma * (2.0 * PI).sqrt() * lam * 0.5 * gauss * scaled;
    }
    let expo = 0.5 * (sigma * lam).powi(2) - lam * x;
    sigma * (2.0 * PI).sqrt() * lam * 0.5 * expo.exp() * erfc(a)
}

/// Sampled kernel `φ[n] = φ(nT)`, optionally with its analytic family.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTrace {
    samples: Vec<f64>,
    grid: Grid,
    family: Option<KernelFamily>,
}

impl KernelTrace {
    pub fn new(samples: Vec<f64>, grid: Grid) -> Result<Self> {
        if samples.len() != grid.n_samples() {
            return Err(Error::LengthMismatch(samples.len(), grid.n_samples()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel samples"));
        }
        Ok(Self {
            samples,
            grid,
            family: None,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn family(&self) -> Option<&KernelFamily> {
        self.family.as_ref()
    }

    /// Periodized analytic evaluation `Σ_p φ(t + p·NT)`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let fam = self.family.as_ref().ok_or(Error::MissingDescriptor)?;
        if fam.is_periodic() {
            return Ok(fam.eval(t, &self.grid));
        }
        let w = self.grid.window();
        let t = t.rem_euclid(w);
        Ok((-1..=1)
            .map(|p| fam.eval(t + p as f64 * w, &self.grid))
            .sum())
    }

    /// Trigonometric interpolation of the samples at an arbitrary time,
    /// using the centred frequency window.
    pub fn interpolate(&self, t: f64) -> f64 {
        let spec = dft_real(&self.samples).expect("kernel is non-empty");
        interpolate_spectrum(&spec, t / self.grid.sample_period())
    }
}

/// Evaluates the trigonometric interpolant whose DFT is `spec` at the
/// fractional sample position `x`.
pub fn interpolate_spectrum(spec: &[C64], x: f64) -> f64 {
    let n = spec.len();
    let s: f64 = spec
        .iter()
        .enumerate()
        .map(|(b, v)| {
            let f = centered_freq(b, n) as f64;
            (v * C64::from_polar(1.0, 2.0 * PI * f * x / n as f64)).re
        })
        .sum();
    s / n as f64
}

pub fn make_kernel(family: KernelFamily, grid: Grid) -> Result<KernelTrace> {
    family.validate(&grid)?;
    let mut k = KernelTrace {
        samples: vec![0.0; grid.n_samples()],
        grid,
        family: Some(family),
    };
    let t = grid.sample_period();
    let samples = (0..grid.n_samples())
        .map(|n| k.eval(n as f64 * t))
        .collect::<Result<Vec<_>>>()?;
    k.samples = samples;
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub gamma: f64,
    pub tau: f64,
}

/// Reflectivities and delays of the scene response, sorted by delay.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    spikes: Vec<Spike>,
}

impl SpikeTrain {
    pub fn new(mut spikes: Vec<Spike>, grid: &Grid) -> Result<Self> {
        if spikes.is_empty() {
            return Err(Error::InvalidArgument(
                "spike train needs at least one spike".into(),
            ));
        }
        for s in &spikes {
            if !(s.tau.is_finite() && s.tau >= 0.0 && s.tau < grid.window()) {
                return Err(Error::InvalidArgument(format!(
                    "delay {} outside [0, {})",
                    s.tau,
                    grid.window()
                )));
            }
            if !s.gamma.is_finite() || s.gamma == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "amplitude {} must be finite and nonzero",
                    s.gamma
                )));
            }
        }
        spikes.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        Ok(Self { spikes })
    }

    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }

    pub fn len(&self) -> usize {
        self.spikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty()
    }

    pub fn taus(&self) -> Vec<f64> {
        self.spikes.iter().map(|s| s.tau).collect()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.spikes.iter().map(|s| s.gamma).collect()
    }
}

/// Measured trace `g[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTrace {
    samples: Vec<f64>,
    grid: Grid,
}

impl MeasurementTrace {
    pub fn new(samples: Vec<f64>, grid: Grid) -> Result<Self> {
        if samples.len() != grid.n_samples() {
            return Err(Error::LengthMismatch(samples.len(), grid.n_samples()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement samples"));
        }
        Ok(Self { samples, grid })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// DFT of the spike vector: bin `b` holds `Σ_k Γ_k e^{-j2πf(b)τ_k/(NT)}`
/// with `f(b)` the centred frequency of the bin.
pub fn spike_spectrum(spikes: &[Spike], grid: &Grid) -> Vec<C64> {
    let n = grid.n_samples();
    let w = grid.window();
    (0..n)
        .map(|b| {
            let f = centered_freq(b, n) as f64;
            spikes
                .iter()
                .map(|s| s.gamma * C64::from_polar(1.0, -2.0 * PI * f * s.tau / w))
                .sum()
        })
        .collect()
}

/// Periodized-sinc spike vector
/// `d[n] = (1/N) Σ_k Γ_k Σ_{l=-⌊N/2⌋}^{N-1-⌊N/2⌋} e^{j2πl(n − τ_k/T)/N}`.
///
/// For odd `N` the result is real; for even `N` only the unpaired Nyquist
/// term contributes an imaginary part, which real kernels remove.
pub fn dirichlet_spikes(spikes: &[Spike], grid: &Grid) -> Vec<C64> {
    idft(&spike_spectrum(spikes, grid)).expect("grid has at least two samples")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// `g[n] = Σ_k Γ_k φ(nT − τ_k)`, kernel periodized over the window.
    Continuous,
    /// `g = Re(φ ⊛ d)`.
    Circular,
}

pub fn simulate_trace(
    kernel: &KernelTrace,
    spikes: &SpikeTrain,
    mode: SimulationMode,
) -> Result<MeasurementTrace> {
    let grid = *kernel.grid();
    let n = grid.n_samples();
    let samples = match mode {
        SimulationMode::Continuous => {
            kernel.family().ok_or(Error::MissingDescriptor)?;
            let t = grid.sample_period();
            (0..n)
                .map(|i| {
                    spikes
                        .spikes()
                        .iter()
                        .map(|s| Ok(s.gamma * kernel.eval(i as f64 * t - s.tau)?))
                        .sum::<Result<f64>>()
                })
                .collect::<Result<Vec<_>>>()?
        }
        SimulationMode::Circular => {
            let mut spec = spike_spectrum(spikes.spikes(), &grid);
            let fk = dft_real(kernel.samples())?;
            spec.iter_mut().zip(&fk).for_each(|(s, k)| *s *= k);
            idft(&spec)?.into_iter().map(|v| v.re).collect()
        }
    };
    MeasurementTrace::new(samples, grid)
}

/// Adds white Gaussian noise scaled so that `‖g‖²/E‖noise‖²` equals the
/// requested SNR. Returns the trace and the realized noise norm.
pub fn add_noise_tracked(
    g: &MeasurementTrace,
    snr_db: f64,
    seed: u64,
) -> Result<(MeasurementTrace, f64)> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok((g.clone(), 0.0));
    }
    if !(snr_db.is_finite() && snr_db > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "snr_db must be positive, got {snr_db}"
        )));
    }
    let n = g.samples().len();
    let std =
        crate::signal_core::norm_real(g.samples()) / (n as f64).sqrt() * 10f64.powf(-snr_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect();
    let out = g.samples().iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok((
        MeasurementTrace::new(out, *g.grid())?,
        crate::signal_core::norm_real(&noise),
    ))
}

pub fn add_noise(g: &MeasurementTrace, snr_db: f64, seed: u64) -> Result<MeasurementTrace> {
    add_noise_tracked(g, snr_db, seed).map(|(t, _)| t)
}

/// Per-pixel spike trains on an `height × width` grid, row-major.
#[derive(Debug, Clone)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<SpikeTrain>,
}

pub fn pixel_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Simulates every pixel and adds noise with seed `seed ⊕ pixel_index`.
pub fn simulate_tensor(
    scene: &Scene,
    kernel: &KernelTrace,
    snr_db: f64,
    seed: u64,
    mode: SimulationMode,
) -> Result<ImageTensor> {
    if scene.pixels.len() != scene.height * scene.width {
        return Err(Error::LengthMismatch(
            scene.pixels.len(),
            scene.height * scene.width,
        ));
    }
    let traces = scene
        .pixels
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let g = simulate_trace(kernel, s, mode)?;
            Ok(add_noise(&g, snr_db, pixel_seed(seed, i))?.into_samples())
        })
        .collect::<Result<Vec<_>>>()?;
    ImageTensor::new(scene.height, scene.width, *kernel.grid(), traces.concat())
}
