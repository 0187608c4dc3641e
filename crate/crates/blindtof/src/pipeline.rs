//! Tensor-scale batch processing, metrics, depth conversion, light-in-flight
//! frames and file persistence.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blind_amin::{blind_solve, estimate_sigma, residual, SolverConfig, RESIDUAL_FLOOR};
use crate::forward_model::{
    interpolate_spectrum, pixel_seed, KernelTrace, MeasurementTrace, Spike, SpikeTrain,
};
use crate::prony::prony_solve;
use crate::signal_core::{dft_real, norm_real, Grid};
use crate::{Error, Result, C64};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 3e8;

pub const FORMAT_VERSION: u64 = 1;

/// `height × width` traces of `N` samples each, pixels row-major with the
/// time index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    grid: Grid,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, grid: Grid, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "tensor needs at least one pixel".into(),
            ));
        }
        let expected = height * width * grid.n_samples();
        if data.len() != expected {
            return Err(Error::LengthMismatch(data.len(), expected));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self {
            height,
            width,
            grid,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let n = self.grid.n_samples();
        let i = row * self.width + col;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn trace(&self, row: usize, col: usize) -> MeasurementTrace {
        MeasurementTrace::new(self.pixel(row, col).to_vec(), self.grid)
            .expect("validated on construction")
    }
}

#[derive(Debug, Clone)]
pub enum Mode {
    Blind,
    Known(KernelTrace),
}

/// Outcome for one pixel. Failed pixels carry no spikes, a NaN residual and
/// the error code in `error`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelReport {
    pub spikes: Vec<Spike>,
    pub kernel: Option<Arc<KernelTrace>>,
    pub residual: f64,
    pub converged: bool,
    pub restarts: usize,
    pub iterations: usize,
    pub error: Option<String>,
}

impl PixelReport {
    fn failed(e: &Error) -> Self {
        Self {
            spikes: Vec::new(),
            kernel: None,
            residual: f64::NAN,
            converged: false,
            restarts: 0,
            iterations: 0,
            error: Some(e.code().to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelReportMap {
    height: usize,
    width: usize,
    pixels: Vec<PixelReport>,
}

impl PixelReportMap {
    pub fn new(height: usize, width: usize, pixels: Vec<PixelReport>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::LengthMismatch(pixels.len(), height * width));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[PixelReport] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> &PixelReport {
        &self.pixels[row * self.width + col]
    }

    pub fn converged_fraction(&self) -> f64 {
        self.pixels.iter().filter(|p| p.converged).count() as f64 / self.pixels.len() as f64
    }

    /// Attaches per-pixel kernels from a tensor of the same dimensions.
    pub fn with_kernels(mut self, kernels: &ImageTensor) -> Result<Self> {
        if kernels.height != self.height || kernels.width != self.width {
            return Err(Error::LengthMismatch(
                kernels.height * kernels.width,
                self.pixels.len(),
            ));
        }
        for r in 0..self.height {
            for c in 0..self.width {
                let k = KernelTrace::new(kernels.pixel(r, c).to_vec(), kernels.grid)?;
                self.pixels[r * self.width + c].kernel = Some(Arc::new(k));
            }
        }
        Ok(self)
    }

    /// Per-pixel kernels stacked as a tensor; pixels without a kernel are zero.
    pub fn kernel_tensor(&self, grid: Grid) -> Result<ImageTensor> {
        let n = grid.n_samples();
        let mut data = vec![0.0; self.pixels.len() * n];
        for (p, chunk) in self.pixels.iter().zip(data.chunks_mut(n)) {
            if let Some(k) = &p.kernel {
                if k.samples().len() != n {
                    return Err(Error::LengthMismatch(k.samples().len(), n));
                }
                chunk.copy_from_slice(k.samples());
            }
        }
        ImageTensor::new(self.height, self.width, grid, data)
    }
}

fn solve_pixel(
    g: &MeasurementTrace,
    cfg: &SolverConfig,
    mode: &Mode,
    known: Option<&Arc<KernelTrace>>,
) -> Result<PixelReport> {
    match mode {
        Mode::Blind => {
            let r = blind_solve(g, cfg)?;
            Ok(PixelReport {
                spikes: r.spikes.spikes().to_vec(),
                kernel: Some(Arc::new(r.kernel)),
                residual: r.residual,
                converged: r.converged,
                restarts: r.restarts_used,
                iterations: r.iterations_used,
                error: None,
            })
        }
        Mode::Known(_) => {
            let kernel = known.expect("known mode carries a kernel");
            cfg.validate()?;
            let spikes = prony_solve(g, kernel, cfg.k, cfg.band_threshold)?;
            let res = residual(g, kernel, &spikes)?;
            let sigma = cfg
                .sigma
                .unwrap_or_else(|| estimate_sigma(g.samples()))
                .max(RESIDUAL_FLOOR * norm_real(g.samples()));
            Ok(PixelReport {
                spikes: spikes.spikes().to_vec(),
                kernel: Some(Arc::clone(kernel)),
                residual: res,
                converged: res <= sigma,
                restarts: 0,
                iterations: 0,
                error: None,
            })
        }
    }
}

/// Solves every pixel independently with seed `config.seed ⊕ (row·W + col)`,
/// so the output does not depend on `parallelism`. Individual failures are
/// recorded in the map; only a batch where every pixel fails is an error.
pub fn batch_solve(
    tensor: &ImageTensor,
    config: &SolverConfig,
    mode: &Mode,
    parallelism: usize,
) -> Result<PixelReportMap> {
    config.validate()?;
    if parallelism == 0 {
        return Err(Error::InvalidArgument(
            "parallelism must be at least 1".into(),
        ));
    }
    let known = match mode {
        Mode::Known(k) => {
            if k.grid() != tensor.grid() {
                return Err(Error::InvalidArgument(
                    "kernel grid differs from tensor grid".into(),
                ));
            }
            Some(Arc::new(k.clone()))
        }
        Mode::Blind => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let npix = tensor.height * tensor.width;
    let pixels: Vec<PixelReport> = pool.install(|| {
        (0..npix)
            .into_par_iter()
            .map(|i| {
                let cfg = SolverConfig {
                    seed: pixel_seed(config.seed, i),
                    ..config.clone()
                };
                let g = tensor.trace(i / tensor.width, i % tensor.width);
                solve_pixel(&g, &cfg, mode, known.as_ref())
                    .unwrap_or_else(|e| PixelReport::failed(&e))
            })
            .collect()
    });
    if pixels.iter().all(|p| !p.is_ok()) {
        let cause = pixels[0].error.clone().unwrap_or_default();
        return Err(Error::AllPixelsFailed(cause));
    }
    PixelReportMap::new(tensor.height, tensor.width, pixels)
}

/// Distance `c·τ/2` in meters.
pub fn delay_to_depth(tau: f64) -> f64 {
    SPEED_OF_LIGHT * tau / 2.0
}

/// Distance between two returns, `|τ_a − τ_b|·c/2`.
pub fn separation(tau_a: f64, tau_b: f64) -> f64 {
    (tau_a - tau_b).abs() * SPEED_OF_LIGHT / 2.0
}

/// Row-major `height × width` map of one scalar per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl PixelMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

pub type DepthMap = PixelMap;

fn per_pixel(reports: &PixelReportMap, k: usize, f: impl Fn(&Spike) -> f64) -> PixelMap {
    let values = reports
        .pixels
        .iter()
        .map(|p| p.spikes.get(k).map_or(f64::NAN, &f))
        .collect();
    PixelMap {
        height: reports.height,
        width: reports.width,
        k,
        values,
    }
}

/// Depth of the `k`-th return (sorted by delay); NaN where the pixel failed
/// or has fewer returns.
pub fn depth_map(reports: &PixelReportMap, k: usize) -> DepthMap {
    per_pixel(reports, k, |s| delay_to_depth(s.tau))
}

/// Amplitude `Γ_k` of the `k`-th return, NaN where unresolved.
pub fn amplitude_map(reports: &PixelReportMap, k: usize) -> PixelMap {
    per_pixel(reports, k, |s| s.gamma)
}

/// Renders `max(0, Σ_k Γ_k·φ(t − τ_k))` per pixel at each time, with the
/// pixel's own kernel evaluated by trigonometric interpolation. Pixels
/// without a kernel stay dark.
pub fn lif_frames(reports: &PixelReportMap, times: &[f64], grid: &Grid) -> Result<Vec<PixelMap>> {
    if let Some(&t) = times
        .iter()
        .find(|&&t| !(t.is_finite() && t >= 0.0 && t < grid.window()))
    {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside [0, {})",
            grid.window()
        )));
    }
    if times.is_empty() {
        return Ok(Vec::new());
    }
    let tp = grid.sample_period();
    let columns: Vec<Vec<f64>> = reports
        .pixels
        .par_iter()
        .map(|p| {
            let Some(kernel) = &p.kernel else {
                return Ok(vec![0.0; times.len()]);
            };
            let spec = dft_real(kernel.samples())?;
            Ok(times
                .iter()
                .map(|&t| {
                    let v: f64 = p
                        .spikes
                        .iter()
                        .map(|s| s.gamma * interpolate_spectrum(&spec, (t - s.tau) / tp))
                        .sum();
                    v.max(0.0)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..times.len())
        .map(|i| PixelMap {
            height: reports.height,
            width: reports.width,
            k: i,
            values: columns.iter().map(|c| c[i]).collect(),
        })
        .collect())
}

/// `(1/N)·Σ|a − b|²`.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptySignal);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(max|reference|² / mse)` without any alignment; `+∞` when the
/// two are equal.
pub fn psnr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let e = mse(reference, estimate)?;
    let peak = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(if e == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / e).log10()
    })
}

/// Gauge relating an estimated kernel to a reference:
/// `reference[n] ≈ scale·estimate(n + shift)` with `shift` in samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub shift: f64,
    pub scale: f64,
}

impl Alignment {
    /// Maps an estimated return into the reference gauge.
    pub fn apply(&self, s: &Spike, grid: &Grid) -> Spike {
        Spike {
            gamma: s.gamma / self.scale,
            tau: (s.tau + self.shift * grid.sample_period()).rem_euclid(grid.window()),
        }
    }
}

/// Shift from the integer peak of the circular cross-correlation, refined
/// by Newton steps on its trigonometric interpolant; scale by least squares
/// on the shifted estimate.
pub fn align_kernel(reference: &[f64], estimate: &[f64]) -> Result<Alignment> {
    let n = reference.len();
    if n != estimate.len() {
        return Err(Error::LengthMismatch(n, estimate.len()));
    }
    let fr = dft_real(reference)?;
    let fe = dft_real(estimate)?;
    let freq = |b: usize| crate::signal_core::centered_freq(b, n) as f64;
    let cross: Vec<C64> = fr.iter().zip(&fe).map(|(r, e)| r.conj() * e).collect();
    // c(s) = Σ_n reference[n]·estimate(n + s) and its first two derivatives
    let corr = |s: f64| -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for (b, v) in cross.iter().enumerate() {
            let w = 2.0 * PI * freq(b) / n as f64;
            let z = v * C64::from_polar(1.0, w * s);
            out.0 += z.re;
            out.1 -= w * z.im;
            out.2 -= w * w * z.re;
        }
        (out.0 / n as f64, out.1 / n as f64, out.2 / n as f64)
    };
    let coarse: Vec<f64> = crate::signal_core::idft(&cross)?
        .into_iter()
        .map(|v| v.re)
        .collect();
    let best = (0..n)
        .max_by(|&i, &j| coarse[i].abs().total_cmp(&coarse[j].abs()))
        .unwrap_or(0);
    let sign = coarse[best].signum();
    let mut s = if best > n / 2 {
        best as f64 - n as f64
    } else {
        best as f64
    };
    for _ in 0..20 {
        let (_, d1, d2) = corr(s);
        let (d1, d2) = (sign * d1, sign * d2);
        if d2 >= 0.0 {
            break;
        }
        let step = (-d1 / d2).clamp(-0.5, 0.5);
        s += step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    let shifted = shift_signal(&fe, s);
    let num: f64 = reference.iter().zip(&shifted).map(|(a, b)| a * b).sum();
    let den: f64 = shifted.iter().map(|b| b * b).sum();
    if den == 0.0 {
        return Err(Error::DegenerateKernel);
    }
    Ok(Alignment {
        shift: s,
        scale: num / den,
    })
}

/// `x(n + s)` for every `n`, from the spectrum of `x`.
fn shift_signal(spec: &[C64], s: f64) -> Vec<f64> {
    (0..spec.len())
        .map(|i| interpolate_spectrum(spec, i as f64 + s))
        .collect()
}

/// Applies an alignment to an estimated kernel.
pub fn aligned_kernel(estimate: &[f64], al: &Alignment) -> Result<Vec<f64>> {
    let spec = dft_real(estimate)?;
    Ok(shift_signal(&spec, al.shift)
        .into_iter()
        .map(|v| v * al.scale)
        .collect())
}

/// PSNR of an estimated kernel after removing the scale and shift gauge.
pub fn psnr_kernel(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference == estimate {
        return Ok(f64::INFINITY);
    }
    let al = align_kernel(reference, estimate)?;
    psnr(reference, &aligned_kernel(estimate, &al)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub version: u64,
    pub height: usize,
    pub width: usize,
    pub num_samples: usize,
    pub sample_period_s: f64,
    pub dtype: Dtype,
}

/// Payload path paired with a header path: same stem, `.bin` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

fn encode(values: impl Iterator<Item = f64>, dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => values.flat_map(f64::to_le_bytes).collect(),
        Dtype::F32 => values.flat_map(|v| (v as f32).to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    }
}

fn parse_header(text: &str) -> Result<TensorHeader> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::MalformedHeader("missing integer version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    serde_json::from_value(raw).map_err(|e| Error::MalformedHeader(e.to_string()))
}

/// Writes the JSON header to `header` and the little-endian payload next
/// to it.
pub fn save_tensor(tensor: &ImageTensor, header: &Path, dtype: Dtype) -> Result<()> {
    let h = TensorHeader {
        version: FORMAT_VERSION,
        height: tensor.height,
        width: tensor.width,
        num_samples: tensor.grid.n_samples(),
        sample_period_s: tensor.grid.sample_period(),
        dtype,
    };
    let text =
        serde_json::to_string_pretty(&h).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    fs::write(header, text + "\n")?;
    fs::write(
        payload_path(header),
        encode(tensor.data.iter().copied(), dtype),
    )?;
    Ok(())
}

pub fn load_tensor(header: &Path) -> Result<ImageTensor> {
    let h = parse_header(&fs::read_to_string(header)?)?;
    let grid = Grid::new(h.num_samples, h.sample_period_s)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if h.height == 0 || h.width == 0 {
        return Err(Error::MalformedHeader("empty pixel grid".into()));
    }
    let bytes = fs::read(payload_path(header))?;
    let expected = h.height * h.width * h.num_samples * h.dtype.width();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    ImageTensor::new(h.height, h.width, grid, decode(&bytes, h.dtype))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeRecord {
    pub tau_s: f64,
    pub gamma: f64,
}

/// One line of a reports file. `error` appears only on failed pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelRecord {
    pub x: usize,
    pub y: usize,
    pub spikes: Vec<SpikeRecord>,
    pub residual: Option<f64>,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// JSON Lines, one record per pixel in row-major order.
pub fn save_reports(reports: &PixelReportMap, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (i, p) in reports.pixels.iter().enumerate() {
        let rec = PixelRecord {
            x: i % reports.width,
            y: i / reports.width,
            spikes: p
                .spikes
                .iter()
                .map(|s| SpikeRecord {
                    tau_s: s.tau,
                    gamma: s.gamma,
                })
                .collect(),
            residual: p.residual.is_finite().then_some(p.residual),
            converged: p.converged,
            error: p.error.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a reports file in any pixel order. Every coordinate of the
/// bounding grid must appear exactly once. Kernels are not stored here;
/// attach them with [`PixelReportMap::with_kernels`].
pub fn load_reports(path: &Path) -> Result<PixelReportMap> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records: BTreeMap<(usize, usize), PixelRecord> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PixelRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec
            .spikes
            .iter()
            .any(|s| !(s.tau_s.is_finite() && s.gamma.is_finite()))
        {
            return Err(Error::MalformedRecord {
                line: i + 1,
                msg: "non-finite spike".into(),
            });
        }
        let key = (rec.y, rec.x);
        if records.insert(key, rec).is_some() {
            return Err(Error::MalformedRecord {
                line: i + 1,
                msg: format!("duplicate pixel x={} y={}", key.1, key.0),
            });
        }
    }
    let height = records.keys().map(|k| k.0 + 1).max().unwrap_or(0);
    let width = records.keys().map(|k| k.1 + 1).max().unwrap_or(0);
    if records.is_empty() || records.len() != height * width {
        return Err(Error::MalformedRecord {
            line: 0,
            msg: format!(
                "{} records do not fill a {height}×{width} grid",
                records.len()
            ),
        });
    }
    let pixels = records
        .into_values()
        .map(|r| PixelReport {
            spikes: r
                .spikes
                .iter()
                .map(|s| Spike {
                    gamma: s.gamma,
                    tau: s.tau_s,
                })
                .collect(),
            kernel: None,
            residual: r.residual.unwrap_or(f64::NAN),
            converged: r.converged,
            restarts: 0,
            iterations: 0,
            error: r.error,
        })
        .collect();
    PixelReportMap::new(height, width, pixels)
}

/// Writes the map as a CSV grid (one row per image row, `NaN` for
/// unresolved pixels) and as raw float32 with a JSON header.
pub fn save_pixel_map(map: &PixelMap, csv_path: &Path, raw_header: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(csv_path)
        .map_err(csv_io)?;
    for row in map.values.chunks(map.width) {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_io)?;
    }
    w.flush()?;
    let header = serde_json::json!({
        "version": FORMAT_VERSION,
        "height": map.height,
        "width": map.width,
        "k": map.k,
        "dtype": "f32",
    });
    fs::write(
        raw_header,
        serde_json::to_string_pretty(&header).expect("plain json") + "\n",
    )?;
    fs::write(
        payload_path(raw_header),
        encode(map.values.iter().copied(), Dtype::F32),
    )?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a CSV grid written by [`save_pixel_map`].
pub fn load_pixel_map_csv(path: &Path, k: usize) -> Result<PixelMap> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_io)?;
    let mut values = Vec::new();
    let mut width = 0;
    let mut height = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_io)?;
        let row: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::MalformedRecord {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if height > 0 && row.len() != width {
            return Err(Error::MalformedRecord {
                line: i + 1,
                msg: "ragged row".into(),
            });
        }
        width = row.len();
        height += 1;
        values.extend(row);
    }
    Ok(PixelMap {
        height,
        width,
        k,
        values,
    })
}

/// Checks that spike delays fit a grid, for callers building trains from
/// loaded records.
pub fn to_spike_train(spikes: &[Spike], grid: &Grid) -> Result<SpikeTrain> {
    SpikeTrain::new(spikes.to_vec(), grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(h: usize, w: usize, n: usize) -> ImageTensor {
        let grid = Grid::new(n, 1e-9).unwrap();
        let data = (0..h * w * n)
            .map(|i| ((i * 7919) % 1000) as f64 / 37.0 - 13.0)
            .collect();
        ImageTensor::new(h, w, grid, data).unwrap()
    }

    #[test]
    fn depth_arithmetic() {
        assert!((delay_to_depth(1e-8) - 1.5).abs() < 1e-15);
        assert_eq!(delay_to_depth(0.0), 0.0);
        assert!((separation(13.47e-12, 0.0) - 0.0020205).abs() < 1e-9);
    }

    #[test]
    fn mse_and_psnr_examples() {
        let a = vec![1.0, 0.5, -0.2, 0.0];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert!(mse(&a, &b[..3]).is_err());
    }

    #[test]
    fn kernel_alignment_recovers_gauge() {
        let n = 64;
        let f = |x: f64| (-(x - 20.0).powi(2) / 18.0).exp();
        let reference: Vec<f64> = (0..n).map(|i| f(i as f64)).collect();
        // estimate(m) = reference(m − 3.3)/(−2) so reference[n] = −2·estimate(n + 3.3)
        let estimate: Vec<f64> = (0..n).map(|i| f(i as f64 - 3.3) / -2.0).collect();
        let al = align_kernel(&reference, &estimate).unwrap();
        assert!((al.shift - 3.3).abs() < 1e-3, "{al:?}");
        assert!((al.scale + 2.0).abs() < 1e-3, "{al:?}");
        assert!(psnr_kernel(&reference, &estimate).unwrap() > 50.0);
        assert_eq!(psnr_kernel(&reference, &reference).unwrap(), f64::INFINITY);
    }

    #[test]
    fn tensor_round_trip_f64() {
        let dir = tempfile::tempdir().unwrap();
        let t = tensor(4, 4, 32);
        let p = dir.path().join("t.json");
        save_tensor(&t, &p, Dtype::F64).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);
    }

    #[test]
    fn tensor_round_trip_f32_within_ulp() {
        let dir = tempfile::tempdir().unwrap();
        let t = tensor(2, 3, 16);
        let p = dir.path().join("t.json");
        save_tensor(&t, &p, Dtype::F32).unwrap();
        let back = load_tensor(&p).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn tensor_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let t = tensor(2, 2, 8);
        let p = dir.path().join("t.json");
        save_tensor(&t, &p, Dtype::F64).unwrap();
        let bin = payload_path(&p);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::SizeMismatch { .. })));
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 2");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::VersionMismatch(2))));
        fs::write(&p, "{\"height\": 2").unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn reports_round_trip_any_order() {
        let dir = tempfile::tempdir().unwrap();
        let px = |t: f64, ok: bool| PixelReport {
            spikes: if ok {
                vec![Spike { gamma: 0.5, tau: t }]
            } else {
                vec![]
            },
            kernel: None,
            residual: if ok { 1e-3 } else { f64::NAN },
            converged: ok,
            restarts: 0,
            iterations: 0,
            error: (!ok).then(|| "too_few_roots".to_string()),
        };
        let map = PixelReportMap::new(
            2,
            2,
            vec![
                px(1e-9, true),
                px(2e-9, true),
                px(0.0, false),
                px(3.5e-9, true),
            ],
        )
        .unwrap();
        let p = dir.path().join("r.jsonl");
        save_reports(&map, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let back = load_reports(&p).unwrap();
        assert_eq!(back.height(), 2);
        for (a, b) in map.pixels().iter().zip(back.pixels()) {
            assert_eq!(a.spikes, b.spikes);
            assert_eq!(a.converged, b.converged);
            assert_eq!(a.error, b.error);
        }
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        fs::write(&p, lines.join("\n")).unwrap();
        let shuffled = load_reports(&p).unwrap();
        for (a, b) in shuffled.pixels().iter().zip(back.pixels()) {
            assert_eq!(a.spikes, b.spikes);
            assert_eq!(a.residual.to_bits(), b.residual.to_bits());
        }
    }

    #[test]
    fn depth_map_nan_for_unresolved() {
        let px = |spikes: Vec<Spike>| PixelReport {
            spikes,
            kernel: None,
            residual: 0.0,
            converged: true,
            restarts: 0,
            iterations: 0,
            error: None,
        };
        let map = PixelReportMap::new(
            1,
            2,
            vec![
                px(vec![Spike {
                    gamma: 1.0,
                    tau: 1e-8,
                }]),
                px(vec![]),
            ],
        )
        .unwrap();
        let d = depth_map(&map, 0);
        assert!((d.get(0, 0) - 1.5).abs() < 1e-15);
        assert!(d.get(0, 1).is_nan());
        assert!(depth_map(&map, 1).values.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn pixel_map_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = PixelMap {
            height: 2,
            width: 3,
            k: 0,
            values: vec![1.0, f64::NAN, 0.25, 3.0, 4.5, 1e-3],
        };
        save_pixel_map(&m, &dir.path().join("d.csv"), &dir.path().join("d.json")).unwrap();
        let back = load_pixel_map_csv(&dir.path().join("d.csv"), 0).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        for (a, b) in m.values.iter().zip(&back.values) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
        assert_eq!(fs::read(dir.path().join("d.bin")).unwrap().len(), 24);
    }

    #[test]
    fn lif_empty_and_out_of_window() {
        let grid = Grid::new(16, 1.0).unwrap();
        let map =
            PixelReportMap::new(1, 1, vec![PixelReport::failed(&Error::ZeroMoments)]).unwrap();
        assert!(lif_frames(&map, &[], &grid).unwrap().is_empty());
        assert!(lif_frames(&map, &[16.0], &grid).is_err());
        assert_eq!(
            lif_frames(&map, &[3.0], &grid).unwrap()[0].values,
            vec![0.0]
        );
    }
}
