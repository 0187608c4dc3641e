use std::path::Path;

use blindtof::forward_model::Spike;
use blindtof::pipeline::{
    align_kernel, aligned_kernel, load_reports, load_tensor, mse, separation, ImageTensor,
    PixelReportMap,
};
use blindtof::signal_core::Grid;
use serde::Serialize;
use serde_json::Value;

use super::{emit, json_number};
use crate::error::{CliError, WithPath};
use crate::EvalArgs;

/// Per-pixel table rows are printed only up to this many pixels.
const MAX_TABLE_ROWS: usize = 16;
/// Delays are tabulated in units of 10⁻⁸ s.
const TAU_UNIT: f64 = 1e-8;

#[derive(Debug, Serialize)]
struct Row {
    x: usize,
    y: usize,
    gamma_true: Vec<f64>,
    tau_true_s: Vec<f64>,
    gamma_est: Vec<f64>,
    tau_est_s: Vec<f64>,
    mse_gamma: Value,
    mse_tau_s2: Value,
    kernel_psnr_db: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Running sums over matched returns and kernels.
#[derive(Default)]
struct Totals {
    gamma_sq: f64,
    tau_sq: f64,
    pairs: usize,
    peak_sq: f64,
    kernel_mse: f64,
    kernels: usize,
    sep_true: Vec<f64>,
    sep_est: Vec<f64>,
}

fn kernel_at(t: &ImageTensor, row: usize, col: usize) -> &[f64] {
    if t.height() == 1 && t.width() == 1 {
        t.pixel(0, 0)
    } else {
        t.pixel(row, col)
    }
}

fn load_kernels(
    path: &Option<std::path::PathBuf>,
    reports: &PixelReportMap,
) -> Result<Option<ImageTensor>, CliError> {
    let Some(p) = path else { return Ok(None) };
    let t = load_tensor(p).at(p)?;
    let broadcast = t.height() == 1 && t.width() == 1;
    if !broadcast && (t.height() != reports.height() || t.width() != reports.width()) {
        return Err(dims_error(p, t.height(), t.width(), reports));
    }
    Ok(Some(t))
}

fn dims_error(p: &Path, h: usize, w: usize, r: &PixelReportMap) -> CliError {
    CliError::Usage(format!(
        "dimension mismatch: {} is {h}×{w}, reports are {}×{}",
        p.display(),
        r.height(),
        r.width()
    ))
}

fn circ_diff(a: f64, b: f64, grid: Option<&Grid>) -> f64 {
    match grid {
        Some(g) => {
            let w = g.window();
            let d = (a - b).rem_euclid(w);
            d.min(w - d)
        }
        None => (a - b).abs(),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn psnr_from(peak_sq: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak_sq / mse).log10()
    }
}

pub fn run(args: &EvalArgs) -> Result<u8, CliError> {
    let truth = load_reports(&args.truth).at(&args.truth)?;
    let est = load_reports(&args.reports).at(&args.reports)?;
    if truth.height() != est.height() || truth.width() != est.width() {
        return Err(dims_error(&args.reports, est.height(), est.width(), &truth));
    }
    let true_k = load_kernels(&args.true_kernel, &truth)?;
    let est_k = load_kernels(&args.kernels, &truth)?;
    let grid = match (&true_k, &est_k) {
        (Some(a), Some(b)) if a.grid() != b.grid() => {
            return Err(CliError::Usage("kernel files use different grids".into()))
        }
        (Some(a), _) => Some(*a.grid()),
        (None, Some(b)) => Some(*b.grid()),
        (None, None) => None,
    };

    let mut tot = Totals::default();
    let mut rows = Vec::new();
    let (mut failed, mut order_mismatch) = (0, 0);
    for y in 0..truth.height() {
        for x in 0..truth.width() {
            let t = truth.get(y, x);
            let e = est.get(y, x);
            let mut row = Row {
                x,
                y,
                gamma_true: t.spikes.iter().map(|s| s.gamma).collect(),
                tau_true_s: t.spikes.iter().map(|s| s.tau).collect(),
                gamma_est: vec![],
                tau_est_s: vec![],
                mse_gamma: Value::Null,
                mse_tau_s2: Value::Null,
                kernel_psnr_db: Value::Null,
                error: e.error.clone(),
            };
            if !e.is_ok() {
                failed += 1;
                rows.push(row);
                continue;
            }
            let mut spikes: Vec<Spike> = e.spikes.clone();
            if let (Some(tk), Some(ek), Some(g)) = (&true_k, &est_k, grid.as_ref()) {
                let (reference, estimate) = (kernel_at(tk, y, x), kernel_at(ek, y, x));
                let kmse = if reference == estimate {
                    Some(0.0)
                } else if let Ok(al) = align_kernel(reference, estimate) {
                    spikes = spikes.iter().map(|s| al.apply(s, g)).collect();
                    spikes.sort_by(|a, b| a.tau.total_cmp(&b.tau));
                    Some(mse(reference, &aligned_kernel(estimate, &al)?)?)
                } else {
                    None
                };
                if let Some(kmse) = kmse {
                    let peak = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    tot.peak_sq += peak * peak;
                    tot.kernel_mse += kmse;
                    tot.kernels += 1;
                    row.kernel_psnr_db = json_number(psnr_from(peak * peak, kmse));
                }
            }
            row.gamma_est = spikes.iter().map(|s| s.gamma).collect();
            row.tau_est_s = spikes.iter().map(|s| s.tau).collect();
            if spikes.len() != t.spikes.len() {
                order_mismatch += 1;
            }
            let n = spikes.len().min(t.spikes.len());
            if n > 0 {
                let g2: f64 = (0..n)
                    .map(|i| (spikes[i].gamma - t.spikes[i].gamma).powi(2))
                    .sum();
                let t2: f64 = (0..n)
                    .map(|i| circ_diff(spikes[i].tau, t.spikes[i].tau, grid.as_ref()).powi(2))
                    .sum();
                tot.gamma_sq += g2;
                tot.tau_sq += t2;
                tot.pairs += n;
                row.mse_gamma = json_number(g2 / n as f64);
                row.mse_tau_s2 = json_number(t2 / n as f64);
            }
            if t.spikes.len() >= 2 && spikes.len() >= 2 {
                tot.sep_true
                    .push(separation(t.spikes[0].tau, t.spikes[1].tau));
                tot.sep_est.push(separation(spikes[0].tau, spikes[1].tau));
            }
            rows.push(row);
        }
    }

    let pairs = tot.pairs.max(1) as f64;
    let mse_gamma = (tot.pairs > 0).then(|| tot.gamma_sq / pairs);
    let mse_tau = (tot.pairs > 0).then(|| tot.tau_sq / pairs);
    let psnr = (tot.kernels > 0).then(|| {
        psnr_from(
            tot.peak_sq / tot.kernels as f64,
            tot.kernel_mse / tot.kernels as f64,
        )
    });
    let sep = mean(&tot.sep_true).zip(mean(&tot.sep_est));
    let summary = serde_json::json!({
        "pixels": rows.len(),
        "failed": failed,
        "order_mismatch": order_mismatch,
        "sample_period_s": grid.map(|g| g.sample_period()),
        "mse_gamma": mse_gamma.map_or(Value::Null, json_number),
        "mse_tau_s2": mse_tau.map_or(Value::Null, json_number),
        "kernel_psnr_db": psnr.map_or(Value::Null, json_number),
        "separation_cm": sep.map(|(t, e)| serde_json::json!({ "truth": 100.0 * t, "estimate": 100.0 * e })),
        "rows": rows,
    });
    if args.json {
        emit(&(serde_json::to_string_pretty(&summary).expect("plain json") + "\n"));
    } else {
        emit(&table(
            &rows,
            grid.as_ref(),
            mse_gamma,
            mse_tau,
            psnr,
            sep,
            failed,
        ));
    }
    Ok(0)
}

fn list(v: &[f64], unit: f64) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:.2}", x / unit)).collect();
    format!("[{}]", parts.join(","))
}

fn sci(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.2e}"),
        None => "-".into(),
    }
}

fn from_json(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) if s == "inf" => Some(f64::INFINITY),
        _ => None,
    }
}

fn psnr_cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.2}"),
        None => "-".into(),
    }
}

fn table(
    rows: &[Row],
    grid: Option<&Grid>,
    mse_gamma: Option<f64>,
    mse_tau: Option<f64>,
    psnr: Option<f64>,
    sep: Option<(f64, f64)>,
    failed: usize,
) -> String {
    let t_ps = grid.map_or("-".to_string(), |g| {
        format!("{:.2}", g.sample_period() / 1e-12)
    });
    let tau2 = TAU_UNIT * TAU_UNIT;
    let mut out = format!(
        "{:<10} {:>2} {:>8}  {:<22} {:<22} {:<22} {:<22} {:>9} {:>9} {:>9}\n",
        "pixel",
        "K",
        "T (ps)",
        "Γ",
        "τ (1e-8 s)",
        "Γ̃",
        "τ̃ (1e-8 s)",
        "MSE(Γ)",
        "MSE(τ)",
        "PSNR (dB)"
    );
    if rows.len() <= MAX_TABLE_ROWS {
        for r in rows {
            let (ge, te) = if r.error.is_some() {
                (
                    format!("failed: {}", r.error.as_deref().unwrap_or("")),
                    String::new(),
                )
            } else {
                (list(&r.gamma_est, 1.0), list(&r.tau_est_s, TAU_UNIT))
            };
            out += &format!(
                "{:<10} {:>2} {:>8}  {:<22} {:<22} {:<22} {:<22} {:>9} {:>9} {:>9}\n",
                format!("({},{})", r.x, r.y),
                r.gamma_true.len(),
                t_ps,
                list(&r.gamma_true, 1.0),
                list(&r.tau_true_s, TAU_UNIT),
                ge,
                te,
                sci(from_json(&r.mse_gamma)),
                sci(from_json(&r.mse_tau_s2).map(|v| v / tau2)),
                psnr_cell(from_json(&r.kernel_psnr_db)),
            );
        }
    }
    out += &format!(
        "{:<10} {:>2} {:>8}  {:<22} {:<22} {:<22} {:<22} {:>9} {:>9} {:>9}\n",
        format!("all ({})", rows.len()),
        "",
        t_ps,
        "",
        "",
        "",
        "",
        sci(mse_gamma),
        sci(mse_tau.map(|v| v / tau2)),
        psnr_cell(psnr),
    );
    out += "MSE(τ) in units of (1e-8 s)²\n";
    if failed > 0 {
        out += &format!("failed pixels: {failed}\n");
    }
    if let Some((t, e)) = sep {
        out += &format!(
            "separation of the first two returns: truth {:.2} cm, estimate {:.2} cm\n",
            100.0 * t,
            100.0 * e
        );
    }
    out
}
