use blindtof::pipeline::{lif_frames, load_reports, load_tensor, save_pixel_map};

use super::print_summary;
use crate::error::{CliError, WithPath};
use crate::manifest::{ensure_dir, Manifest};
use crate::LifArgs;

const MAX_FRAMES: usize = 1 << 20;

/// `⌈window/stride⌉` times starting at zero.
pub fn stride_times(window: f64, stride: f64) -> Result<Vec<f64>, CliError> {
    if !(stride.is_finite() && stride > 0.0) {
        return Err(CliError::Usage(format!(
            "stride must be positive, got {stride}"
        )));
    }
    let count = (window / stride).ceil();
    if count > MAX_FRAMES as f64 {
        return Err(CliError::Usage(format!(
            "stride {stride} s yields more than {MAX_FRAMES} frames"
        )));
    }
    Ok((0..count as usize).map(|i| i as f64 * stride).collect())
}

pub fn run(args: &LifArgs) -> Result<u8, CliError> {
    let kernels = load_tensor(&args.kernels).at(&args.kernels)?;
    let grid = *kernels.grid();
    let reports = load_reports(&args.reports)
        .at(&args.reports)?
        .with_kernels(&kernels)
        .at(&args.kernels)?;
    let times = match (&args.times, args.stride) {
        (Some(t), None) => t.clone(),
        (None, Some(s)) => stride_times(grid.window(), s)?,
        _ => unreachable!("clap enforces exactly one of --times and --stride"),
    };
    let frames = lif_frames(&reports, &times, &grid)?;

    ensure_dir(&args.out)?;
    let config = serde_json::json!({ "times_s": times });
    let mut m = Manifest::new("lif", config);
    m.input(&args.reports)?;
    m.input_with_payload(&args.kernels)?;
    for (i, f) in frames.iter().enumerate() {
        let base = format!("frame_{i:05}");
        save_pixel_map(
            f,
            &args.out.join(format!("{base}.csv")),
            &args.out.join(format!("{base}.json")),
        )
        .at(&args.out)?;
        for ext in ["csv", "json", "bin"] {
            m.output(&args.out, &format!("{base}.{ext}"))?;
        }
    }
    m.summary = serde_json::json!({ "frames": frames.len(), "window_s": grid.window() });
    m.write(&args.out)?;
    print_summary(args.json, &m.summary, || {
        format!("wrote {} frames to {}", frames.len(), args.out.display())
    });
    Ok(0)
}
