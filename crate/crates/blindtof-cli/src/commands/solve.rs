use blindtof::forward_model::KernelTrace;
use blindtof::pipeline::{
    amplitude_map, batch_solve, depth_map, load_tensor, save_pixel_map, save_reports, save_tensor,
    Dtype, Mode,
};

use super::{print_summary, KERNELS, REPORTS};
use crate::config::resolve;
use crate::error::{CliError, WithPath};
use crate::manifest::{ensure_dir, Manifest};
use crate::{ModeArg, SolveArgs};

/// Fraction of converged pixels below which the run counts as a failure.
const MIN_CONVERGED: f64 = 0.99;

pub fn run(args: &SolveArgs) -> Result<u8, CliError> {
    let cfg = resolve(args)?;
    let mode_kernel = match (args.mode, &args.kernel) {
        (ModeArg::Known, None) => {
            return Err(CliError::Usage("known mode requires --kernel".into()))
        }
        (ModeArg::Blind, Some(_)) => {
            return Err(CliError::Usage(
                "--kernel is only valid with --mode known".into(),
            ))
        }
        (ModeArg::Known, Some(p)) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!(
                    "kernel file {} not found",
                    p.display()
                )));
            }
            Some(p)
        }
        (ModeArg::Blind, None) => None,
    };
    let tensor = load_tensor(&args.input).at(&args.input)?;
    let mode = match mode_kernel {
        Some(p) => {
            let k = load_tensor(p).at(p)?;
            if k.height() != 1 || k.width() != 1 {
                return Err(CliError::Usage(format!(
                    "kernel file {} must hold a single 1×1 trace",
                    p.display()
                )));
            }
            if k.grid() != tensor.grid() {
                return Err(CliError::Usage(
                    "kernel and measurement grids differ".into(),
                ));
            }
            Mode::Known(KernelTrace::new(k.pixel(0, 0).to_vec(), *k.grid())?)
        }
        None => {
            if cfg.solver.kernel_support.is_none() {
                eprintln!(
                    "warning: blind mode without --kernel-support; the kernel can absorb the whole trace"
                );
            }
            Mode::Blind
        }
    };

    let reports = batch_solve(&tensor, &cfg.solver, &mode, cfg.parallelism)?;

    ensure_dir(&args.out)?;
    let mut outputs = vec![
        REPORTS.to_string(),
        KERNELS.to_string(),
        "kernels.bin".to_string(),
    ];
    save_reports(&reports, &args.out.join(REPORTS)).at(&args.out)?;
    save_tensor(
        &reports.kernel_tensor(*tensor.grid())?,
        &args.out.join(KERNELS),
        Dtype::F64,
    )
    .at(&args.out)?;
    for k in 0..cfg.solver.k {
        for (stem, map) in [
            ("depth", depth_map(&reports, k)),
            ("amplitude", amplitude_map(&reports, k)),
        ] {
            let base = format!("{stem}_k{k}");
            save_pixel_map(
                &map,
                &args.out.join(format!("{base}.csv")),
                &args.out.join(format!("{base}.json")),
            )
            .at(&args.out)?;
            outputs.extend([
                format!("{base}.csv"),
                format!("{base}.json"),
                format!("{base}.bin"),
            ]);
        }
    }

    let npix = reports.pixels().len();
    let converged = reports.pixels().iter().filter(|p| p.converged).count();
    let failed = reports.pixels().iter().filter(|p| !p.is_ok()).count();
    let fraction = reports.converged_fraction();

    let config = serde_json::json!({
        "mode": args.mode,
        "kernel": args.kernel.as_ref().map(|p| p.display().to_string()),
        "solver": cfg.solver,
        "parallelism": cfg.parallelism,
    });
    let mut m = Manifest::new("solve", config);
    m.input_with_payload(&args.input)?;
    if let Some(p) = &args.kernel {
        m.input_with_payload(p)?;
    }
    if let Some(p) = &args.config {
        m.input(p)?;
    }
    for name in &outputs {
        m.output(&args.out, name)?;
    }
    m.summary = serde_json::json!({
        "pixels": npix,
        "converged": converged,
        "failed": failed,
        "converged_fraction": fraction,
    });
    m.write(&args.out)?;
    print_summary(args.json, &m.summary, || {
        format!(
            "converged {converged}/{npix} pixels ({:.1}%), {failed} failed; outputs in {}",
            100.0 * fraction,
            args.out.display()
        )
    });
    Ok(if fraction >= MIN_CONVERGED { 0 } else { 1 })
}
