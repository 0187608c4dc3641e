use std::fs;
use std::sync::Arc;

use blindtof::forward_model::{
    make_kernel, simulate_tensor, KernelFamily, Scene, SimulationMode, Spike, SpikeTrain,
};
use blindtof::pipeline::{
    save_reports, save_tensor, Dtype, ImageTensor, PixelReport, PixelReportMap, SpikeRecord,
};
use blindtof::signal_core::{norm_real, Grid};
use serde::{Deserialize, Serialize};

use super::{print_summary, TENSOR, TRUE_KERNEL, TRUTH};
use crate::error::{CliError, WithPath};
use crate::manifest::{ensure_dir, Manifest};
use crate::SimulateArgs;

/// Scene file. Times are in seconds. Give either `spikes`, shared by every
/// pixel, or `pixels`, one spike list per pixel in row-major order.
/// `snr_db` absent means noiseless.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub num_samples: usize,
    pub sample_period_s: f64,
    pub kernel: KernelFamily,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "circular")]
    pub mode: SimulationMode,
    #[serde(default = "one")]
    pub height: usize,
    #[serde(default = "one")]
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spikes: Option<Vec<SpikeRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<Vec<Vec<SpikeRecord>>>,
}

fn circular() -> SimulationMode {
    SimulationMode::Circular
}

fn one() -> usize {
    1
}

fn to_train(records: &[SpikeRecord], grid: &Grid) -> blindtof::Result<SpikeTrain> {
    SpikeTrain::new(
        records
            .iter()
            .map(|r| Spike {
                gamma: r.gamma,
                tau: r.tau_s,
            })
            .collect(),
        grid,
    )
}

impl SceneFile {
    fn trains(&self, grid: &Grid) -> Result<Vec<SpikeTrain>, CliError> {
        let npix = self.height * self.width;
        if npix == 0 {
            return Err(CliError::Usage("scene must have at least one pixel".into()));
        }
        match (&self.spikes, &self.pixels) {
            (Some(s), None) => Ok(vec![to_train(s, grid)?; npix]),
            (None, Some(p)) if p.len() == npix => Ok(p
                .iter()
                .map(|s| to_train(s, grid))
                .collect::<blindtof::Result<_>>()?),
            (None, Some(p)) => Err(CliError::Usage(format!(
                "scene lists {} pixels, expected {npix}",
                p.len()
            ))),
            _ => Err(CliError::Usage(
                "scene needs exactly one of `spikes` or `pixels`".into(),
            )),
        }
    }
}

pub fn run(args: &SimulateArgs) -> Result<u8, CliError> {
    let text = fs::read_to_string(&args.scene).map_err(|e| CliError::io(&args.scene, e))?;
    let mut scene: SceneFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid scene {}: {e}", args.scene.display())))?;
    if let Some(seed) = args.seed {
        scene.seed = seed;
    }
    let grid = Grid::new(scene.num_samples, scene.sample_period_s).at(&args.scene)?;
    let kernel = make_kernel(scene.kernel.clone(), grid).at(&args.scene)?;
    let trains = scene.trains(&grid)?;
    let snr = scene.snr_db.unwrap_or(f64::INFINITY);
    let tensor = simulate_tensor(
        &Scene {
            height: scene.height,
            width: scene.width,
            pixels: trains.clone(),
        },
        &kernel,
        snr,
        scene.seed,
        scene.mode,
    )
    .at(&args.scene)?;

    ensure_dir(&args.out)?;
    let dtype: Dtype = args.dtype.into();
    save_tensor(&tensor, &args.out.join(TENSOR), dtype).at(&args.out)?;
    save_tensor(
        &ImageTensor::new(1, 1, grid, kernel.samples().to_vec())?,
        &args.out.join(TRUE_KERNEL),
        Dtype::F64,
    )
    .at(&args.out)?;
    // the truth's residual against the noisy data is the noise norm
    let clean = simulate_tensor(
        &Scene {
            height: scene.height,
            width: scene.width,
            pixels: trains.clone(),
        },
        &kernel,
        f64::INFINITY,
        scene.seed,
        scene.mode,
    )?;
    let n = grid.n_samples();
    let noise = tensor
        .data()
        .chunks(n)
        .zip(clean.data().chunks(n))
        .map(|(a, b)| {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            norm_real(&d)
        });
    let shared = Arc::new(kernel);
    let truth = trains
        .into_iter()
        .zip(noise)
        .map(|(t, residual)| PixelReport {
            spikes: t.spikes().to_vec(),
            kernel: Some(Arc::clone(&shared)),
            residual,
            converged: true,
            restarts: 0,
            iterations: 0,
            error: None,
        })
        .collect();
    save_reports(
        &PixelReportMap::new(scene.height, scene.width, truth)?,
        &args.out.join(TRUTH),
    )
    .at(&args.out)?;

    let config =
        serde_json::json!({ "scene": scene, "dtype": format!("{:?}", args.dtype).to_lowercase() });
    let mut m = Manifest::new("simulate", config);
    m.input(&args.scene)?;
    for name in [TENSOR, "tensor.bin", TRUE_KERNEL, "kernel.bin", TRUTH] {
        m.output(&args.out, name)?;
    }
    m.summary = serde_json::json!({
        "height": scene.height,
        "width": scene.width,
        "num_samples": scene.num_samples,
    });
    m.write(&args.out)?;
    print_summary(args.json, &m.summary, || {
        format!(
            "simulated {}×{} pixels × {} samples into {}",
            scene.height,
            scene.width,
            scene.num_samples,
            args.out.display()
        )
    });
    Ok(0)
}
