use std::fs;
use std::path::Path;

use blindtof::blind_amin::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::SolveArgs;

pub const PARALLELISM_ENV: &str = "BLINDTOF_PARALLELISM";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaArg {
    Auto,
    Value(f64),
}

pub fn parse_sigma(s: &str) -> Result<SigmaArg, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(SigmaArg::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(SigmaArg::Value(v)),
        _ => Err(format!(
            "expected `auto` or a non-negative number, got `{s}`"
        )),
    }
}

/// Contents of a `--config` file. `solver` takes the field names of
/// [`SolverConfig`]; missing fields keep their defaults and `"sigma": null`
/// means automatic estimation.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub parallelism: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Solver settings and thread count after applying flag > config file >
/// default.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub solver: SolverConfig,
    pub parallelism: usize,
}

fn default_parallelism() -> Result<usize, CliError> {
    match std::env::var(PARALLELISM_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&p| p > 0)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "{PARALLELISM_ENV} must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |p| p.get())),
    }
}

pub fn resolve(args: &SolveArgs) -> Result<Resolved, CliError> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut solver = file.solver.unwrap_or_default();
    if let Some(k) = args.k {
        solver.k = k;
    }
    match args.sigma {
        Some(SigmaArg::Auto) => solver.sigma = None,
        Some(SigmaArg::Value(v)) => solver.sigma = Some(v),
        None => {}
    }
    if let Some(j) = args.jmax {
        solver.jmax = j;
    }
    if let Some(r) = args.restarts {
        solver.max_restarts = r;
    }
    if let Some(s) = args.seed {
        solver.seed = s;
    }
    if let Some(w) = args.kernel_support {
        solver.kernel_support = Some(w);
    }
    if let Some(b) = args.band_threshold {
        solver.band_threshold = b;
    }
    solver.validate()?;
    let parallelism = match args.parallelism.or(file.parallelism) {
        Some(0) => return Err(CliError::Usage("parallelism must be at least 1".into())),
        Some(p) => p,
        None => default_parallelism()?,
    };
    Ok(Resolved {
        solver,
        parallelism,
    })
}
