//! TOML run configuration with strict keys.
//!
//! ```toml
//! mode = "fem"            # or "dcpinn"
//! verify_fem = false
//!
//! [problem]
//! name = "cantilever2d"
//! resolution = "desk"     # or "full"
//! nx = 48                 # optional element-count overrides
//!
//! [opt]
//! max_cycles = 50
//!
//! [net]
//! hidden_width = 360
//!
//! [output]
//! dir = "runs/cantilever"
//! ```

use std::path::{Path, PathBuf};

use dcpinn_core::problem::Problem;
use serde::Deserialize;

use crate::error::{DriverError, DriverResult};
use crate::library::{build, default_counts, Resolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMode {
    #[default]
    Dcpinn,
    Fem,
}

impl std::str::FromStr for SolverMode {
    type Err = DriverError;
    fn from_str(s: &str) -> DriverResult<SolverMode> {
        match s {
            "dcpinn" => Ok(SolverMode::Dcpinn),
            "fem" => Ok(SolverMode::Fem),
            other => Err(DriverError::Config(format!("unknown mode '{other}' (expected dcpinn or fem)"))),
        }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<String>,
    verify_fem: Option<bool>,
    problem: ProblemSection,
    #[serde(default)]
    opt: OptSection,
    #[serde(default)]
    net: NetSection,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ProblemSection {
    name: String,
    resolution: Option<String>,
    nx: Option<usize>,
    ny: Option<usize>,
    nz: Option<usize>,
    volume_fraction: Option<f64>,
    filter_radius: Option<f64>,
    displacement_limit: Option<f64>,
    youngs: Option<f64>,
    poisson: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OptSection {
    penalty: Option<f64>,
    eta: Option<f64>,
    beta_start: Option<f64>,
    beta_period: Option<usize>,
    beta_max: Option<f64>,
    tau: Option<f64>,
    gray_limit: Option<f64>,
    period: Option<usize>,
    stop_window: Option<usize>,
    stop_threshold: Option<f64>,
    max_cycles: Option<usize>,
    epochs_backbone: Option<usize>,
    epochs_coefficient: Option<usize>,
    step_size: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    move_limit: Option<f64>,
    damping: Option<f64>,
    gradient: Option<String>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct NetSection {
    fourier_features: Option<usize>,
    fourier_scale: Option<f64>,
    hidden_width: Option<usize>,
    hidden_layers: Option<usize>,
    coef_width: Option<usize>,
    residual_blocks: Option<usize>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
    snapshots: Option<bool>,
    checkpoints: Option<bool>,
    training_log: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputOptions {
    pub dir: Option<PathBuf>,
    /// Density text/PGM per cycle.
    pub snapshots: bool,
    pub checkpoints: bool,
    pub training_log: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: Problem,
    pub mode: SolverMode,
    pub verify_fem: bool,
    pub output: OutputOptions,
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn parse_config(text: &str) -> DriverResult<RunConfig> {
    let file: FileConfig = toml::from_str(text).map_err(|e| DriverError::Config(e.to_string()))?;
    let p = &file.problem;
    let resolution: Resolution = match &p.resolution {
        Some(r) => r.parse()?,
        None => Resolution::Desk,
    };
    let mut counts = default_counts(&p.name, resolution)?;
    set(&mut counts[0], p.nx);
    set(&mut counts[1], p.ny);
    set(&mut counts[2], p.nz);
    let mut problem = build(&p.name, counts)?;
    set(&mut problem.volume_fraction, p.volume_fraction);
    set(&mut problem.filter_radius, p.filter_radius);
    set(&mut problem.material.youngs, p.youngs);
    set(&mut problem.material.poisson, p.poisson);
    if let Some(limit) = p.displacement_limit {
        match problem.displacement_limit.as_mut() {
            Some(d) => d.limit = limit,
            None => return Err(DriverError::Config(format!("problem {} has no displacement probe", p.name))),
        }
    }

    let o = &file.opt;
    let opt = &mut problem.opt;
    set(&mut opt.penalty, o.penalty);
    set(&mut opt.eta, o.eta);
    set(&mut opt.beta_start, o.beta_start);
    set(&mut opt.beta_period, o.beta_period);
    set(&mut opt.beta_max, o.beta_max);
    set(&mut opt.tau, o.tau);
    set(&mut opt.gray_limit, o.gray_limit);
    set(&mut opt.period, o.period);
    set(&mut opt.stop_window, o.stop_window);
    set(&mut opt.stop_threshold, o.stop_threshold);
    set(&mut opt.max_cycles, o.max_cycles);
    set(&mut opt.epochs_backbone, o.epochs_backbone);
    set(&mut opt.epochs_coefficient, o.epochs_coefficient);
    set(&mut opt.adam.step_size, o.step_size);
    set(&mut opt.adam.beta1, o.beta1);
    set(&mut opt.adam.beta2, o.beta2);
    set(&mut opt.adam.epsilon, o.epsilon);
    set(&mut opt.move_limit, o.move_limit);
    set(&mut opt.damping, o.damping);
    if let Some(g) = &o.gradient {
        opt.gradient = g.parse().map_err(DriverError::Config)?;
    }
    set(&mut opt.seed, o.seed);

    let n = &file.net;
    let net = &mut problem.net;
    set(&mut net.fourier_features, n.fourier_features);
    set(&mut net.fourier_scale, n.fourier_scale);
    set(&mut net.hidden_width, n.hidden_width);
    set(&mut net.hidden_layers, n.hidden_layers);
    set(&mut net.coef_width, n.coef_width);
    set(&mut net.residual_blocks, n.residual_blocks);

    validate_settings(&problem)?;
    problem.validate()?;
    let mode = match &file.mode {
        Some(m) => m.parse()?,
        None => SolverMode::Dcpinn,
    };
    let output = OutputOptions {
        dir: file.output.dir.clone(),
        snapshots: file.output.snapshots.unwrap_or(true),
        checkpoints: file.output.checkpoints.unwrap_or(false),
        training_log: file.output.training_log.unwrap_or(false),
    };
    Ok(RunConfig { problem, mode, verify_fem: file.verify_fem.unwrap_or(false), output })
}

fn validate_settings(p: &Problem) -> DriverResult<()> {
    let o = &p.opt;
    let bad = |what: &str| Err(DriverError::Config(format!("invalid setting: {what}")));
    if !(o.penalty >= 1.0) {
        return bad("opt.penalty must be at least 1");
    }
    if !(o.eta > 0.0 && o.eta < 1.0) {
        return bad("opt.eta must lie in (0, 1)");
    }
    if !(o.beta_start > 0.0 && o.beta_max >= o.beta_start) || o.beta_period == 0 {
        return bad("opt.beta_start/beta_max/beta_period");
    }
    if !(o.tau >= 0.0 && o.tau < 1.0) || !(o.gray_limit > 0.0) || o.period == 0 || o.stop_window == 0 {
        return bad("opt.tau/gray_limit/period/stop_window");
    }
    if o.max_cycles == 0 {
        return bad("opt.max_cycles must be positive");
    }
    if !(o.move_limit > 0.0 && o.move_limit <= 1.0) || !(o.damping > 0.0) {
        return bad("opt.move_limit/damping");
    }
    if !(o.adam.step_size > 0.0) {
        return bad("opt.step_size must be positive");
    }
    let n = &p.net;
    if n.fourier_features == 0 || n.hidden_width == 0 || n.hidden_layers == 0 || n.coef_width == 0 {
        return bad("net widths must be positive");
    }
    let counts = p.mesh.counts;
    if (0..p.mesh.dim).any(|a| counts[a] == 0) {
        return bad("element counts must be positive");
    }
    Ok(())
}

pub fn load_config(path: &Path) -> DriverResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DriverError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
