//! The optimization loop: projection, active sampling, mode selection, PINN or
//! FEM analysis, sensitivities, design update and stopping.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use dcpinn_core::diff::Subset;
use dcpinn_core::error::Error as CoreError;
use dcpinn_core::energy::{interpolation_psi, internal_energy, mixed_energies, train_model, Collocation, EnergyLoss, evaluate_loss};
use dcpinn_core::fem::{error_metrics, load_vector, probe_value, FemSystem};
use dcpinn_core::net::{grayscale, select_mode, FieldEval, PinnModel, TrainingMode};
use dcpinn_core::problem::{GradientMode, LoadCase, Probe, Problem};
use dcpinn_core::regularization::{
    active_collocations, beta_schedule, chain_to_design, chain_to_design_adaptive, filter_adjoint, sensitivity_filter, DesignField, FilterKernel,
};
use dcpinn_core::sensitivity::{
    compliance, compliance_gradient, displacement_constraint, displacement_gradient, volume_constraint, ObjectiveState,
};
use dcpinn_core::update::{mma_update, oc_update, relax_displacement_limit, should_stop, MmaState};

use crate::config::{OutputOptions, RunConfig, SolverMode};
use crate::error::DriverResult;
use crate::library::monitor_probe;
use crate::output::{grid_values, write_density, write_history, write_pgm, write_vtk, CycleRecord, DensitySnapshot, OptHistory};

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// Stopping measure fell below the threshold.
    Converged,
    MaxCycles,
    Aborted(String),
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Converged | Outcome::MaxCycles => 0,
            Outcome::Aborted(_) => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub design: DesignField,
    pub history: OptHistory,
    pub outcome: Outcome,
    /// Governing models per load case, then the adjoint model if any (dcpinn mode).
    pub models: Vec<PinnModel>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub mode: SolverMode,
    pub verify_fem: bool,
    pub output: OutputOptions,
    /// Print one progress line per cycle to stderr.
    pub verbose: bool,
}

impl RunOptions {
    pub fn from_config(c: &RunConfig) -> RunOptions {
        RunOptions { mode: c.mode, verify_fem: c.verify_fem, output: c.output.clone(), verbose: false }
    }
}

/// Probe moved onto its nearest mesh node so PINN point values and FEM nodal values coincide.
fn snap(problem: &Problem, p: Probe) -> Probe {
    let n = problem.mesh.nearest_node(&p.point);
    Probe { point: problem.mesh.nodes[n], direction: p.direction }
}

struct Analysis {
    /// U_e⁰ per design index.
    solid: Vec<f64>,
    internal: f64,
    probe: f64,
    state: State,
}

enum State {
    Fem(Vec<f64>),
    Pinn(FieldEval),
}

struct Training {
    mode: TrainingMode,
    epochs: usize,
    updated: usize,
    total: usize,
    loss: f64,
    isolation_ok: bool,
    losses: Vec<f64>,
}

struct Loop<'a> {
    problem: &'a Problem,
    opts: &'a RunOptions,
    kernel: FilterKernel,
    volumes: Vec<f64>,
    systems: Vec<FemSystem>,
    loads: Vec<Vec<f64>>,
    adjoint_load: Option<Vec<f64>>,
    warm: Vec<Option<Vec<f64>>>,
    adjoint_warm: Option<Vec<f64>>,
    models: Vec<PinnModel>,
    adjoint_model: Option<PinnModel>,
    monitor: Probe,
    limit_probe: Option<Probe>,
    training_log: Option<csv::Writer<BufWriter<File>>>,
}

fn untouched(mode: &TrainingMode) -> Subset {
    match mode.subset() {
        Subset::Backbone => Subset::Coefficient,
        Subset::Coefficient => Subset::Backbone,
        Subset::Both => Subset::Both,
    }
}

impl<'a> Loop<'a> {
    fn psi_by_element(&self, physical: &[f64]) -> Vec<f64> {
        let mesh = &self.problem.mesh;
        let mut psi = vec![0.0; mesh.n_elements()];
        for (i, &e) in mesh.design.iter().enumerate() {
            psi[e] = interpolation_psi(physical[i], self.problem.opt.penalty, self.problem.opt.eta);
        }
        psi
    }

    fn by_design(&self, per_element: &[f64]) -> Vec<f64> {
        self.problem.mesh.design.iter().map(|&e| per_element[e]).collect()
    }

    fn fem_solve(&mut self, case: usize, psi: &[f64], probe: &Probe) -> DriverResult<Analysis> {
        let u = solve_robust(&self.systems[case], psi, &self.loads[case], self.warm[case].as_deref())?;
        self.warm[case] = Some(u.clone());
        let solid_el = self.systems[case].element_energies(&u, self.problem.mesh.n_elements());
        let solid = self.by_design(&solid_el);
        let internal = psi.iter().zip(&solid_el).map(|(p, s)| p * s).sum();
        let probe = probe_value(&self.problem.mesh, probe, &u);
        Ok(Analysis { solid, internal, probe, state: State::Fem(u) })
    }

    fn fem_adjoint(&mut self, psi: &[f64]) -> DriverResult<Vec<f64>> {
        let load = self.adjoint_load.as_ref().expect("adjoint load");
        let u = solve_robust(&self.systems[0], psi, load, self.adjoint_warm.as_deref())?;
        self.adjoint_warm = Some(u.clone());
        Ok(u)
    }

    fn train(
        model: &mut PinnModel,
        problem: &Problem,
        load: &LoadCase,
        active_elements: &[usize],
        psi: &[f64],
        mode: TrainingMode,
    ) -> DriverResult<(Training, Collocation, FieldEval)> {
        let colloc = Collocation::new(&problem.mesh, active_elements, load)?;
        let loss = EnergyLoss::new(&colloc, psi, problem.material);
        let keep = untouched(&mode);
        let frozen_before: Vec<u64> = model.params.indices(keep).iter().map(|&i| model.params.values[i].to_bits()).collect();
        let report = train_model(model, &colloc, &loss, mode, problem.opt.adam)?;
        let frozen_after: Vec<u64> = model.params.indices(keep).iter().map(|&i| model.params.values[i].to_bits()).collect();
        let prep = model.prepare(&colloc.points);
        let (value, field) = evaluate_loss(model, &prep, &loss)?;
        let t = Training {
            mode,
            epochs: report.epochs_run,
            updated: model.params.count(mode.subset()),
            total: model.params.len(),
            loss: value,
            isolation_ok: frozen_before == frozen_after,
            losses: report.losses,
        };
        Ok((t, colloc, field))
    }

    fn pinn_probe(model: &PinnModel, probe: &Probe) -> DriverResult<f64> {
        let f = model.predict(&[probe.point])?;
        Ok((0..model.dim).map(|i| probe.direction[i] * f.u[[0, i]]).sum())
    }

    fn pinn_nodal(model: &PinnModel, mesh: &dcpinn_core::mesh::Mesh) -> DriverResult<Vec<f64>> {
        let f = model.predict(&mesh.nodes)?;
        Ok(f.u.iter().copied().collect())
    }

    fn log_training(&mut self, cycle: usize, model: usize, t: &Training) -> DriverResult<()> {
        if let Some(w) = self.training_log.as_mut() {
            for (epoch, l) in t.losses.iter().enumerate() {
                w.write_record([cycle.to_string(), model.to_string(), t.mode.label().to_string(), (epoch + 1).to_string(), l.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn write_snapshot(problem: &Problem, out: &OutputOptions, physical: &[f64], cycle: usize) -> DriverResult<()> {
    let Some(dir) = &out.dir else { return Ok(()) };
    let mesh = &problem.mesh;
    let values = grid_values(mesh, physical);
    if out.snapshots {
        let snap = DensitySnapshot { counts: mesh.counts, extents: mesh.extents, cycle, values: values.clone() };
        write_density(&dir.join(format!("density_{cycle:04}.txt")), &snap)?;
        if mesh.dim == 2 {
            write_pgm(&dir.join(format!("density_{cycle:04}.pgm")), mesh.counts, &values)?;
        }
    }
    if mesh.dim == 3 {
        write_vtk(&dir.join("field.vtk"), mesh, &values)?;
    }
    Ok(())
}

/// Runs the full optimization. Failures inside the loop end the run with
/// `Outcome::Aborted` and keep the partial history and last design.
pub fn run_optimization(problem: &Problem, opts: &RunOptions) -> DriverResult<RunResult> {
    problem.validate()?;
    if problem.displacement_limit.is_some() && problem.load_cases.len() != 1 {
        return Err(crate::error::DriverError::Config("a displacement limit needs exactly one load case".into()));
    }
    let mesh = &problem.mesh;
    let opt = &problem.opt;
    let out_dir: Option<PathBuf> = opts.output.dir.clone();
    if let Some(d) = &out_dir {
        std::fs::create_dir_all(d)?;
    }
    let kernel = FilterKernel::new(mesh, problem.filter_radius_m())?;
    let volumes = vec![mesh.element_volume; mesh.n_design()];
    let mut systems = Vec::new();
    let mut loads = Vec::new();
    for lc in &problem.load_cases {
        systems.push(FemSystem::new(mesh, &problem.material, &lc.supports)?);
        loads.push(load_vector(mesh, lc)?);
    }
    let limit_probe = problem.displacement_limit.map(|d| snap(problem, d.probe));
    let adjoint_case = limit_probe.map(|p| problem.load_cases[0].adjoint(p));
    let adjoint_load = match &adjoint_case {
        Some(lc) => Some(load_vector(mesh, lc)?),
        None => None,
    };
    let dcpinn = opts.mode == SolverMode::Dcpinn;
    let mut models = Vec::new();
    let mut adjoint_model = None;
    if dcpinn {
        for (c, lc) in problem.load_cases.iter().enumerate() {
            models.push(PinnModel::for_mesh(opt.seed.wrapping_add(c as u64), mesh, &lc.supports, problem.net.clone())?);
        }
        if let Some(lc) = &adjoint_case {
            adjoint_model = Some(PinnModel::for_mesh(opt.seed.wrapping_add(1000), mesh, &lc.supports, problem.net.clone())?);
        }
    }
    let training_log = match (&out_dir, opts.output.training_log && dcpinn) {
        (Some(d), true) => {
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(d.join("training.csv"))?));
            w.write_record(["cycle", "model", "mode", "epoch", "loss"])?;
            Some(w)
        }
        _ => None,
    };
    let mut lp = Loop {
        problem,
        opts,
        kernel,
        volumes,
        systems,
        loads,
        adjoint_load,
        warm: vec![None; problem.load_cases.len()],
        adjoint_warm: None,
        models,
        adjoint_model,
        monitor: snap(problem, monitor_probe(problem)),
        limit_probe,
        training_log,
    };

    let mut rho = vec![problem.volume_fraction; mesh.n_design()];
    let mut history = OptHistory::default();
    let mut objective_state = ObjectiveState::new(problem.load_cases.len());
    let mut previous_probe: Option<f64> = None;
    let mut mma: Option<MmaState> = None;
    let mut low_gray_entry: Option<usize> = None;
    let mut last_design = DesignField::new(rho.clone(), &lp.kernel, beta_schedule(1, opt), &lp.volumes);
    let mut outcome = Outcome::MaxCycles;

    for cycle in 1..=opt.max_cycles {
        let started = Instant::now();
        let step = run_cycle(
            &mut lp,
            cycle,
            &rho,
            &mut objective_state,
            &mut previous_probe,
            &mut mma,
            &mut low_gray_entry,
            &history,
        );
        match step {
            Ok((design, mut record, next, stop)) => {
                record.wall_seconds = started.elapsed().as_secs_f64();
                if opts.verbose {
                    eprintln!(
                        "cycle {:4}  obj {:.6e}  g_v {:+.2e}  M {:.4}  beta {:5.2}  active {:.3}  {}  {:.1}s",
                        cycle,
                        record.objective,
                        record.g_v,
                        record.grayscale,
                        record.beta,
                        record.active_ratio,
                        record.modes.join(","),
                        record.wall_seconds
                    );
                }
                history.push(record);
                write_snapshot(problem, &opts.output, &design.physical, cycle)?;
                if let Some(d) = &out_dir {
                    write_history(&d.join("history.csv"), &history)?;
                    if opts.output.checkpoints {
                        for (m, model) in lp.models.iter().chain(lp.adjoint_model.iter()).enumerate() {
                            model.write_checkpoint(BufWriter::new(File::create(d.join(format!("model_{m}_{cycle:04}.bin")))?))?;
                        }
                    }
                }
                last_design = design;
                if stop {
                    outcome = Outcome::Converged;
                    break;
                }
                match next {
                    Some(r) => rho = r,
                    None => break,
                }
            }
            Err(e) => {
                outcome = Outcome::Aborted(e.to_string());
                break;
            }
        }
    }
    if let Some(d) = &out_dir {
        write_history(&d.join("history.csv"), &history)?;
    }
    let mut models = lp.models;
    models.extend(lp.adjoint_model);
    Ok(RunResult { design: last_design, history, outcome, models })
}

#[allow(clippy::too_many_arguments)]
fn run_cycle(
    lp: &mut Loop,
    cycle: usize,
    rho: &[f64],
    objective_state: &mut ObjectiveState,
    previous_probe: &mut Option<f64>,
    mma: &mut Option<MmaState>,
    low_gray_entry: &mut Option<usize>,
    history: &OptHistory,
) -> DriverResult<(DesignField, CycleRecord, Option<Vec<f64>>, bool)> {
    let problem = lp.problem;
    let mesh = &problem.mesh;
    let opt = &problem.opt;
    let n = mesh.n_design();
    let beta = beta_schedule(cycle, opt);
    let design = DesignField::new(rho.to_vec(), &lp.kernel, beta, &lp.volumes);
    let active = active_collocations(&design.physical, opt.tau, mesh)?;
    let gray = grayscale(&design.physical)?;
    if gray <= opt.gray_limit && low_gray_entry.is_none() {
        *low_gray_entry = Some(cycle);
    }
    let mode = select_mode(gray, cycle, *low_gray_entry, opt);
    let psi = lp.psi_by_element(&design.physical);

    let mut record = CycleRecord {
        cycle,
        grayscale: gray,
        beta,
        theta: design.theta,
        active_ratio: active.ratio,
        ..Default::default()
    };

    let cases = problem.load_cases.len();
    let dcpinn = lp.opts.mode == SolverMode::Dcpinn;
    let mut analyses = Vec::with_capacity(cases);
    let mut isolation = true;
    let mut gauss_for_mixed = None;
    for c in 0..cases {
        let probe = if c == 0 { lp.limit_probe.unwrap_or(lp.monitor) } else { lp.monitor };
        let a = if dcpinn {
            let (t, colloc, field) = Loop::train(&mut lp.models[c], problem, &problem.load_cases[c], &active.elements, &psi, mode)?;
            lp.log_training(cycle, c, &t)?;
            let en = internal_energy(&field, &colloc.gauss, &psi, &problem.material, mesh.n_elements())?;
            let probe_u = Loop::pinn_probe(&lp.models[c], &probe)?;
            record.modes.push(t.mode.label().to_string());
            record.epochs.push(t.epochs);
            record.params_updated += t.updated;
            record.params_total += t.total;
            record.losses.push(t.loss);
            isolation &= t.isolation_ok;
            if c == 0 {
                gauss_for_mixed = Some(colloc.gauss.clone());
            }
            Analysis { solid: lp.by_design(&en.solid), internal: en.internal, probe: probe_u, state: State::Pinn(field) }
        } else {
            record.modes.push("fem".into());
            record.epochs.push(0);
            lp.fem_solve(c, &psi, &probe)?
        };
        analyses.push(a);
    }

    let mut dfc = vec![0.0; n];
    let mut references = Vec::with_capacity(cases);
    for (c, a) in analyses.iter().enumerate() {
        let reference = objective_state.freeze(c, a.internal)?;
        references.push(reference);
        let fc = compliance(&a.solid, &design.physical, opt.penalty, opt.eta, reference);
        record.compliance.push(fc);
        for (d, g) in dfc.iter_mut().zip(compliance_gradient(&a.solid, &design.physical, opt.penalty, opt.eta, reference)) {
            *d += g;
        }
    }
    record.objective = record.compliance.iter().sum();
    let (g_v, dgv) = volume_constraint(&design.physical, &lp.volumes, problem.volume_fraction);
    record.g_v = g_v;
    record.probe = analyses[0].probe;

    let mut displacement = None;
    if let (Some(limit), Some(_)) = (problem.displacement_limit, lp.limit_probe) {
        let u_probe = analyses[0].probe;
        let prev = previous_probe.unwrap_or(u_probe);
        let ubar = relax_displacement_limit(prev, limit.limit);
        *previous_probe = Some(u_probe);
        let g_d = displacement_constraint(u_probe, ubar, references[0], n);
        let mixed = match &analyses[0].state {
            State::Fem(u) => {
                let lam = lp.fem_adjoint(&psi)?;
                lp.by_design(&lp.systems[0].element_products(&lam, u, mesh.n_elements()))
            }
            State::Pinn(field) => {
                let adj_case = problem.load_cases[0].adjoint(lp.limit_probe.unwrap());
                let model = lp.adjoint_model.as_mut().expect("adjoint model");
                let (t, _, adj_field) = Loop::train(model, problem, &adj_case, &active.elements, &psi, mode)?;
                lp.log_training(cycle, cases, &t)?;
                record.modes.push(t.mode.label().to_string());
                record.epochs.push(t.epochs);
                record.params_updated += t.updated;
                record.params_total += t.total;
                record.losses.push(t.loss);
                isolation &= t.isolation_ok;
                let gauss = gauss_for_mixed.as_ref().expect("gauss points");
                lp.by_design(&mixed_energies(field, &adj_field, gauss, &problem.material, mesh.n_elements()))
            }
        };
        let dgd = displacement_gradient(&mixed, &design.physical, opt.penalty, opt.eta, references[0]);
        record.g_d = Some(g_d);
        record.limit = Some(ubar);
        displacement = Some((g_d, dgd));
    }
    if dcpinn {
        record.isolation_ok = Some(isolation);
    }

    if dcpinn && lp.opts.verify_fem {
        let mut fem_obj = 0.0;
        for c in 0..cases {
            let probe = if c == 0 { lp.limit_probe.unwrap_or(lp.monitor) } else { lp.monitor };
            let fe = lp.fem_solve(c, &psi, &probe)?;
            fem_obj += compliance(&fe.solid, &design.physical, opt.penalty, opt.eta, references[c]);
            if c == 0 {
                let State::Fem(u_fe) = &fe.state else { unreachable!() };
                let u_pinn = Loop::pinn_nodal(&lp.models[0], mesh)?;
                let free: Vec<bool> = lp.systems[0].fixed.iter().map(|f| !f).collect();
                let m = error_metrics(&u_pinn, u_fe, &free, probe_dof(mesh, &probe));
                record.eps_dof = m.dof;
                record.eps_norm = m.norm;
            }
        }
        record.fem_objective = Some(fem_obj);
    }

    let mut objectives = history.objectives();
    objectives.push(record.objective);
    let (stop, tau) = should_stop(&objectives, opt.stop_window, opt.stop_threshold);
    record.tau_stop = tau;
    if stop || cycle == opt.max_cycles {
        return Ok((design, record, None, stop));
    }

    let to_design = |g: &[f64]| match opt.gradient {
        GradientMode::Exact => chain_to_design_adaptive(g, &design.filtered, beta, design.theta, &lp.volumes, &lp.kernel),
        GradientMode::Filtered => chain_to_design(g, &design.filtered, beta, design.theta, &lp.kernel),
    };
    let df = match opt.gradient {
        GradientMode::Exact => to_design(&dfc),
        GradientMode::Filtered => to_design(&sensitivity_filter(&dfc, rho, &lp.kernel)),
    };
    let dgv_design = filter_adjoint(&dgv, &lp.kernel);
    let next = match displacement {
        None => {
            let target = problem.volume_fraction;
            let kernel = &lp.kernel;
            let volumes = &lp.volumes;
            let constraint = |r: &[f64]| {
                let f = DesignField::new(r.to_vec(), kernel, beta, volumes);
                volume_constraint(&f.physical, volumes, target).0
            };
            oc_update(rho, &df, &dgv_design, opt.move_limit, opt.damping, &constraint)?.rho
        }
        Some((g_d, dgd)) => {
            let dgd_design = to_design(&dgd);
            let state = mma.get_or_insert_with(|| MmaState::new(rho, opt.move_limit));
            mma_update(rho, record.objective, &df, &[g_v, g_d], &[dgv_design, dgd_design], state)?
        }
    };
    Ok((design, record, Some(next), false))
}

/// Band storage limit for the direct fallback (about 160 MB).
const BANDED_LIMIT: usize = 20_000_000;

/// PCG, falling back to a banded Cholesky solve when PCG hits its iteration cap.
pub fn solve_robust(system: &FemSystem, psi: &[f64], f: &[f64], warm: Option<&[f64]>) -> DriverResult<Vec<f64>> {
    match system.solve(psi, f, warm) {
        Ok(sol) => Ok(sol.u),
        Err(e @ CoreError::NoConvergence { .. }) => match system.solve_banded(psi, f, BANDED_LIMIT)? {
            Some(u) => Ok(u),
            None => Err(e.into()),
        },
        Err(e) => Err(e.into()),
    }
}

/// `(dof, sign)` of the probe's dominant direction at its nearest node.
pub fn probe_dof(mesh: &dcpinn_core::mesh::Mesh, probe: &Probe) -> Option<(usize, f64)> {
    let node = mesh.nearest_node(&probe.point);
    let axis = (0..mesh.dim).max_by(|&a, &b| probe.direction[a].abs().total_cmp(&probe.direction[b].abs()))?;
    if probe.direction[axis] == 0.0 {
        return None;
    }
    Some((node * mesh.dim + axis, probe.direction[axis].signum()))
}

/// Design volume fraction Σ ρ̃ v / Σ v of a physical field.
pub fn volume_fraction(physical: &[f64]) -> f64 {
    physical.iter().sum::<f64>() / physical.len() as f64
}
