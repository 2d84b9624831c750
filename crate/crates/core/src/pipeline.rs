//! Simulation drivers: layer-by-layer and path-following printing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::collision::{build_hav, CollisionError, HeatAffectedVolume};
use crate::config::{ConfigError, PipelineConfig, RunMode};
use crate::domain::{DistributedMesh, DomainError};
use crate::fe_space::{build_dof_map, transfer, DofMap, FeError};
use crate::laser_path::{idle_time, parse_cli_with_warnings, CliError, DiscretePath, LaserPath, PathError};
use crate::octree::{OctreeError, OctreeMesh};
use crate::partition::{compute_weights, imbalance_stats, ImbalanceReport, PartSample, PartitionError, Quantity};
use crate::search::{transform_to_hav, RemeshStep, SearchError, SearchParams, TransformHooks, TransformOutcome};
use crate::solver::{PcgOptions, SolverError};
use crate::status::CellStatus;
use crate::thermal::{
    assemble_step, flagged_volume, solve_system, uniform_source_density, MaterialTable, SourceTerm,
    ThermalContext, ThermalError,
};
use crate::transport::{Transport, TransportMode};
use crate::vtk::{write_vtk, VtkError, VtkOptions};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scan path {path}: {source}")]
    Cli { path: String, source: CliError },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{context}: {source}")]
    Step {
        context: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Thermal(#[from] ThermalError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Fe(#[from] FeError),
    #[error(transparent)]
    Octree(#[from] OctreeError),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Vtk(#[from] VtkError),
    #[error("solver did not converge: {iterations} iterations, relative residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
}

impl PipelineError {
    fn at(self, context: String) -> Self {
        PipelineError::Step {
            context,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the input files rather than the numerics.
    pub fn is_input_error(&self) -> bool {
        match self {
            PipelineError::Config(_) | PipelineError::Cli { .. } | PipelineError::Io { .. } => true,
            PipelineError::Thermal(ThermalError::Table(_) | ThermalError::Io { .. } | ThermalError::Parameter(_)) => true,
            PipelineError::Step { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Cumulative wall time per phase, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimers {
    /// Refinement, coarsening, balance, repartition and field transfer.
    pub triangulation: f64,
    /// Intersection search, status updates and DOF renumbering.
    pub activation: f64,
    pub assembly: f64,
    pub solver: f64,
}

impl PhaseTimers {
    pub const NAMES: [&'static str; 4] = ["triangulation", "activation", "assembly", "solver"];

    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("triangulation", self.triangulation),
            ("activation", self.activation),
            ("assembly", self.assembly),
            ("solver", self.solver),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Printing,
    Cooling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepKind,
    pub layer: usize,
    /// Time at the end of the step (s).
    pub time: f64,
    pub dt: f64,
    pub cells: usize,
    pub active_cells: usize,
    pub dofs: usize,
    /// Search iterations of the preceding transform (0 for cooling).
    pub transform_iterations: usize,
    pub solver_iterations: usize,
    pub relative_residual: f64,
    pub max_temperature: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub parts: usize,
    pub steps: Vec<StepRecord>,
    pub timers: PhaseTimers,
    pub imbalance: ImbalanceReport,
    /// Raw per-part values behind `imbalance`.
    pub samples: Vec<PartSample>,
    pub peak_cells: usize,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from(
            "step,kind,layer,time,dt,cells,active_cells,dofs,transform_iterations,solver_iterations,relative_residual,max_temperature\n",
        );
        for r in &self.steps {
            let kind = match r.kind {
                StepKind::Printing => "printing",
                StepKind::Cooling => "cooling",
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{:e},{}\n",
                r.step,
                kind,
                r.layer,
                r.time,
                r.dt,
                r.cells,
                r.active_cells,
                r.dofs,
                r.transform_iterations,
                r.solver_iterations,
                r.relative_residual,
                r.max_temperature
            ));
        }
        s
    }

    pub fn timers_csv(&self) -> String {
        let mut s = String::from("phase,seconds\n");
        for (n, v) in self.timers.entries() {
            s.push_str(&format!("{n},{v}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// Write `steps.csv`, `imbalance.csv`, `timers.csv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |p: PathBuf, e: std::io::Error| PipelineError::Io {
            path: p.display().to_string(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir.to_path_buf(), e))?;
        for (name, text) in [
            ("steps.csv", self.steps_csv()),
            ("imbalance.csv", self.imbalance.to_csv()),
            ("timers.csv", self.timers_csv()),
            ("report.json", self.to_json()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| io(p.clone(), e))?;
        }
        Ok(())
    }
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub mesh: OctreeMesh,
    pub status: Vec<CellStatus>,
    pub dofs: DofMap,
    pub temperature: Vec<f64>,
}

/// Command-line overrides of the configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub parts: Option<usize>,
    pub vtk_every: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

/// Temperature field on the current active submesh.
struct FieldState {
    mesh: OctreeMesh,
    status: Vec<CellStatus>,
    dofs: DofMap,
    u: Vec<f64>,
    init: f64,
    /// Largest leaf count seen by any remesh.
    peak: usize,
}

impl FieldState {
    fn move_to(&mut self, mesh: &OctreeMesh, status: &[CellStatus]) -> std::result::Result<(), FeError> {
        let dofs = build_dof_map(mesh, status)?;
        self.u = transfer(&self.mesh, &self.dofs, &self.u, &dofs, self.init)?;
        self.mesh = mesh.clone();
        self.status = status.to_vec();
        self.dofs = dofs;
        Ok(())
    }
}

impl TransformHooks for FieldState {
    fn after_remesh(&mut self, step: &RemeshStep<'_>) -> std::result::Result<(), SearchError> {
        self.peak = self.peak.max(step.new_mesh.len());
        self.move_to(step.new_mesh, step.new_status)
            .map_err(|e| SearchError::Hook(e.to_string()))
    }
}

struct Simulation<'a> {
    cfg: &'a PipelineConfig,
    transport: Transport,
    material: MaterialTable,
    dm: DistributedMesh,
    field: FieldState,
    search: SearchParams,
    solver: PcgOptions,
    report: RunReport,
    time: f64,
    vtk_every: usize,
    out_dir: Option<PathBuf>,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a PipelineConfig, opts: &RunOptions) -> Result<Self> {
        let parts = opts.parts.unwrap_or(cfg.parts);
        if parts == 0 {
            return Err(ConfigError::Invalid("number of parts must be at least 1".into()).into());
        }
        let transport = Transport::new(if cfg.threaded {
            TransportMode::Threaded
        } else {
            TransportMode::Serial
        });
        let material = cfg.material_table()?;
        let m = &cfg.mesh;
        let mesh = OctreeMesh::uniform(m.min_level, m.min_level, m.max_level, m.geometry_map())?;
        let status = vec![CellStatus::default(); mesh.len()];
        let dofs = build_dof_map(&mesh, &status)?;
        let dm = DistributedMesh::new(mesh.clone(), status.clone(), parts, cfg.weights, &transport)?;
        let peak = mesh.len();
        Ok(Simulation {
            cfg,
            transport,
            material,
            dm,
            field: FieldState {
                mesh,
                status,
                dofs,
                u: Vec::new(),
                init: cfg.initial_temperature,
                peak,
            },
            search: SearchParams {
                max_level: m.max_level,
                search_min_level: m.search_min_level,
                weights: cfg.weights,
            },
            solver: cfg.solver,
            report: RunReport {
                parts,
                ..Default::default()
            },
            time: 0.0,
            vtk_every: opts.vtk_every.unwrap_or(cfg.vtk_every),
            out_dir: opts.out_dir.clone().or_else(|| cfg.output_dir.clone()),
        })
    }

    /// Grow the domain to the volume; returns the leaves it covers.
    fn increment(&mut self, hav: &HeatAffectedVolume) -> Result<(TransformOutcome, Vec<bool>)> {
        let outcome = transform_to_hav(&mut self.dm, hav, &self.search, &mut self.field, &self.transport)?;
        let t0 = Instant::now();
        let status = self.dm.gather_status();
        if status != self.field.status || self.dm.mesh().leaves() != self.field.mesh.leaves() {
            self.field.move_to(self.dm.mesh(), &status)?;
        }
        let mut cells = vec![false; self.dm.mesh().len()];
        for &i in &outcome.activated {
            cells[i] = true;
        }
        self.report.timers.triangulation += outcome.remesh_seconds;
        self.report.timers.activation += outcome.search_seconds + t0.elapsed().as_secs_f64();
        self.report.peak_cells = self.field.peak.max(self.dm.mesh().len());
        Ok((outcome, cells))
    }

    fn solve(&mut self, kind: StepKind, layer: usize, dt: f64, source: Option<&[bool]>, iterations: usize) -> Result<()> {
        let dofs = &self.field.dofs;
        let layout = dofs.layout(self.dm.partition());
        let ctx = ThermalContext {
            mesh: &self.field.mesh,
            status: &self.field.status,
            dofs,
            layout: &layout,
            material: &self.material,
            bc: &self.cfg.bc,
            transport: &self.transport,
        };
        let mut report = Default::default();
        if dofs.num_dofs() > 0 {
            let t0 = Instant::now();
            let term = match source {
                Some(cells) => {
                    let v = flagged_volume(ctx.mesh, cells);
                    let density = uniform_source_density(self.cfg.process.absorption, self.cfg.process.power, v)?;
                    SourceTerm::Uniform { density, cells }
                }
                None => SourceTerm::None,
            };
            let sys = assemble_step(&ctx, &self.field.u, dt, &term)?;
            let t1 = Instant::now();
            let (u, r) = solve_system(&ctx, &sys, &self.field.u, &self.solver)?;
            self.report.timers.assembly += (t1 - t0).as_secs_f64();
            self.report.timers.solver += t1.elapsed().as_secs_f64();
            if !r.converged {
                return Err(PipelineError::NoConvergence {
                    iterations: r.iterations,
                    residual: r.relative_residual,
                });
            }
            self.field.u = u;
            report = r;
        }
        self.time += dt;
        let step = self.report.steps.len() + 1;
        let active_cells = self.field.dofs.num_cells();
        self.report.steps.push(StepRecord {
            step,
            kind,
            layer,
            time: self.time,
            dt,
            cells: self.field.mesh.len(),
            active_cells,
            dofs: self.field.dofs.num_dofs(),
            transform_iterations: iterations,
            solver_iterations: report.iterations,
            relative_residual: report.relative_residual,
            max_temperature: self.field.u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        self.sample(step, &layout);
        self.maybe_vtk(step)
    }

    fn sample(&mut self, step: usize, layout: &crate::solver::RowLayout) {
        let parts = self.dm.num_parts();
        let part = self.dm.partition();
        let w = self.cfg.weights;
        let dm = &self.dm;
        let cells: Vec<f64> = (0..parts).map(|p| part.range(p).len() as f64).collect();
        let weighted: Vec<f64> = (0..parts)
            .map(|p| compute_weights(dm.owned(p), w).iter().sum::<u64>() as f64)
            .collect();
        let active: Vec<f64> = (0..parts)
            .map(|p| dm.owned(p).iter().filter(|s| s.is_active()).count() as f64)
            .collect();
        let dofs: Vec<f64> = (0..parts).map(|p| layout.range(p).len() as f64).collect();
        self.report.samples.extend([
            (step, Quantity::Cells, cells),
            (step, Quantity::WeightedCells, weighted),
            (step, Quantity::ActiveCells, active),
            (step, Quantity::Dofs, dofs),
        ]);
    }

    fn maybe_vtk(&self, step: usize) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        if self.vtk_every == 0 || step % self.vtk_every != 0 {
            return Ok(());
        }
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let opts = VtkOptions {
            include_inactive: self.cfg.vtk_inactive,
            inactive_value: self.cfg.initial_temperature,
        };
        write_vtk(
            &dir.join(format!("step_{step:05}.vtk")),
            &self.field.mesh,
            &self.field.status,
            &self.field.dofs,
            &self.field.u,
            &opts,
        )?;
        Ok(())
    }

    fn finish(mut self, started: Instant) -> Result<RunArtifacts> {
        if !self.report.samples.is_empty() {
            self.report.imbalance = imbalance_stats(&self.report.samples)?;
        }
        self.report.wall_seconds = started.elapsed().as_secs_f64();
        Ok(RunArtifacts {
            report: self.report,
            mesh: self.field.mesh,
            status: self.field.status,
            dofs: self.field.dofs,
            temperature: self.field.u,
        })
    }
}

/// Print a slab per layer: one printing and one cooling step per layer.
pub fn run_layer_by_layer(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunArtifacts> {
    let started = Instant::now();
    let mut sim = Simulation::new(cfg, opts)?;
    let m = &cfg.mesh;
    let p = &cfg.process;
    let f = cfg
        .footprint
        .unwrap_or([m.origin[0], m.origin[1], m.origin[0] + m.size, m.origin[1] + m.size]);
    for layer in 0..cfg.layers {
        let ctx = |e: PipelineError, what: &str| e.at(format!("layer {}, {what}", layer + 1));
        let top = m.origin[2] + (layer + 1) as f64 * p.layer_thickness;
        let hav = HeatAffectedVolume::from_bounds([f[0], f[1], top - p.layer_thickness], [f[2], f[3], top])
            .map_err(|e| ctx(e.into(), "slab"))?;
        let (outcome, cells) = sim.increment(&hav).map_err(|e| ctx(e, "activation"))?;
        let volume = flagged_volume(&sim.field.mesh, &cells);
        let dt = volume / p.deposition_rate;
        sim.solve(StepKind::Printing, layer + 1, dt, Some(&cells), outcome.iterations)
            .map_err(|e| ctx(e, "printing"))?;
        if p.recoat_time > 0.0 {
            sim.solve(StepKind::Cooling, layer + 1, p.recoat_time, None, 0)
                .map_err(|e| ctx(e, "cooling"))?;
        }
        log::info!("layer {} done, {} leaves, {} dofs", layer + 1, sim.field.mesh.len(), sim.field.dofs.num_dofs());
    }
    sim.finish(started)
}

/// Follow the scan path: one printing step per subsegment, a cooling step
/// for each relocation and one for the recoat after every layer.
pub fn run_path_tracking(cfg: &PipelineConfig, path: &LaserPath, opts: &RunOptions) -> Result<RunArtifacts> {
    let started = Instant::now();
    let mut sim = Simulation::new(cfg, opts)?;
    let p = &cfg.process;
    let mut dp = DiscretePath::new(p.step_length, p.scan_speed, p.relocation_speed)?;
    for (li, layer) in path.layers.iter().enumerate() {
        if layer.is_empty() {
            continue;
        }
        let top = cfg.mesh.origin[2] + layer.height;
        let mut prev_end = None;
        for (ei, entity) in layer.entities().enumerate() {
            let ctx = |e: PipelineError, what: String| e.at(format!("layer {}, entity {}, {what}", li + 1, ei + 1));
            dp.refill(&entity).map_err(|e| ctx(e.into(), "discretization".into()))?;
            if let (Some(end), Some(begin)) = (prev_end, dp.begin()) {
                let dt = idle_time(end, begin, p.relocation_speed, false, p.recoat_time);
                if dt > 0.0 {
                    sim.solve(StepKind::Cooling, li + 1, dt, None, 0)
                        .map_err(|e| ctx(e, "relocation".into()))?;
                }
            }
            for (si, sub) in dp.subsegments.clone().iter().enumerate() {
                let run = |sim: &mut Simulation| -> Result<()> {
                    let hav = build_hav(
                        [sub.p0[0], sub.p0[1], top],
                        [sub.p1[0], sub.p1[1], top],
                        p.laser_width,
                        p.layer_thickness,
                        p.hav_scale,
                    )?;
                    let (outcome, cells) = sim.increment(&hav)?;
                    sim.solve(StepKind::Printing, li + 1, sub.dt, Some(&cells), outcome.iterations)
                };
                run(&mut sim).map_err(|e| ctx(e, format!("subsegment {}", si + 1)))?;
            }
            prev_end = dp.end();
        }
        if p.recoat_time > 0.0 {
            sim.solve(StepKind::Cooling, li + 1, p.recoat_time, None, 0)
                .map_err(|e| e.at(format!("layer {}, recoat", li + 1)))?;
        }
        log::info!("layer {} done, {} leaves, {} dofs", li + 1, sim.field.mesh.len(), sim.field.dofs.num_dofs());
    }
    sim.finish(started)
}

pub fn load_path(file: &Path) -> Result<LaserPath> {
    let text = std::fs::read_to_string(file).map_err(|source| PipelineError::Io {
        path: file.display().to_string(),
        source,
    })?;
    let (path, warnings) = parse_cli_with_warnings(&text).map_err(|source| PipelineError::Cli {
        path: file.display().to_string(),
        source,
    })?;
    for w in warnings {
        log::warn!("{}:{}: {}", file.display(), w.line, w.message);
    }
    Ok(path)
}

/// Run the mode selected by the configuration.
pub fn run(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunArtifacts> {
    match cfg.mode {
        RunMode::Layer => run_layer_by_layer(cfg, opts),
        RunMode::Path => {
            let file = cfg.cli_file.as_ref().ok_or(ConfigError::Missing("path.cli_file"))?;
            let path = load_path(file)?;
            run_path_tracking(cfg, &path, opts)
        }
    }
}

impl From<SolverError> for PipelineError {
    fn from(e: SolverError) -> Self {
        PipelineError::Thermal(e.into())
    }
}
