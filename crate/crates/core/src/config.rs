//! Run configuration: line-oriented `section.key = value` text.
//!
//! ```text
//! # comments start with '#'
//! mesh.origin = 0, 0, 0
//! mesh.size = 3.84
//! mesh.max_level = 6
//! run.mode = path
//! path.cli_file = part.cli
//! ```
//!
//! Every key is optional except `mesh.size`; unknown keys are rejected.
//! Relative file paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_z, GeometryMap, Point3};
use crate::partition::WeightFunction;
use crate::solver::PcgOptions;
use crate::thermal::{BoundarySpec, LossRegion, MaterialTable, Properties};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key '{key}'")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value for '{key}': {message}")]
    Value {
        line: usize,
        key: String,
        message: String,
    },
    #[error("missing required key '{0}'")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    /// One slab per layer: a printing step and a cooling step.
    Layer,
    /// Follow the scan path of a CLI file.
    Path,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GeometryKind {
    Box,
    /// Rotation about the vertical axis through the root centre (degrees).
    Rigid { angle_deg: f64 },
    Wiggle { amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub origin: Point3,
    pub size: f64,
    pub min_level: u8,
    pub max_level: u8,
    pub search_min_level: u8,
    pub geometry: GeometryKind,
}

impl MeshConfig {
    pub fn geometry_map(&self) -> GeometryMap {
        let extent = [self.size; 3];
        match self.geometry {
            GeometryKind::Box => GeometryMap::Box {
                origin: self.origin,
                extent,
            },
            GeometryKind::Rigid { angle_deg } => GeometryMap::Rigid {
                origin: self.origin,
                extent,
                rotation: rotation_z(angle_deg.to_radians()),
                pivot: [
                    self.origin[0] + 0.5 * self.size,
                    self.origin[1] + 0.5 * self.size,
                    self.origin[2],
                ],
            },
            GeometryKind::Wiggle { amplitude } => GeometryMap::Wiggle {
                origin: self.origin,
                extent,
                amplitude,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessConfig {
    /// Laser power (W).
    pub power: f64,
    pub absorption: f64,
    /// Scanning speed (mm/s).
    pub scan_speed: f64,
    /// Relocation speed (mm/s).
    pub relocation_speed: f64,
    /// Deposition rate (mm³/s), layer mode.
    pub deposition_rate: f64,
    /// Recoating time between layers (s).
    pub recoat_time: f64,
    pub layer_thickness: f64,
    /// Subsegment length (mm), path mode.
    pub step_length: f64,
    pub laser_width: f64,
    /// In-plane enlargement of the heat-affected volume.
    pub hav_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaterialSource {
    Table(PathBuf),
    Constant(Properties),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mesh: MeshConfig,
    pub process: ProcessConfig,
    pub material: MaterialSource,
    pub bc: BoundarySpec,
    pub initial_temperature: f64,
    pub parts: usize,
    pub weights: WeightFunction,
    pub threaded: bool,
    pub mode: RunMode,
    /// Layer mode: number of layers.
    pub layers: usize,
    /// Layer mode: printed area `[x0, y0, x1, y1]`; the whole root when absent.
    pub footprint: Option<[f64; 4]>,
    pub cli_file: Option<PathBuf>,
    pub solver: PcgOptions,
    pub output_dir: Option<PathBuf>,
    pub vtk_every: usize,
    pub vtk_inactive: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mesh: MeshConfig {
                origin: [0.0; 3],
                size: 1.0,
                min_level: 0,
                max_level: 4,
                search_min_level: 0,
                geometry: GeometryKind::Box,
            },
            process: ProcessConfig {
                power: 200.0,
                absorption: 0.5,
                scan_speed: 100.0,
                relocation_speed: 200.0,
                deposition_rate: 10.0,
                recoat_time: 10.0,
                layer_thickness: 0.0625,
                step_length: 0.96,
                laser_width: 0.48,
                hav_scale: 1.01,
            },
            material: MaterialSource::Constant(Properties {
                rho: 8.0e-6,
                c: 500.0,
                k: 0.02,
            }),
            bc: BoundarySpec::uniform(1.0e-5, 20.0),
            initial_temperature: 20.0,
            parts: 1,
            weights: WeightFunction::default(),
            threaded: false,
            mode: RunMode::Layer,
            layers: 1,
            footprint: None,
            cli_file: None,
            solver: PcgOptions::default(),
            output_dir: None,
            vtk_every: 0,
            vtk_inactive: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected 'section.key = value', got '{content}'"),
            })?;
            let key = k.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            if entries.contains_key(&key) {
                return Err(ConfigError::Duplicate { line, key });
            }
            entries.insert(key, (line, v.trim().to_string()));
        }
        let r = Reader { entries, base_dir };
        let d = PipelineConfig::default();

        let geometry = match r.string("mesh.geometry")?.as_deref() {
            None | Some("box") => GeometryKind::Box,
            Some("rigid") => GeometryKind::Rigid {
                angle_deg: r.f64("mesh.rotation_deg")?.unwrap_or(0.0),
            },
            Some("wiggle") => GeometryKind::Wiggle {
                amplitude: r.f64("mesh.wiggle_amplitude")?.unwrap_or(0.0),
            },
            Some(other) => return Err(r.bad("mesh.geometry", format!("unknown geometry '{other}'"))),
        };
        let min_level = r.u8("mesh.min_level")?.unwrap_or(d.mesh.min_level);
        let mesh = MeshConfig {
            origin: r.point("mesh.origin")?.unwrap_or(d.mesh.origin),
            size: r.f64("mesh.size")?.ok_or(ConfigError::Missing("mesh.size"))?,
            min_level,
            max_level: r.u8("mesh.max_level")?.unwrap_or(d.mesh.max_level),
            search_min_level: r.u8("mesh.search_min_level")?.unwrap_or(min_level),
            geometry,
        };
        let p = &d.process;
        let process = ProcessConfig {
            power: r.f64("process.power")?.unwrap_or(p.power),
            absorption: r.f64("process.absorption")?.unwrap_or(p.absorption),
            scan_speed: r.f64("process.scan_speed")?.unwrap_or(p.scan_speed),
            relocation_speed: r.f64("process.relocation_speed")?.unwrap_or(p.relocation_speed),
            deposition_rate: r.f64("process.deposition_rate")?.unwrap_or(p.deposition_rate),
            recoat_time: r.f64("process.recoat_time")?.unwrap_or(p.recoat_time),
            layer_thickness: r.f64("process.layer_thickness")?.unwrap_or(p.layer_thickness),
            step_length: r.f64("process.step_length")?.unwrap_or(p.step_length),
            laser_width: r.f64("process.laser_width")?.unwrap_or(p.laser_width),
            hav_scale: r.f64("process.hav_scale")?.unwrap_or(p.hav_scale),
        };
        let material = match r.path("material.table")? {
            Some(path) => {
                for k in ["material.rho", "material.c", "material.k"] {
                    if r.entries.contains_key(k) {
                        return Err(r.bad(k, "cannot be combined with material.table".into()));
                    }
                }
                MaterialSource::Table(path)
            }
            None => {
                let MaterialSource::Constant(c) = d.material else { unreachable!() };
                MaterialSource::Constant(Properties {
                    rho: r.f64("material.rho")?.unwrap_or(c.rho),
                    c: r.f64("material.c")?.unwrap_or(c.c),
                    k: r.f64("material.k")?.unwrap_or(c.k),
                })
            }
        };
        let h_all = r.f64("bc.h")?;
        let u_all = r.f64("bc.u_loss")?;
        let region = |name: &str, dflt: LossRegion| -> Result<LossRegion> {
            Ok(LossRegion {
                h: r.f64(&format!("bc.{name}.h"))?.or(h_all).unwrap_or(dflt.h),
                u_loss: r.f64(&format!("bc.{name}.u_loss"))?.or(u_all).unwrap_or(dflt.u_loss),
            })
        };
        let bc = BoundarySpec {
            platform: region("platform", d.bc.platform)?,
            powder: region("powder", d.bc.powder)?,
            free_surface: region("free_surface", d.bc.free_surface)?,
        };
        let w_active = r.u64("partition.w_active")?.unwrap_or(d.weights.w_active());
        let w_inactive = r.u64("partition.w_inactive")?.unwrap_or(d.weights.w_inactive());
        let weights = WeightFunction::new(w_active, w_inactive)
            .map_err(|e| r.bad("partition.w_active", e.to_string()))?;
        let mode = match r.string("run.mode")?.as_deref() {
            None | Some("layer") => RunMode::Layer,
            Some("path") => RunMode::Path,
            Some(other) => return Err(r.bad("run.mode", format!("expected 'layer' or 'path', got '{other}'"))),
        };
        let footprint = match r.list("run.footprint")? {
            None => None,
            Some(v) if v.len() == 4 => Some([v[0], v[1], v[2], v[3]]),
            Some(_) => return Err(r.bad("run.footprint", "expected x0, y0, x1, y1".into())),
        };
        let cfg = PipelineConfig {
            mesh,
            process,
            material,
            bc,
            initial_temperature: r.f64("initial.temperature")?.unwrap_or(d.initial_temperature),
            parts: r.usize("partition.parts")?.unwrap_or(d.parts),
            weights,
            threaded: r.bool("partition.threaded")?.unwrap_or(d.threaded),
            mode,
            layers: r.usize("run.layers")?.unwrap_or(d.layers),
            footprint,
            cli_file: r.path("path.cli_file")?,
            solver: PcgOptions {
                tol: r.f64("solver.tol")?.unwrap_or(d.solver.tol),
                max_iters: r.usize("solver.max_iters")?.unwrap_or(d.solver.max_iters),
            },
            output_dir: r.path("output.dir")?,
            vtk_every: r.usize("output.vtk_every")?.unwrap_or(d.vtk_every),
            vtk_inactive: r.bool("output.vtk_inactive")?.unwrap_or(d.vtk_inactive),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let m = &self.mesh;
        if !(m.size > 0.0 && m.size.is_finite()) || m.origin.iter().any(|v| !v.is_finite()) {
            return invalid("mesh.size must be positive and mesh.origin finite".into());
        }
        if !(m.min_level <= m.search_min_level && m.search_min_level <= m.max_level) {
            return invalid(format!(
                "need min_level <= search_min_level <= max_level, got {} / {} / {}",
                m.min_level, m.search_min_level, m.max_level
            ));
        }
        if m.max_level > crate::octree::MAX_LEVEL {
            return invalid(format!("max_level above {}", crate::octree::MAX_LEVEL));
        }
        let p = &self.process;
        let positive = [
            ("process.power", p.power),
            ("process.scan_speed", p.scan_speed),
            ("process.relocation_speed", p.relocation_speed),
            ("process.deposition_rate", p.deposition_rate),
            ("process.layer_thickness", p.layer_thickness),
            ("process.step_length", p.step_length),
            ("process.laser_width", p.laser_width),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{k} must be positive"));
            }
        }
        if !(p.absorption > 0.0 && p.absorption <= 1.0) {
            return invalid("process.absorption must lie in (0, 1]".into());
        }
        if !(p.recoat_time >= 0.0) {
            return invalid("process.recoat_time must be non-negative".into());
        }
        if !(p.hav_scale >= 1.0) {
            return invalid("process.hav_scale must be at least 1".into());
        }
        if let MaterialSource::Constant(c) = self.material {
            if !(c.rho > 0.0 && c.c > 0.0 && c.k >= 0.0) {
                return invalid("material constants must be positive".into());
            }
        }
        self.bc
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.parts == 0 {
            return invalid("partition.parts must be at least 1".into());
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iters == 0 {
            return invalid("solver.tol and solver.max_iters must be positive".into());
        }
        match self.mode {
            RunMode::Layer => {
                if self.layers == 0 {
                    return invalid("run.layers must be at least 1".into());
                }
                let top = self.layers as f64 * p.layer_thickness;
                if top > m.size * (1.0 + 1e-12) {
                    return invalid(format!("{} layers of {} mm do not fit in the root", self.layers, p.layer_thickness));
                }
                if let Some(f) = self.footprint {
                    if !(f[0] < f[2] && f[1] < f[3]) {
                        return invalid("run.footprint must satisfy x0 < x1 and y0 < y1".into());
                    }
                }
            }
            RunMode::Path => {
                if self.cli_file.is_none() {
                    return Err(ConfigError::Missing("path.cli_file"));
                }
            }
        }
        Ok(())
    }

    pub fn material_table(&self) -> std::result::Result<MaterialTable, crate::thermal::ThermalError> {
        match &self.material {
            MaterialSource::Table(p) => MaterialTable::load(p),
            MaterialSource::Constant(c) => MaterialTable::constant(c.rho, c.c, c.k),
        }
    }
}

const KEYS: &[&str] = &[
    "mesh.origin",
    "mesh.size",
    "mesh.min_level",
    "mesh.max_level",
    "mesh.search_min_level",
    "mesh.geometry",
    "mesh.rotation_deg",
    "mesh.wiggle_amplitude",
    "process.power",
    "process.absorption",
    "process.scan_speed",
    "process.relocation_speed",
    "process.deposition_rate",
    "process.recoat_time",
    "process.layer_thickness",
    "process.step_length",
    "process.laser_width",
    "process.hav_scale",
    "material.table",
    "material.rho",
    "material.c",
    "material.k",
    "bc.h",
    "bc.u_loss",
    "bc.platform.h",
    "bc.platform.u_loss",
    "bc.powder.h",
    "bc.powder.u_loss",
    "bc.free_surface.h",
    "bc.free_surface.u_loss",
    "initial.temperature",
    "partition.parts",
    "partition.w_active",
    "partition.w_inactive",
    "partition.threaded",
    "run.mode",
    "run.layers",
    "run.footprint",
    "path.cli_file",
    "solver.tol",
    "solver.max_iters",
    "output.dir",
    "output.vtk_every",
    "output.vtk_inactive",
];

struct Reader<'a> {
    entries: BTreeMap<String, (usize, String)>,
    base_dir: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, key: &str, message: String) -> ConfigError {
        let line = self.entries.get(key).map_or(0, |e| e.0);
        ConfigError::Value {
            line,
            key: key.to_string(),
            message,
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((_, v)) => v.parse::<T>().map(Some).map_err(|e| self.bad(key, e.to_string())),
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse(key)
    }

    fn u8(&self, key: &str) -> Result<Option<u8>> {
        self.parse(key)
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse(key)
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse(key)
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.parse(key)
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        Ok(self.entries.get(key).map(|(_, v)| v.clone()))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((_, v)) => v
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| self.bad(key, e.to_string())),
        }
    }

    fn point(&self, key: &str) -> Result<Option<Point3>> {
        match self.list(key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
            Some(_) => Err(self.bad(key, "expected three comma-separated numbers".into())),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.entries.get(key).map(|(_, v)| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_defaults() {
        let text = "mesh.size = 3.84\nmesh.max_level = 6 # finest\nrun.mode = path\npath.cli_file = a.cli\nbc.h = 2e-5\nbc.platform.h = 1e-3\n";
        let c = PipelineConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(c.mesh.size, 3.84);
        assert_eq!(c.mesh.max_level, 6);
        assert_eq!(c.mode, RunMode::Path);
        assert_eq!(c.cli_file, Some(PathBuf::from("/data/a.cli")));
        assert_eq!(c.bc.platform.h, 1e-3);
        assert_eq!(c.bc.powder.h, 2e-5);
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new(".");
        assert!(matches!(
            PipelineConfig::parse("mesh.size = 1\nmesh.colour = red\n", base),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(PipelineConfig::parse("mesh.size 1\n", base), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(PipelineConfig::parse("mesh.max_level = 3\n", base), Err(ConfigError::Missing("mesh.size"))));
        assert!(matches!(
            PipelineConfig::parse("mesh.size = x\n", base),
            Err(ConfigError::Value { line: 1, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("mesh.size = 1\nmesh.min_level = 3\nmesh.max_level = 2\n", base),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("mesh.size = 1\nrun.mode = path\n", base),
            Err(ConfigError::Missing("path.cli_file"))
        ));
        assert!(matches!(
            PipelineConfig::parse("mesh.size = 1\nmesh.size = 2\n", base),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }
}
