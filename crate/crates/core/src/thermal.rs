//! Semi-implicit heat transfer on the active submesh.
//!
//! Units are mm, s, J and °C throughout, so conductivities are W/(mm K),
//! heat transfer coefficients W/(mm² K) and densities kg/mm³.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::fe_space::{apply_constraints, face_corners, shape, shape_grad, DofMap, FeError};
use crate::geometry::{cross, norm, Point3};
use crate::octree::{OctreeMesh, ROOT_LEN};
use crate::solver::{jacobi_pcg_distributed, CsrMatrix, HaloPlan, PcgOptions, RowLayout, SolveReport, SolverError};
use crate::status::{CellStatus, InactiveTag};
use crate::transport::Transport;

#[derive(Debug, thiserror::Error)]
pub enum ThermalError {
    #[error("material table: {0}")]
    Table(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{what} has length {got}, expected {expected}")]
    Size {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("activated volume is empty")]
    EmptyActivation,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Fe(#[from] FeError),
}

pub type Result<T> = std::result::Result<T, ThermalError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Properties {
    pub rho: f64,
    pub c: f64,
    pub k: f64,
}

impl Properties {
    pub fn capacity(&self) -> f64 {
        self.rho * self.c
    }
}

/// Piecewise-linear temperature dependent properties, clamped outside the
/// tabulated range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialTable {
    temperature: Vec<f64>,
    props: Vec<Properties>,
}

impl MaterialTable {
    pub fn new(rows: Vec<(f64, Properties)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(ThermalError::Table("no breakpoints".into()));
        }
        if rows.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(ThermalError::Table("temperatures must be strictly increasing".into()));
        }
        for (t, p) in &rows {
            if !t.is_finite() || !p.rho.is_finite() || !p.c.is_finite() || !p.k.is_finite() {
                return Err(ThermalError::Table("non-finite entry".into()));
            }
            if p.k < 0.0 {
                return Err(ThermalError::Table(format!("negative conductivity at T = {t}")));
            }
            if p.rho <= 0.0 || p.c <= 0.0 {
                return Err(ThermalError::Table(format!("non-positive heat capacity at T = {t}")));
            }
        }
        let (temperature, props) = rows.into_iter().unzip();
        Ok(MaterialTable { temperature, props })
    }

    pub fn constant(rho: f64, c: f64, k: f64) -> Result<Self> {
        Self::new(vec![(0.0, Properties { rho, c, k })])
    }

    /// Parse a CSV with header `T,rho,c,k`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| ThermalError::Table("empty file".into()))?
            .split(',')
            .map(|s| s.trim().to_ascii_lowercase())
            .collect();
        if header != ["t", "rho", "c", "k"] {
            return Err(ThermalError::Table(format!("expected header T,rho,c,k, got {}", header.join(","))));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ThermalError::Table(format!("row {}: {e}", n + 1)))?;
            if v.len() != 4 {
                return Err(ThermalError::Table(format!("row {}: expected 4 columns", n + 1)));
            }
            rows.push((v[0], Properties { rho: v[1], c: v[2], k: v[3] }));
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ThermalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&text)
    }

    pub fn eval(&self, t: f64) -> Properties {
        let ts = &self.temperature;
        let n = ts.len();
        if t <= ts[0] || n == 1 {
            return self.props[0];
        }
        if t >= ts[n - 1] {
            return self.props[n - 1];
        }
        let i = ts.partition_point(|&x| x <= t) - 1;
        let s = (t - ts[i]) / (ts[i + 1] - ts[i]);
        let (a, b) = (self.props[i], self.props[i + 1]);
        let lerp = |x: f64, y: f64| x + s * (y - x);
        Properties {
            rho: lerp(a.rho, b.rho),
            c: lerp(a.c, b.c),
            k: lerp(a.k, b.k),
        }
    }
}

/// Newton cooling `q = h (u - u_loss)` on one boundary region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRegion {
    pub h: f64,
    pub u_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub platform: LossRegion,
    pub powder: LossRegion,
    pub free_surface: LossRegion,
}

impl BoundarySpec {
    pub fn uniform(h: f64, u_loss: f64) -> Self {
        let r = LossRegion { h, u_loss };
        BoundarySpec {
            platform: r,
            powder: r,
            free_surface: r,
        }
    }

    pub fn insulated() -> Self {
        Self::uniform(0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.platform, self.powder, self.free_surface] {
            if !(r.h >= 0.0) || !r.u_loss.is_finite() {
                return Err(ThermalError::Parameter(format!("bad loss region {r:?}")));
            }
        }
        Ok(())
    }

    fn region(&self, r: Region) -> LossRegion {
        match r {
            Region::Platform => self.platform,
            Region::Powder => self.powder,
            Region::FreeSurface => self.free_surface,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Platform,
    Powder,
    FreeSurface,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldakParams {
    pub q: f64,
    pub v: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl GoldakParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.a > 0.0 && self.b > 0.0 && self.c > 0.0) || !self.v.is_finite() {
            return Err(ThermalError::Parameter(format!("bad ellipsoid source {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeatSourceSpec {
    /// Power `w` with absorption `eta`, spread evenly over the activated cells.
    UniformHav { eta: f64, w: f64 },
    Goldak(GoldakParams),
}

impl HeatSourceSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HeatSourceSpec::UniformHav { eta, w } => {
                if !(eta > 0.0 && eta <= 1.0 && w > 0.0) {
                    return Err(ThermalError::Parameter(format!("bad uniform source eta={eta} W={w}")));
                }
                Ok(())
            }
            HeatSourceSpec::Goldak(g) => g.validate(),
        }
    }
}

pub const GOLDAK_PREFACTOR: f64 = 6.0 * 1.732_050_807_568_877_2 / (std::f64::consts::PI * 1.772_453_850_905_516);

pub fn uniform_source_density(eta: f64, w: f64, v_acd: f64) -> Result<f64> {
    if !(v_acd > 0.0) {
        return Err(ThermalError::EmptyActivation);
    }
    Ok(eta * w / v_acd)
}

/// Single-ellipsoid power density with the centre at `(v t, 0, 0)`.
pub fn goldak_source(p: Point3, t: f64, g: &GoldakParams) -> f64 {
    let dx = p[0] - g.v * t;
    let e = dx * dx / (g.a * g.a) + p[1] * p[1] / (g.b * g.b) + p[2] * p[2] / (g.c * g.c);
    GOLDAK_PREFACTOR * g.q / (g.a * g.b * g.c) * (-3.0 * e).exp()
}

/// Layer printing time `V_layer / d_p`.
pub fn printing_time(layer_volume: f64, deposition_rate: f64) -> Result<f64> {
    if !(layer_volume > 0.0 && deposition_rate > 0.0) {
        return Err(ThermalError::Parameter("layer volume and deposition rate must be positive".into()));
    }
    Ok(layer_volume / deposition_rate)
}

/// Volume source of one step.
#[derive(Clone, Copy, Debug)]
pub enum SourceTerm<'a> {
    None,
    /// Density on the leaves flagged in `cells` (indexed by leaf).
    Uniform { density: f64, cells: &'a [bool] },
    /// Ellipsoid evaluated at the end of the step.
    Goldak { params: GoldakParams, time: f64 },
}

const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Reference Jacobian `J[i][j] = d x_i / d xi_j` of a trilinear cell.
fn jacobian(x: &[Point3; 8], xi: [f64; 3]) -> [[f64; 3]; 3] {
    let mut j = [[0.0; 3]; 3];
    for c in 0..8 {
        let g = shape_grad(c, xi);
        for a in 0..3 {
            for b in 0..3 {
                j[a][b] += x[c][a] * g[b];
            }
        }
    }
    j
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let d = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * d,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * d,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * d,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * d,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * d,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * d,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * d,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * d,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * d,
        ],
    ]
}

/// One 2x2x2 Gauss point of a trilinear cell, mapped to physical space.
#[derive(Clone, Copy, Debug)]
pub struct QuadPoint {
    pub x: Point3,
    /// Weight times Jacobian determinant.
    pub w: f64,
    pub n: [f64; 8],
    /// Physical shape function gradients.
    pub grad: [[f64; 3]; 8],
}

pub fn volume_points(x: &[Point3; 8]) -> [QuadPoint; 8] {
    std::array::from_fn(|g| {
        let xi = [GAUSS[g & 1], GAUSS[(g >> 1) & 1], GAUSS[g >> 2]];
        let j = jacobian(x, xi);
        let det = det3(&j);
        let inv = inv3(&j, det);
        let n: [f64; 8] = std::array::from_fn(|c| shape(c, xi));
        let grad = std::array::from_fn(|c| {
            let r = shape_grad(c, xi);
            // J^{-T} r
            std::array::from_fn(|a| inv[0][a] * r[0] + inv[1][a] * r[1] + inv[2][a] * r[2])
        });
        let mut xq = [0.0; 3];
        for c in 0..8 {
            for d in 0..3 {
                xq[d] += n[c] * x[c][d];
            }
        }
        QuadPoint { x: xq, w: det * 0.125, n, grad }
    })
}

/// Volume of a trilinear cell by 2x2x2 Gauss quadrature.
pub fn cell_volume(x: &[Point3; 8]) -> f64 {
    volume_points(x).iter().map(|q| q.w).sum()
}

/// Total volume of the flagged leaves.
pub fn flagged_volume(mesh: &OctreeMesh, cells: &[bool]) -> f64 {
    let mut s = crate::solver::ExactSum::new();
    for (i, &f) in cells.iter().enumerate() {
        if f {
            s.add(cell_volume(&mesh.leaf_corners(i)));
        }
    }
    s.value()
}

/// Element matrices of one cell before constraint condensation.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMatrices {
    pub capacity: [[f64; 8]; 8],
    pub stiffness: [[f64; 8]; 8],
    pub loss: [[f64; 8]; 8],
    pub source: [f64; 8],
    pub loss_rhs: [f64; 8],
}

/// Loss faces of an active cell: `(face, sub-rectangle, region)`, where the
/// sub-rectangle is given in the face's reference coordinates.
fn loss_faces(mesh: &OctreeMesh, status: &[CellStatus], leaf: usize) -> Vec<(usize, [f64; 4], Region)> {
    let key = mesh.leaves()[leaf];
    let a = key.anchor();
    let h = key.size();
    let mut out = Vec::new();
    for f in 0..6 {
        let d = f / 2;
        let side = f % 2;
        let on_root = if side == 0 { a[d] == 0 } else { a[d] + h == ROOT_LEN };
        if on_root {
            let r = if d == 2 && side == 0 { Region::Platform } else { Region::FreeSurface };
            out.push((f, [0.0, 1.0, 0.0, 1.0], r));
            continue;
        }
        let free: [usize; 2] = match d {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        let mut probe = a;
        probe[d] = if side == 0 { a[d] - 1 } else { a[d] + h };
        let nb = mesh.locate(probe);
        let tag = |i: usize| match status[i] {
            CellStatus::Active => None,
            CellStatus::Inactive(InactiveTag::Powder) => Some(Region::Powder),
            CellStatus::Inactive(InactiveTag::Gas) => Some(Region::FreeSurface),
        };
        if mesh.leaves()[nb].size() >= h {
            if let Some(r) = tag(nb) {
                out.push((f, [0.0, 1.0, 0.0, 1.0], r));
            }
            continue;
        }
        // Four finer neighbours.
        let half = h / 2;
        for sub in 0..4 {
            let (i, j) = (sub & 1, sub >> 1);
            let mut q = probe;
            q[free[0]] += i as u32 * half;
            q[free[1]] += j as u32 * half;
            if let Some(r) = tag(mesh.locate(q)) {
                let (i, j) = (i as f64 * 0.5, j as f64 * 0.5);
                out.push((f, [i, i + 0.5, j, j + 0.5], r));
            }
        }
    }
    out
}

/// Integrate one active cell. `u` are the resolved nodal values of `U^n`.
pub fn cell_matrices(
    mesh: &OctreeMesh,
    status: &[CellStatus],
    leaf: usize,
    u: &[f64; 8],
    material: &MaterialTable,
    bc: &BoundarySpec,
    source: &SourceTerm,
) -> CellMatrices {
    let x = mesh.leaf_corners(leaf);
    let mut m = CellMatrices {
        capacity: [[0.0; 8]; 8],
        stiffness: [[0.0; 8]; 8],
        loss: [[0.0; 8]; 8],
        source: [0.0; 8],
        loss_rhs: [0.0; 8],
    };
    let uniform = match *source {
        SourceTerm::Uniform { density, cells } if cells.get(leaf).copied().unwrap_or(false) => density,
        _ => 0.0,
    };
    for qp in volume_points(&x) {
        let (n, grads, w) = (&qp.n, &qp.grad, qp.w);
        let uq: f64 = (0..8).map(|c| n[c] * u[c]).sum();
        let p = material.eval(uq);
        let cap = p.capacity() * w;
        let kw = p.k * w;
        for a in 0..8 {
            for b in 0..8 {
                m.capacity[a][b] += cap * n[a] * n[b];
                let g = grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1] + grads[a][2] * grads[b][2];
                m.stiffness[a][b] += kw * g;
            }
        }
        let q = match *source {
            SourceTerm::None => 0.0,
            SourceTerm::Uniform { .. } => uniform,
            SourceTerm::Goldak { params, time } => goldak_source(qp.x, time, &params),
        };
        if q != 0.0 {
            for a in 0..8 {
                m.source[a] += q * n[a] * w;
            }
        }
    }

    let any_loss = [bc.platform, bc.powder, bc.free_surface].iter().any(|r| r.h > 0.0);
    if any_loss {
        for (f, rect, region) in loss_faces(mesh, status, leaf) {
            let lr = bc.region(region);
            if lr.h == 0.0 {
                continue;
            }
            let d = f / 2;
            let side = (f % 2) as f64;
            let fc = face_corners(f);
            let free: Vec<usize> = (0..3).filter(|&k| k != d).collect();
            let (ls, lt) = (rect[1] - rect[0], rect[3] - rect[2]);
            for &gs in &GAUSS {
                for &gt in &GAUSS {
                    let mut xi = [0.0; 3];
                    xi[d] = side;
                    xi[free[0]] = rect[0] + ls * gs;
                    xi[free[1]] = rect[2] + lt * gt;
                    let j = jacobian(&x, xi);
                    let ts = [j[0][free[0]], j[1][free[0]], j[2][free[0]]];
                    let tt = [j[0][free[1]], j[1][free[1]], j[2][free[1]]];
                    let w = norm(cross(ts, tt)) * ls * lt * 0.25;
                    let n: [f64; 8] = std::array::from_fn(|c| shape(c, xi));
                    for &a in &fc {
                        m.loss_rhs[a] += lr.h * lr.u_loss * n[a] * w;
                        for &b in &fc {
                            m.loss[a][b] += lr.h * n[a] * n[b] * w;
                        }
                    }
                }
            }
        }
    }
    m
}

/// Global system of one step, with the pieces kept for diagnostics.
#[derive(Clone, Debug)]
pub struct AssembledSystem {
    /// `M_C / dt + A + M_loss`.
    pub matrix: CsrMatrix,
    /// `b_f + M_C U^n / dt + b_loss`.
    pub rhs: Vec<f64>,
    /// `M_C` on the same pattern.
    pub capacity: CsrMatrix,
    /// `b_f`.
    pub source: Vec<f64>,
}

/// Sparsity pattern of the condensed system.
pub fn system_pattern(dofs: &DofMap) -> CsrMatrix {
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); dofs.num_dofs()];
    for c in 0..dofs.num_cells() {
        let t = dofs.cell_transform(c);
        for &i in &t.dofs {
            rows[i as usize].extend_from_slice(&t.dofs);
        }
    }
    for r in &mut rows {
        r.sort_unstable();
        r.dedup();
    }
    CsrMatrix::from_pattern(rows)
}

/// Everything the assembly reads besides the step data.
#[derive(Clone, Copy)]
pub struct ThermalContext<'a> {
    pub mesh: &'a OctreeMesh,
    /// Replicated leaf statuses.
    pub status: &'a [CellStatus],
    pub dofs: &'a DofMap,
    /// DOF row ownership.
    pub layout: &'a RowLayout,
    pub material: &'a MaterialTable,
    pub bc: &'a BoundarySpec,
    pub transport: &'a Transport,
}

impl ThermalContext<'_> {
    fn check(&self, u: &[f64]) -> Result<()> {
        if self.status.len() != self.mesh.len() {
            return Err(ThermalError::Size {
                what: "status",
                expected: self.mesh.len(),
                got: self.status.len(),
            });
        }
        if u.len() != self.dofs.num_dofs() {
            return Err(ThermalError::Size {
                what: "temperature field",
                expected: self.dofs.num_dofs(),
                got: u.len(),
            });
        }
        if self.layout.n() != self.dofs.num_dofs() {
            return Err(ThermalError::Size {
                what: "row layout",
                expected: self.dofs.num_dofs(),
                got: self.layout.n(),
            });
        }
        self.bc.validate()
    }
}

/// Assemble the step from `U^n` to `U^{n+1}`. Each part integrates, in
/// Morton order, every active cell that contributes to one of its rows and
/// keeps those rows only, so every entry is summed in the same order for
/// any number of parts. `U^n` values off the part arrive in one halo
/// exchange.
pub fn assemble_step(ctx: &ThermalContext, u_prev: &[f64], dt: f64, source: &SourceTerm) -> Result<AssembledSystem> {
    ctx.check(u_prev)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(ThermalError::BadTimeStep(dt));
    }
    if let SourceTerm::Uniform { cells, .. } = source {
        if cells.len() != ctx.mesh.len() {
            return Err(ThermalError::Size {
                what: "source cell flags",
                expected: ctx.mesh.len(),
                got: cells.len(),
            });
        }
    }
    let pattern = system_pattern(ctx.dofs);
    let plan = HaloPlan::new(&pattern, ctx.layout)?;
    let local_u = plan.gather(&ctx.layout.split(u_prev), ctx.transport)?;
    let parts = ctx.layout.parts();
    let inv_dt = 1.0 / dt;

    let blocks = ctx.transport.superstep(parts, |p| {
        let rows = ctx.layout.range(p);
        let (first, last) = if rows.is_empty() {
            (0, 0)
        } else {
            (pattern.row_range(rows.start).start, pattern.row_range(rows.end - 1).end)
        };
        let mut a = vec![0.0; last - first];
        let mut mc = vec![0.0; last - first];
        let mut rhs = vec![0.0; rows.len()];
        let mut bf = vec![0.0; rows.len()];
        let halo = plan.halo(p);
        let value = |d: u32| -> f64 {
            let d = d as usize;
            if rows.contains(&d) {
                local_u[p][d - rows.start]
            } else {
                let h = halo.binary_search(&(d as u32)).expect("halo covers the cell");
                local_u[p][rows.len() + h]
            }
        };
        for cell in 0..ctx.dofs.num_cells() {
            let t = ctx.dofs.cell_transform(cell);
            if !t.dofs.iter().any(|&d| rows.contains(&(d as usize))) {
                continue;
            }
            let refs = ctx.dofs.cell_nodes(cell);
            let u: [f64; 8] = std::array::from_fn(|i| match refs[i] {
                crate::fe_space::NodeRef::Dof(d) => value(d),
                crate::fe_space::NodeRef::Hanging(h) => ctx.dofs.constraints()[h as usize]
                    .masters
                    .iter()
                    .map(|&(d, w)| w * value(d))
                    .sum(),
            });
            let leaf = ctx.dofs.active_leaves()[cell];
            let cm = cell_matrices(ctx.mesh, ctx.status, leaf, &u, ctx.material, ctx.bc, source);
            let mut k = [[0.0; 8]; 8];
            let mut f = [0.0; 8];
            for i in 0..8 {
                let mut cu = 0.0;
                for j in 0..8 {
                    k[i][j] = cm.capacity[i][j] * inv_dt + cm.stiffness[i][j] + cm.loss[i][j];
                    cu += cm.capacity[i][j] * u[j];
                }
                f[i] = cm.source[i] + cu * inv_dt + cm.loss_rhs[i];
            }
            let (kc, fc) = apply_constraints(&k, &f, &t);
            let (mcc, bfc) = apply_constraints(&cm.capacity, &cm.source, &t);
            for (ai, &row) in t.dofs.iter().enumerate() {
                let row = row as usize;
                if !rows.contains(&row) {
                    continue;
                }
                rhs[row - rows.start] += fc[ai];
                bf[row - rows.start] += bfc[ai];
                for (bi, &col) in t.dofs.iter().enumerate() {
                    let pos = pattern.position(row, col).expect("pattern covers cell") - first;
                    a[pos] += kc[ai][bi];
                    mc[pos] += mcc[ai][bi];
                }
            }
        }
        (a, mc, rhs, bf)
    });

    let mut matrix = pattern.clone();
    let mut capacity = pattern;
    let mut rhs = Vec::with_capacity(u_prev.len());
    let mut src = Vec::with_capacity(u_prev.len());
    let mut offset = 0;
    for (a, mc, r, b) in blocks {
        matrix.values_mut()[offset..offset + a.len()].copy_from_slice(&a);
        capacity.values_mut()[offset..offset + mc.len()].copy_from_slice(&mc);
        offset += a.len();
        rhs.extend(r);
        src.extend(b);
    }
    Ok(AssembledSystem {
        matrix,
        rhs,
        capacity,
        source: src,
    })
}

/// Impose `u_i = g_i` by symmetric elimination: fixed rows become identity
/// rows scaled by their diagonal, fixed columns move to the right-hand side.
pub fn apply_dirichlet(sys: &mut AssembledSystem, fixed: &[(usize, f64)]) {
    let n = sys.matrix.n();
    let mut g = vec![None; n];
    for &(i, v) in fixed {
        g[i] = Some(v);
    }
    for i in 0..n {
        let range = sys.matrix.row_range(i);
        let cols: Vec<u32> = sys.matrix.cols()[range.clone()].to_vec();
        match g[i] {
            Some(gi) => {
                let vals = &mut sys.matrix.values_mut()[range];
                let mut diag = 1.0;
                for (v, &c) in vals.iter_mut().zip(&cols) {
                    if c as usize == i {
                        diag = *v;
                    } else {
                        *v = 0.0;
                    }
                }
                sys.rhs[i] = diag * gi;
            }
            None => {
                let vals = &mut sys.matrix.values_mut()[range];
                for (v, &c) in vals.iter_mut().zip(&cols) {
                    if let Some(gc) = g[c as usize] {
                        sys.rhs[i] -= *v * gc;
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Result of one time step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub values: Vec<f64>,
    pub report: SolveReport,
    pub assembly_seconds: f64,
    pub solve_seconds: f64,
}

/// Solve an assembled system with Jacobi-PCG, starting from `x0`.
pub fn solve_system(
    ctx: &ThermalContext,
    sys: &AssembledSystem,
    x0: &[f64],
    opts: &PcgOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    Ok(jacobi_pcg_distributed(&sys.matrix, ctx.layout, &sys.rhs, x0, opts, ctx.transport)?)
}

fn step(ctx: &ThermalContext, u_prev: &[f64], dt: f64, source: &SourceTerm, opts: &PcgOptions) -> Result<StepOutcome> {
    let t0 = Instant::now();
    let sys = assemble_step(ctx, u_prev, dt, source)?;
    let t1 = Instant::now();
    let (values, report) = solve_system(ctx, &sys, u_prev, opts)?;
    if !report.converged {
        return Err(SolverError::NoConvergence {
            iterations: report.iterations,
            residual: report.relative_residual,
        }
        .into());
    }
    Ok(StepOutcome {
        values,
        report,
        assembly_seconds: (t1 - t0).as_secs_f64(),
        solve_seconds: t1.elapsed().as_secs_f64(),
    })
}

/// Laser on: the absorbed power is spread over the flagged leaves.
pub fn printing_step(
    ctx: &ThermalContext,
    u_prev: &[f64],
    dt: f64,
    eta: f64,
    power: f64,
    cells: &[bool],
    opts: &PcgOptions,
) -> Result<StepOutcome> {
    let v = flagged_volume(ctx.mesh, cells);
    let density = uniform_source_density(eta, power, v)?;
    step(ctx, u_prev, dt, &SourceTerm::Uniform { density, cells }, opts)
}

/// Laser off.
pub fn cooling_step(ctx: &ThermalContext, u_prev: &[f64], dt: f64, opts: &PcgOptions) -> Result<StepOutcome> {
    step(ctx, u_prev, dt, &SourceTerm::None, opts)
}
