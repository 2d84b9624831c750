//! Moving ellipsoidal source on a semi-infinite solid: reference solution
//! from Green's functions, space-time gradient error, convergence study.

use serde::{Deserialize, Serialize};

use crate::fe_space::{build_dof_map, DofMap, FeError};
use crate::geometry::{GeometryMap, Point3};
use crate::octree::{OctreeError, OctreeMesh, RefinementFlag, ROOT_LEN};
use crate::solver::{PcgOptions, RowLayout};
use crate::status::CellStatus;
use crate::thermal::{
    apply_dirichlet, assemble_step, solve_system, volume_points, BoundarySpec, GoldakParams, MaterialTable,
    SourceTerm, ThermalContext, ThermalError, GOLDAK_PREFACTOR,
};
use crate::transport::Transport;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("quadrature did not reach {tol:e} on [0, {t}] after {intervals} intervals")]
    Quadrature { t: f64, tol: f64, intervals: usize },
    #[error("need at least two data points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("linear solve did not converge at t = {0}")]
    Solve(f64),
    #[error(transparent)]
    Thermal(#[from] ThermalError),
    #[error(transparent)]
    Fe(#[from] FeError),
    #[error(transparent)]
    Octree(#[from] OctreeError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub u0: f64,
    pub q: f64,
    pub v: f64,
    pub alpha: f64,
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Final time of the study.
    pub t_end: f64,
    /// Time step of the first round; halved every round.
    pub dt0: f64,
    /// Cell level away from the path in the first round.
    pub coarse_level: u8,
    /// Cell level along the path in the first round.
    pub fine_level: u8,
    /// Absolute tolerance of the time integral.
    pub quad_tol: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            u0: 20.0,
            q: 50.0,
            v: 1.0,
            alpha: 0.1,
            k: 1.0,
            a: 0.3,
            b: 0.15,
            c: 0.25,
            t_end: 0.4,
            dt0: 0.008,
            coarse_level: 3,
            fine_level: 5,
            quad_tol: 1e-8,
        }
    }
}

impl BenchmarkParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.alpha, self.k, self.a, self.b, self.c, self.t_end, self.dt0, self.quad_tol];
        if pos.iter().any(|&v| !(v > 0.0 && v.is_finite())) || !self.q.is_finite() || !self.u0.is_finite() {
            return Err(BenchError::Parameter("alpha, k, a, b, c, t_end, dt0 and quad_tol must be positive".into()));
        }
        if self.coarse_level < 1 || self.coarse_level > self.fine_level {
            return Err(BenchError::Parameter("need 1 <= coarse_level <= fine_level".into()));
        }
        Ok(())
    }

    /// Volumetric heat capacity `k / alpha`.
    pub fn rho_c(&self) -> f64 {
        self.k / self.alpha
    }

    pub fn source(&self) -> GoldakParams {
        GoldakParams {
            q: self.q,
            v: self.v,
            a: self.a,
            b: self.b,
            c: self.c,
        }
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
/// Gauss weights on the odd Kronrod nodes (1, 3, 5) and the centre.
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<const N: usize>(f: &impl Fn(f64) -> [f64; N], a: f64, b: f64) -> ([f64; N], f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = [0.0; N];
    let mut g = [0.0; N];
    for (i, &x) in GK_NODES.iter().enumerate() {
        let v = if x == 0.0 {
            f(c)
        } else {
            let (l, r) = (f(c - h * x), f(c + h * x));
            std::array::from_fn(|d| l[d] + r[d])
        };
        for d in 0..N {
            k[d] += K15_WEIGHTS[i] * v[d];
            if i % 2 == 1 {
                g[d] += G7_WEIGHTS[i / 2] * v[d];
            }
        }
    }
    let mut err: f64 = 0.0;
    for d in 0..N {
        k[d] *= h;
        g[d] *= h;
        err = err.max((k[d] - g[d]).abs());
    }
    (k, err)
}

const MAX_INTERVALS: usize = 4096;

/// Adaptive Gauss-Kronrod (7/15) quadrature of a vector integrand with an
/// absolute tolerance shared out in proportion to interval length.
pub fn integrate<const N: usize>(f: impl Fn(f64) -> [f64; N], a: f64, b: f64, tol: f64) -> Result<[f64; N]> {
    let mut total = [0.0; N];
    if b <= a {
        return Ok(total);
    }
    let len = b - a;
    let mut stack = vec![(a, b)];
    let mut intervals = 0;
    while let Some((lo, hi)) = stack.pop() {
        intervals += 1;
        if intervals > MAX_INTERVALS {
            return Err(BenchError::Quadrature { t: b, tol, intervals });
        }
        let (v, err) = gk15(&f, lo, hi);
        if err <= tol * (hi - lo) / len || hi - lo < len * 1e-12 {
            for d in 0..N {
                total[d] += v[d];
            }
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi));
            stack.push((lo, mid));
        }
    }
    Ok(total)
}

/// True when a bound on the whole time integral (value and gradient,
/// after scaling) is already below the quadrature tolerance.
fn negligible(p: Point3, t: f64, prm: &BenchmarkParams, scale: f64) -> bool {
    let s = 12.0 * prm.alpha * t;
    let (a2, b2, c2) = (prm.a * prm.a, prm.b * prm.b, prm.c * prm.c);
    let (x0, x1) = (0.0f64.min(prm.v * t), 0.0f64.max(prm.v * t));
    let dx_min = if p[0] < x0 { x0 - p[0] } else if p[0] > x1 { p[0] - x1 } else { 0.0 };
    let dx_max = (p[0] - x0).abs().max((p[0] - x1).abs());
    let e_min = dx_min * dx_min / (a2 + s) + p[1] * p[1] / (b2 + s) + p[2] * p[2] / (c2 + s);
    let factor = 1.0 + 6.0 * (dx_max / a2).max(p[1].abs() / b2).max(p[2].abs() / c2);
    let bound = scale.abs() * t * factor * (-3.0 * e_min).exp() / (prm.a * prm.b * prm.c);
    bound < prm.quad_tol
}

/// Value and gradient of the reference solution, `[u, du/dx, du/dy, du/dz]`.
pub fn green_value_gradient(p: Point3, t: f64, prm: &BenchmarkParams) -> Result<[f64; 4]> {
    if !(t >= 0.0) {
        return Err(BenchError::Parameter(format!("negative time {t}")));
    }
    let scale = GOLDAK_PREFACTOR * prm.alpha * prm.q / prm.k;
    let tol = prm.quad_tol / scale.abs().max(f64::MIN_POSITIVE);
    if negligible(p, t, prm, scale) {
        return Ok([prm.u0, 0.0, 0.0, 0.0]);
    }
    let (a2, b2, c2) = (prm.a * prm.a, prm.b * prm.b, prm.c * prm.c);
    let [x, y, z] = p;
    let integrand = |tau: f64| -> [f64; 4] {
        let s = 12.0 * prm.alpha * (t - tau);
        let (da, db, dc) = (a2 + s, b2 + s, c2 + s);
        let dx = x - prm.v * tau;
        let e = dx * dx / da + y * y / db + z * z / dc;
        let g = (-3.0 * e).exp() / (da * db * dc).sqrt();
        [g, -6.0 * dx / da * g, -6.0 * y / db * g, -6.0 * z / dc * g]
    };
    let r = integrate(integrand, 0.0, t, tol)?;
    Ok([prm.u0 + scale * r[0], scale * r[1], scale * r[2], scale * r[3]])
}

pub fn green_solution(p: Point3, t: f64, prm: &BenchmarkParams) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(BenchError::Parameter(format!("negative time {t}")));
    }
    let scale = GOLDAK_PREFACTOR * prm.alpha * prm.q / prm.k;
    let tol = prm.quad_tol / scale.abs().max(f64::MIN_POSITIVE);
    if negligible(p, t, prm, scale) {
        return Ok(prm.u0);
    }
    let (a2, b2, c2) = (prm.a * prm.a, prm.b * prm.b, prm.c * prm.c);
    let [x, y, z] = p;
    let r = integrate(
        |tau: f64| {
            let s = 12.0 * prm.alpha * (t - tau);
            let (da, db, dc) = (a2 + s, b2 + s, c2 + s);
            let dx = x - prm.v * tau;
            let e = dx * dx / da + y * y / db + z * z / dc;
            [(-3.0 * e).exp() / (da * db * dc).sqrt()]
        },
        0.0,
        t,
        tol,
    )?;
    Ok(prm.u0 + scale * r[0])
}

/// Central differences of [`green_solution`] with step `h`.
pub fn green_gradient_fd(p: Point3, t: f64, prm: &BenchmarkParams, h: f64) -> Result<Point3> {
    let mut g = [0.0; 3];
    for d in 0..3 {
        let (mut lo, mut hi) = (p, p);
        lo[d] -= h;
        hi[d] += h;
        g[d] = (green_solution(hi, t, prm)? - green_solution(lo, t, prm)?) / (2.0 * h);
    }
    Ok(g)
}

/// Computational domain of one refinement round.
#[derive(Clone, Debug)]
pub struct BenchmarkDomain {
    pub mesh: OctreeMesh,
    pub status: Vec<CellStatus>,
    pub dofs: DofMap,
    /// DOFs on the faces that carry the reference solution.
    pub dirichlet: Vec<usize>,
}

/// The root cube spans `[-1,3] x [-4,0] x [-4,0]`; only the cells of the
/// box `[-1,3] x [-2,0] x [-2,0]` are active. The top face `z = 0` and the
/// symmetry face `y = 0` are insulated, the other four faces are Dirichlet.
/// Cells near the part of the path travelled before `t_end` get `round`
/// levels beyond `fine_level`, all others `round` levels beyond
/// `coarse_level`.
pub fn benchmark_domain(prm: &BenchmarkParams, round: u8) -> Result<BenchmarkDomain> {
    prm.validate()?;
    let coarse = prm.coarse_level + round;
    let fine = prm.fine_level + round;
    let geom = GeometryMap::cube([-1.0, -4.0, -4.0], 4.0);
    let mut mesh = OctreeMesh::uniform(coarse, 0, fine, geom)?;
    let reach = prm.v * prm.t_end;
    let tube_lo = [reach.min(0.0) - 2.0 * prm.a, -4.0 * prm.b, -2.0 * prm.c];
    let tube_hi = [reach.max(0.0) + 2.0 * prm.a, 0.0, 0.0];
    for _ in coarse..fine {
        let flags: Vec<RefinementFlag> = (0..mesh.len())
            .map(|i| {
                let x = mesh.leaf_corners(i);
                let (lo, hi) = (x[0], x[7]);
                let hit = (0..3).all(|d| lo[d] < tube_hi[d] && hi[d] > tube_lo[d]);
                if hit && mesh.leaves()[i].level() < fine {
                    RefinementFlag::Refine
                } else {
                    RefinementFlag::Keep
                }
            })
            .collect();
        mesh = mesh.refine_and_coarsen(&flags)?.0;
    }
    let mesh = mesh.enforce_2to1_balance().0;
    let half = ROOT_LEN / 2;
    let status: Vec<CellStatus> = mesh
        .leaves()
        .iter()
        .map(|k| {
            let a = k.anchor();
            if a[1] >= half && a[2] >= half {
                CellStatus::Active
            } else {
                CellStatus::default()
            }
        })
        .collect();
    let dofs = build_dof_map(&mesh, &status)?;
    let dirichlet = dofs
        .dof_nodes()
        .iter()
        .enumerate()
        .filter(|(_, p)| p[0] == 0 || p[0] == ROOT_LEN || p[1] == half || p[2] == half)
        .map(|(i, _)| i)
        .collect();
    Ok(BenchmarkDomain {
        mesh,
        status,
        dofs,
        dirichlet,
    })
}

/// `sum over active cells of |grad(u - u_h)|^2` at time `t` by 2x2x2 Gauss.
pub fn gradient_error_sq<F>(mesh: &OctreeMesh, dofs: &DofMap, u: &[f64], t: f64, exact_grad: F) -> Result<f64>
where
    F: Fn(Point3, f64) -> Result<Point3>,
{
    let mut s = 0.0;
    for cell in 0..dofs.num_cells() {
        let v = dofs.cell_values(cell, u);
        let x = mesh.leaf_corners(dofs.active_leaves()[cell]);
        for qp in volume_points(&x) {
            let mut gh = [0.0; 3];
            for c in 0..8 {
                for d in 0..3 {
                    gh[d] += v[c] * qp.grad[c][d];
                }
            }
            let g = exact_grad(qp.x, t)?;
            let e2: f64 = (0..3).map(|d| (g[d] - gh[d]).powi(2)).sum();
            s += e2 * qp.w;
        }
    }
    Ok(s)
}

/// Composite trapezoid rule over sampled times.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// `L2(0,T; H1)` seminorm of the error of a stored trajectory `(t_n, U_n)`.
pub fn l2h1_error<F>(mesh: &OctreeMesh, dofs: &DofMap, trajectory: &[(f64, Vec<f64>)], exact_grad: F) -> Result<f64>
where
    F: Fn(Point3, f64) -> Result<Point3>,
{
    let mut times = Vec::with_capacity(trajectory.len());
    let mut vals = Vec::with_capacity(trajectory.len());
    for (t, u) in trajectory {
        times.push(*t);
        vals.push(gradient_error_sq(mesh, dofs, u, *t, &exact_grad)?);
    }
    Ok(trapezoid(&times, &vals).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: u8,
    pub dofs: usize,
    pub cells: usize,
    pub dt: f64,
    pub steps: usize,
    pub error: f64,
}

/// Run the benchmark on one round's mesh and time step.
pub fn run_round(prm: &BenchmarkParams, round: u8) -> Result<RoundResult> {
    let dom = benchmark_domain(prm, round)?;
    let dt = prm.dt0 / f64::powi(2.0, round as i32);
    let steps = (prm.t_end / dt).round().max(1.0) as usize;
    let dt = prm.t_end / steps as f64;
    let material = MaterialTable::constant(prm.rho_c(), 1.0, prm.k)?;
    let bc = BoundarySpec::insulated();
    let layout = RowLayout::single(dom.dofs.num_dofs());
    let transport = Transport::serial();
    let ctx = ThermalContext {
        mesh: &dom.mesh,
        status: &dom.status,
        dofs: &dom.dofs,
        layout: &layout,
        material: &material,
        bc: &bc,
        transport: &transport,
    };
    let opts = PcgOptions {
        tol: 1e-10,
        max_iters: 20_000,
    };
    let exact = |p: Point3, t: f64| -> Result<Point3> {
        let r = green_value_gradient(p, t, prm)?;
        Ok([r[1], r[2], r[3]])
    };
    let mut u = vec![prm.u0; dom.dofs.num_dofs()];
    let mut times = vec![0.0];
    let mut err2 = vec![gradient_error_sq(&dom.mesh, &dom.dofs, &u, 0.0, exact)?];
    for n in 1..=steps {
        let t = n as f64 * dt;
        let mut sys = assemble_step(&ctx, &u, dt, &SourceTerm::Goldak { params: prm.source(), time: t })?;
        let mut fixed = Vec::with_capacity(dom.dirichlet.len());
        for &i in &dom.dirichlet {
            let g = green_solution(dom.mesh.point(dom.dofs.dof_node(i)), t, prm)?;
            fixed.push((i, g));
            u[i] = g;
        }
        apply_dirichlet(&mut sys, &fixed);
        let (next, report) = solve_system(&ctx, &sys, &u, &opts)?;
        if !report.converged {
            return Err(BenchError::Solve(t));
        }
        u = next;
        times.push(t);
        err2.push(gradient_error_sq(&dom.mesh, &dom.dofs, &u, t, exact)?);
    }
    log::debug!("round {round}: {} dofs, {steps} steps", dom.dofs.num_dofs());
    Ok(RoundResult {
        round,
        dofs: dom.dofs.num_dofs(),
        cells: dom.dofs.num_cells(),
        dt,
        steps,
        error: trapezoid(&times, &err2).sqrt(),
    })
}

/// Least-squares rate of `-log(error)` against `log(DOFs^(1/3))`.
pub fn fit_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(BenchError::TooFewPoints(points.len()));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).cbrt().ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, e)| e.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(BenchError::Parameter("all data points have the same DOF count".into()));
    }
    Ok(-sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub rounds: Vec<RoundResult>,
    pub slope: f64,
}

impl ConvergenceStudy {
    pub fn points(&self) -> Vec<(usize, f64)> {
        self.rounds.iter().map(|r| (r.dofs, r.error)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dofs,error\n");
        for r in &self.rounds {
            s.push_str(&format!("{},{:.9e}\n", r.dofs, r.error));
        }
        s
    }
}

pub fn convergence_study(prm: &BenchmarkParams, rounds: u8) -> Result<ConvergenceStudy> {
    if rounds < 2 {
        return Err(BenchError::TooFewPoints(rounds as usize));
    }
    let mut out = Vec::with_capacity(rounds as usize);
    for r in 0..rounds {
        let res = run_round(prm, r)?;
        log::info!("round {r}: dofs={} dt={} error={:.6e}", res.dofs, res.dt, res.error);
        out.push(res);
    }
    let slope = fit_slope(&out.iter().map(|r| (r.dofs, r.error)).collect::<Vec<_>>())?;
    Ok(ConvergenceStudy { rounds: out, slope })
}
