//! Compressed-row matrices distributed by row blocks, deterministic
//! reductions, and the Jacobi-preconditioned conjugate-gradient solver.

use serde::{Deserialize, Serialize};

use crate::transport::{Transport, TransportError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SolverError {
    #[error("diagonal entry {row} is not positive ({value})")]
    NonPositiveDiagonal { row: usize, value: f64 },
    #[error("breakdown at iteration {iteration}: p^T A p = {value}, matrix is not positive definite")]
    Breakdown { iteration: usize, value: f64 },
    #[error("dimension mismatch: matrix {n}, vector {got}")]
    Dimension { n: usize, got: usize },
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("row layout covers {got} rows, matrix has {n}")]
    Layout { n: usize, got: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Exact accumulator for sums of doubles: the result depends only on the
/// multiset of summands, never on their order or grouping.
#[derive(Clone, Debug)]
pub struct ExactSum {
    bins: [i128; BINS],
    nonfinite: f64,
}

const BIN_BITS: i32 = 32;
// Exponents of f64 mantissa integers range over [-1074, 971].
const EXP_MIN: i32 = -1074;
const BINS: usize = ((971 - EXP_MIN) / BIN_BITS + 2) as usize;

impl Default for ExactSum {
    fn default() -> Self {
        ExactSum {
            bins: [0; BINS],
            nonfinite: 0.0,
        }
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if x == 0.0 {
            return;
        }
        if !x.is_finite() {
            self.nonfinite += x;
            return;
        }
        let bits = x.to_bits();
        let exp_field = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, exp) = if exp_field == 0 {
            (frac, EXP_MIN)
        } else {
            (frac | (1u64 << 52), exp_field - 1075)
        };
        let shift = exp - EXP_MIN;
        let bin = (shift / BIN_BITS) as usize;
        let offset = shift % BIN_BITS;
        let v = (mant as i128) << offset;
        if bits >> 63 == 1 {
            self.bins[bin] -= v;
        } else {
            self.bins[bin] += v;
        }
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for (a, b) in self.bins.iter_mut().zip(other.bins.iter()) {
            *a += *b;
        }
        self.nonfinite += other.nonfinite;
    }

    /// Nearly correctly rounded value of the exact sum.
    pub fn value(&self) -> f64 {
        if self.nonfinite != 0.0 || self.nonfinite.is_nan() {
            return self.nonfinite;
        }
        // Normalize to a unique representation with every bin in
        // [0, 2^32) except the last; a negative total shows up there.
        let normalize = |b: &mut [i128; BINS]| {
            for i in 0..BINS - 1 {
                let carry = b[i] >> BIN_BITS;
                b[i] -= carry << BIN_BITS;
                b[i + 1] += carry;
            }
        };
        let mut b = self.bins;
        normalize(&mut b);
        let sign = if b[BINS - 1] < 0 {
            b = self.bins.map(|v| -v);
            normalize(&mut b);
            -1.0
        } else {
            1.0
        };
        let mut top = BINS - 1;
        while top > 0 && b[top] == 0 {
            top -= 1;
        }
        // Three bins carry at least 64 significant bits; anything below is
        // non-negative and folded into a sticky bit for correct rounding.
        let lo = top.saturating_sub(2);
        let mut acc: i128 = 0;
        for i in (lo..=top).rev() {
            acc = (acc << BIN_BITS) + b[i];
        }
        let mut scale = EXP_MIN + BIN_BITS * lo as i32;
        if b[..lo].iter().any(|&v| v != 0) {
            acc = (acc << 1) | 1;
            scale -= 1;
        }
        sign * ldexp(acc as f64, scale)
    }
}

fn ldexp(mut v: f64, mut e: i32) -> f64 {
    while e > 1000 {
        v *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        v *= 2f64.powi(-1000);
        e += 1000;
    }
    v * 2f64.powi(e)
}

/// Square compressed-row matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix on a sorted, duplicate-free pattern.
    pub fn from_pattern(rows: Vec<Vec<u32>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            cols.extend(r);
            row_ptr.push(cols.len());
        }
        let nnz = cols.len();
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals: vec![0.0; nnz],
        }
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let rows: Vec<Vec<u32>> = a
            .iter()
            .map(|r| (0..r.len() as u32).filter(|&j| r[j as usize] != 0.0).collect())
            .collect();
        let mut m = Self::from_pattern(rows);
        for i in 0..m.n {
            for k in m.row_ptr[i]..m.row_ptr[i + 1] {
                m.vals[k] = a[i][m.cols[k] as usize];
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::from_pattern((0..n as u32).map(|i| vec![i]).collect());
        m.vals.fill(1.0);
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    /// Position of entry `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: u32) -> Option<usize> {
        let r = self.row_range(i);
        self.cols[r.clone()].binary_search(&j).ok().map(|k| r.start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j as u32).map_or(0.0, |k| self.vals[k])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j as usize]).sum()
            })
            .collect()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let max = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                worst = worst.max((a - self.get(j as usize, i)).abs());
            }
        }
        if max > 0.0 {
            worst / max
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                row[j as usize] = a;
            }
        }
        d
    }
}

/// Contiguous row blocks, one per part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowLayout {
    offsets: Vec<usize>,
}

impl RowLayout {
    pub fn new(offsets: Vec<usize>) -> Self {
        assert!(offsets.len() >= 2 && offsets[0] == 0 && offsets.windows(2).all(|w| w[0] <= w[1]));
        RowLayout { offsets }
    }

    pub fn single(n: usize) -> Self {
        RowLayout { offsets: vec![0, n] }
    }

    /// Near-equal blocks.
    pub fn even(n: usize, parts: usize) -> Self {
        RowLayout {
            offsets: (0..=parts).map(|p| p * n / parts).collect(),
        }
    }

    pub fn parts(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n(&self) -> usize {
        *self.offsets.last().expect("non-empty")
    }

    pub fn range(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    pub fn owner(&self, row: usize) -> usize {
        self.offsets.partition_point(|&o| o <= row) - 1
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn split(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.parts()).map(|p| v[self.range(p)].to_vec()).collect()
    }

    pub fn join(&self, v: &[Vec<f64>]) -> Vec<f64> {
        v.iter().flatten().copied().collect()
    }
}

/// Off-part entries each part needs, grouped by owner, and the local
/// column map of the part's rows (`[owned | halo]` numbering).
#[derive(Clone, Debug)]
pub struct HaloPlan {
    layout: RowLayout,
    /// For each part: sorted global ids of halo entries.
    halo: Vec<Vec<u32>>,
    /// For each part, one local column index per stored entry of its rows.
    local_cols: Vec<Vec<u32>>,
}

impl HaloPlan {
    pub fn new(a: &CsrMatrix, layout: &RowLayout) -> Result<Self, SolverError> {
        if layout.n() != a.n() {
            return Err(SolverError::Layout {
                n: a.n(),
                got: layout.n(),
            });
        }
        let mut halo = Vec::with_capacity(layout.parts());
        let mut local_cols = Vec::with_capacity(layout.parts());
        for p in 0..layout.parts() {
            let r = layout.range(p);
            let entries = a.row_ptr[r.start]..a.row_ptr[r.end];
            let mut h: Vec<u32> = a.cols[entries.clone()]
                .iter()
                .copied()
                .filter(|&j| !r.contains(&(j as usize)))
                .collect();
            h.sort_unstable();
            h.dedup();
            let own = r.len() as u32;
            let lc = a.cols[entries]
                .iter()
                .map(|&j| {
                    if r.contains(&(j as usize)) {
                        j - r.start as u32
                    } else {
                        own + h.binary_search(&j).expect("collected") as u32
                    }
                })
                .collect();
            halo.push(h);
            local_cols.push(lc);
        }
        Ok(HaloPlan {
            layout: layout.clone(),
            halo,
            local_cols,
        })
    }

    pub fn layout(&self) -> &RowLayout {
        &self.layout
    }

    pub fn halo(&self, p: usize) -> &[u32] {
        &self.halo[p]
    }

    /// Exchange halo values: returns, per part, its owned values followed
    /// by the halo values in plan order.
    pub fn gather(&self, x: &[Vec<f64>], transport: &Transport) -> Result<Vec<Vec<f64>>, SolverError> {
        let parts = self.layout.parts();
        // Requests are static; owners answer each requester in one message.
        let mut outboxes: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); parts];
        for q in 0..parts {
            let h = &self.halo[q];
            let mut i = 0;
            while i < h.len() {
                let owner = self.layout.owner(h[i] as usize);
                let start = self.layout.range(owner).start;
                let j = i + h[i..].iter().take_while(|&&g| (g as usize) < self.layout.range(owner).end).count();
                let vals = h[i..j].iter().map(|&g| x[owner][g as usize - start]).collect();
                outboxes[owner].push((q, vals));
                i = j;
            }
        }
        let inboxes = transport.exchange(outboxes)?;
        Ok(inboxes
            .into_iter()
            .enumerate()
            .map(|(p, inbox)| {
                let mut v = x[p].clone();
                // Inbox is ordered by source part, which matches the
                // ascending global order of the halo list.
                for (_, vals) in inbox {
                    v.extend(vals);
                }
                v
            })
            .collect())
    }
}

/// A matrix paired with a row layout and halo plan.
pub struct DistributedMatrix<'a> {
    a: &'a CsrMatrix,
    plan: HaloPlan,
}

impl<'a> DistributedMatrix<'a> {
    pub fn new(a: &'a CsrMatrix, layout: &RowLayout) -> Result<Self, SolverError> {
        Ok(DistributedMatrix {
            a,
            plan: HaloPlan::new(a, layout)?,
        })
    }

    pub fn layout(&self) -> &RowLayout {
        &self.plan.layout
    }

    /// One halo exchange, then each part multiplies its rows.
    pub fn matvec(&self, x: &[Vec<f64>], transport: &Transport) -> Result<Vec<Vec<f64>>, SolverError> {
        let ext = self.plan.gather(x, transport)?;
        let layout = &self.plan.layout;
        Ok(transport.superstep(layout.parts(), |p| {
            let r = layout.range(p);
            let base = self.a.row_ptr[r.start];
            let lc = &self.plan.local_cols[p];
            let xl = &ext[p];
            r.map(|i| {
                let mut s = 0.0;
                for k in self.a.row_range(i) {
                    s += self.a.vals[k] * xl[lc[k - base] as usize];
                }
                s
            })
            .collect()
        }))
    }
}

/// Global dot product, identical for every row layout.
pub fn distributed_dot(x: &[Vec<f64>], y: &[Vec<f64>], transport: &Transport) -> Result<f64, SolverError> {
    let partial = transport.superstep(x.len(), |p| {
        let mut s = ExactSum::new();
        for (a, b) in x[p].iter().zip(&y[p]) {
            s.add(a * b);
        }
        s
    });
    let total = transport.reduce(x.len(), partial, |mut a, b| {
        a.merge(&b);
        a
    })?;
    Ok(total.value())
}

pub fn distributed_matvec(
    a: &CsrMatrix,
    layout: &RowLayout,
    x: &[Vec<f64>],
    transport: &Transport,
) -> Result<Vec<Vec<f64>>, SolverError> {
    DistributedMatrix::new(a, layout)?.matvec(x, transport)
}

pub fn exact_dot(x: &[f64], y: &[f64]) -> f64 {
    let mut s = ExactSum::new();
    for (a, b) in x.iter().zip(y) {
        s.add(a * b);
    }
    s.value()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcgOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PcgOptions {
    fn default() -> Self {
        PcgOptions {
            tol: 1e-8,
            max_iters: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

pub fn jacobi_pcg(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    opts: &PcgOptions,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    let layout = RowLayout::single(a.n());
    let (x, r) = jacobi_pcg_distributed(a, &layout, b, x0, opts, &Transport::serial())?;
    Ok((x, r))
}

/// Jacobi-PCG over row blocks. Every reduction is exact, so the iterates
/// do not depend on the number of parts.
pub fn jacobi_pcg_distributed(
    a: &CsrMatrix,
    layout: &RowLayout,
    b: &[f64],
    x0: &[f64],
    opts: &PcgOptions,
    transport: &Transport,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    let n = a.n();
    for v in [b, x0] {
        if v.len() != n {
            return Err(SolverError::Dimension { n, got: v.len() });
        }
    }
    if !(opts.tol > 0.0) {
        return Err(SolverError::BadTolerance);
    }
    let diag = a.diagonal();
    if let Some((row, &value)) = diag.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(SolverError::NonPositiveDiagonal { row, value });
    }
    let dm = DistributedMatrix::new(a, layout)?;
    let parts = layout.parts();
    let inv_d = layout.split(&diag.iter().map(|d| 1.0 / d).collect::<Vec<_>>());
    let bp = layout.split(b);
    let mut x = layout.split(x0);

    let b_norm = distributed_dot(&bp, &bp, transport)?.sqrt();
    if b_norm == 0.0 {
        let zero = vec![0.0; n];
        return Ok((
            zero,
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    let residual = |x: &[Vec<f64>]| -> Result<Vec<Vec<f64>>, SolverError> {
        let ax = dm.matvec(x, transport)?;
        Ok(transport.superstep(parts, |p| bp[p].iter().zip(&ax[p]).map(|(b, a)| b - a).collect()))
    };
    let precondition =
        |r: &[Vec<f64>]| -> Vec<Vec<f64>> { transport.superstep(parts, |p| r[p].iter().zip(&inv_d[p]).map(|(r, d)| r * d).collect()) };

    let mut r = residual(&x)?;
    let mut rel = distributed_dot(&r, &r, transport)?.sqrt() / b_norm;
    let mut report = SolveReport {
        iterations: 0,
        relative_residual: rel,
        converged: rel <= opts.tol,
    };
    if report.converged {
        return Ok((layout.join(&x), report));
    }
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = distributed_dot(&r, &z, transport)?;
    for it in 1..=opts.max_iters {
        let ap = dm.matvec(&p, transport)?;
        let pap = distributed_dot(&p, &ap, transport)?;
        if !(pap > 0.0) {
            return Err(SolverError::Breakdown {
                iteration: it,
                value: pap,
            });
        }
        let alpha = rz / pap;
        x = transport.superstep(parts, |q| x[q].iter().zip(&p[q]).map(|(x, p)| x + alpha * p).collect());
        r = transport.superstep(parts, |q| r[q].iter().zip(&ap[q]).map(|(r, a)| r - alpha * a).collect());
        rel = distributed_dot(&r, &r, transport)?.sqrt() / b_norm;
        report.iterations = it;
        if rel <= opts.tol {
            // Confirm against the true residual before returning.
            r = residual(&x)?;
            rel = distributed_dot(&r, &r, transport)?.sqrt() / b_norm;
            if rel <= opts.tol {
                report.relative_residual = rel;
                report.converged = true;
                return Ok((layout.join(&x), report));
            }
        }
        z = precondition(&r);
        let rz_new = distributed_dot(&r, &z, transport)?;
        let beta = rz_new / rz;
        rz = rz_new;
        p = transport.superstep(parts, |q| z[q].iter().zip(&p[q]).map(|(z, p)| z + beta * p).collect());
    }
    report.relative_residual = rel;
    report.converged = false;
    Ok((layout.join(&x), report))
}
