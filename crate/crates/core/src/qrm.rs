//! Fully discrete quasi-reversibility: the lined-up sparse residual
//! operator, Dirichlet data on the boundary, and the regularized normal
//! equations
//!
//! ```text
//! (LᵀL + ε₁ Id + ε₂ DxᵀDx + ε₂ DyᵀDy) 𝒰 = 0   subject to  𝒟𝒰 = ℱ̃
//! ```
//!
//! solved by eliminating the boundary unknowns and factoring the interior
//! block by sparse Cholesky, or by Jacobi preconditioned conjugate gradients.

use std::io::Write;

use rayon::prelude::*;
use sprs::{CsMat, TriMat};

use crate::assembly::NodeMatrices;
use crate::basis::{AngleTable, BasisSet};
use crate::error::{Error, Result};
use crate::forward::BoundaryData;
use crate::grid::{AngleGrid, Grid2D};

/// Bijection between `(i, j, m)` and positions of the lined-up vector.
///
/// The 1-based form is `𝔪 = (i-1)(M_y+1)N + (j-1)N + m`, which reduces to
/// `(i-1)(M_x+1)N + (j-1)N + m` on square grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineUp {
    pub nx: usize,
    pub ny: usize,
    pub n: usize,
}

impl LineUp {
    pub fn new(mx: usize, my: usize, n: usize) -> Self {
        Self {
            nx: mx + 1,
            ny: my + 1,
            n,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 0-based position of 0-based `(i, j, m)`.
    #[inline]
    pub fn at(&self, i: usize, j: usize, m: usize) -> usize {
        (i * self.ny + j) * self.n + m
    }

    /// 1-based index of 1-based `(i, j, m)`.
    pub fn index(&self, i: usize, j: usize, m: usize) -> Result<usize> {
        if i == 0 || i > self.nx || j == 0 || j > self.ny || m == 0 || m > self.n {
            return Err(Error::InvalidArgument(format!(
                "index ({i}, {j}, {m}) outside 1..={} x 1..={} x 1..={}",
                self.nx, self.ny, self.n
            )));
        }
        Ok(self.at(i - 1, j - 1, m - 1) + 1)
    }

    /// Inverse of [`LineUp::index`].
    pub fn inverse(&self, idx: usize) -> Result<(usize, usize, usize)> {
        if idx == 0 || idx > self.len() {
            return Err(Error::InvalidArgument(format!(
                "lined-up index {idx} outside 1..={}",
                self.len()
            )));
        }
        let z = idx - 1;
        let m = z % self.n;
        let node = z / self.n;
        Ok((node / self.ny + 1, node % self.ny + 1, m + 1))
    }
}

/// Lined-up operator, constraint, and regularization weights.
#[derive(Debug, Clone)]
pub struct LinedSystem {
    pub lineup: LineUp,
    pub hx: f64,
    pub hy: f64,
    /// Residual operator; rows of boundary-owned unknowns are empty.
    pub l: CsMat<f64>,
    pub dx: CsMat<f64>,
    pub dy: CsMat<f64>,
    /// `𝒟`: true on boundary-owned unknowns.
    pub mask: Vec<bool>,
    /// `ℱ̃`: projected data on boundary unknowns, zero elsewhere.
    pub data: Vec<f64>,
    pub eps1: f64,
    pub eps2: f64,
    lt: CsMat<f64>,
    dxt: CsMat<f64>,
    dyt: CsMat<f64>,
}

/// Build `L`, `Dx`, `Dy` from per-node matrices.
///
/// For every interior node and component `m` the row of `L` is the
/// residual `[(M_N+A)(U_{i,j+1}-U_ij)/h_y + B(U_{i+1,j}-U_ij)/h_x + C U_ij]_m`;
/// `Dx`, `Dy` hold the forward differences of every component there.
pub fn build_operator(nodes: &NodeMatrices, grid: &Grid2D, eps1: f64, eps2: f64) -> Result<LinedSystem> {
    if nodes.nx != grid.nx() || nodes.ny != grid.ny() {
        return Err(Error::InvalidArgument(format!(
            "node matrices are {}x{} but the grid is {}x{}",
            nodes.nx,
            nodes.ny,
            grid.nx(),
            grid.ny()
        )));
    }
    if !(eps1 > 0.0 && eps1.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon1 must be positive, got {eps1}")));
    }
    if !(eps2 >= 0.0 && eps2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon2 must be nonnegative, got {eps2}"
        )));
    }
    let n = nodes.n;
    let lu = LineUp::new(grid.mx, grid.my, n);
    let dim = lu.len();
    let (hx, hy) = (grid.hx, grid.hy);

    let blocks: Vec<Vec<(usize, usize, f64)>> = (1..grid.mx)
        .into_par_iter()
        .map(|i| {
            let mut t = Vec::new();
            for j in 1..grid.my {
                let p = nodes.p_at(i, j);
                let b = nodes.b_at(i, j);
                let c = nodes.c_at(i, j);
                for m in 0..n {
                    let row = lu.at(i, j, m);
                    for k in 0..n {
                        let e = m * n + k;
                        let diag = -p[e] / hy - b[e] / hx + c[e];
                        if diag != 0.0 {
                            t.push((row, lu.at(i, j, k), diag));
                        }
                        if p[e] != 0.0 {
                            t.push((row, lu.at(i, j + 1, k), p[e] / hy));
                        }
                        if b[e] != 0.0 {
                            t.push((row, lu.at(i + 1, j, k), b[e] / hx));
                        }
                    }
                }
            }
            t
        })
        .collect();
    let mut tl = TriMat::new((dim, dim));
    for t in blocks.iter().flatten() {
        tl.add_triplet(t.0, t.1, t.2);
    }
    let mut tx = TriMat::new((dim, dim));
    let mut ty = TriMat::new((dim, dim));
    for i in 1..grid.mx {
        for j in 1..grid.my {
            for m in 0..n {
                let row = lu.at(i, j, m);
                tx.add_triplet(row, row, -1.0 / hx);
                tx.add_triplet(row, lu.at(i + 1, j, m), 1.0 / hx);
                ty.add_triplet(row, row, -1.0 / hy);
                ty.add_triplet(row, lu.at(i, j + 1, m), 1.0 / hy);
            }
        }
    }
    let l: CsMat<f64> = tl.to_csr();
    let dx: CsMat<f64> = tx.to_csr();
    let dy: CsMat<f64> = ty.to_csr();
    let mut mask = vec![false; dim];
    for i in 0..grid.nx() {
        for j in 0..grid.ny() {
            if grid.is_boundary(i, j) {
                for m in 0..n {
                    mask[lu.at(i, j, m)] = true;
                }
            }
        }
    }
    Ok(LinedSystem {
        lineup: lu,
        hx,
        hy,
        lt: l.transpose_view().to_csr(),
        dxt: dx.transpose_view().to_csr(),
        dyt: dy.transpose_view().to_csr(),
        l,
        dx,
        dy,
        mask,
        data: vec![0.0; dim],
        eps1,
        eps2,
    })
}

fn spmv(m: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    let ip = m.indptr();
    let ip = ip.raw_storage();
    let idx = m.indices();
    let d = m.data();
    y.par_iter_mut().enumerate().for_each(|(r, out)| {
        let mut s = 0.0;
        for p in ip[r]..ip[r + 1] {
            s += d[p] * x[idx[p]];
        }
        *out = s;
    });
}

/// Dot product with a fixed chunking, so the result does not depend on
/// thread scheduling.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

impl LinedSystem {
    /// Store projected boundary data `ℱ̃_𝔪 = ∫ F(x_b, α) Ψ_m(α) dα`.
    pub fn apply_boundary(&mut self, data: &BoundaryData, table: &AngleTable) -> Result<()> {
        let lu = self.lineup;
        if table.n != lu.n {
            return Err(Error::InvalidArgument(format!(
                "basis order {} does not match the system order {}",
                table.n, lu.n
            )));
        }
        if data.na != table.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "boundary data has {} angles, basis table {}",
                data.na,
                table.nodes.len()
            )));
        }
        let mut covered = vec![false; lu.nx * lu.ny];
        let mut f = vec![0.0; lu.n];
        let mut fresh = vec![0.0; lu.len()];
        for (b, &(i, j)) in data.nodes.iter().enumerate() {
            if i >= lu.nx || j >= lu.ny {
                return Err(Error::InvalidArgument(format!(
                    "boundary node ({i}, {j}) outside the grid"
                )));
            }
            table.project_all(data.at(b), &mut f);
            for (m, v) in f.iter().enumerate() {
                fresh[lu.at(i, j, m)] = *v;
            }
            covered[i * lu.ny + j] = true;
        }
        for i in 0..lu.nx {
            for j in 0..lu.ny {
                if self.mask[lu.at(i, j, 0)] && !covered[i * lu.ny + j] {
                    return Err(Error::InvalidArgument(format!("no boundary data for node ({i}, {j})")));
                }
            }
        }
        self.data = fresh;
        Ok(())
    }

    /// Convenience wrapper projecting with `basis` on `angles`.
    pub fn apply_boundary_with(&mut self, data: &BoundaryData, basis: &BasisSet, angles: &AngleGrid) -> Result<()> {
        let table = basis.tabulate(angles);
        self.apply_boundary(data, &table)
    }

    pub fn dim(&self) -> usize {
        self.lineup.len()
    }

    /// `L_μ v` on the full space.
    pub fn normal_apply(&self, v: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let mut tmp = vec![0.0; dim];
        let mut out = vec![0.0; dim];
        let mut acc = vec![0.0; dim];
        spmv(&self.l, v, &mut tmp);
        spmv(&self.lt, &tmp, &mut out);
        if self.eps2 != 0.0 {
            spmv(&self.dx, v, &mut tmp);
            spmv(&self.dxt, &tmp, &mut acc);
            out.par_iter_mut().zip(&acc).for_each(|(o, a)| *o += self.eps2 * a);
            spmv(&self.dy, v, &mut tmp);
            spmv(&self.dyt, &tmp, &mut acc);
            out.par_iter_mut().zip(&acc).for_each(|(o, a)| *o += self.eps2 * a);
        }
        out.par_iter_mut().zip(v).for_each(|(o, x)| *o += self.eps1 * x);
        out
    }

    /// `L_μ` as an explicit sparse matrix.
    pub fn normal_matrix(&self) -> CsMat<f64> {
        let dim = self.dim();
        let ltl = &self.lt * &self.l;
        let dxx = &self.dxt * &self.dx;
        let dyy = &self.dyt * &self.dy;
        let eye: CsMat<f64> = CsMat::eye(dim);
        let mut out = &ltl + &eye.map(|v| v * self.eps1);
        if self.eps2 != 0.0 {
            out = &out + &dxx.map(|v| v * self.eps2);
            out = &out + &dyy.map(|v| v * self.eps2);
        }
        out
    }

    /// Discrete functional `h_x h_y (|L𝒰|² + ε₁|𝒰|² + ε₂|Dx𝒰|² + ε₂|Dy𝒰|²)`.
    pub fn functional(&self, u: &[f64]) -> f64 {
        let dim = self.dim();
        let mut tmp = vec![0.0; dim];
        spmv(&self.l, u, &mut tmp);
        let mut j = dot(&tmp, &tmp) + self.eps1 * dot(u, u);
        spmv(&self.dx, u, &mut tmp);
        j += self.eps2 * dot(&tmp, &tmp);
        spmv(&self.dy, u, &mut tmp);
        j += self.eps2 * dot(&tmp, &tmp);
        self.hx * self.hy * j
    }

    /// Positions of the unknowns left after eliminating the boundary.
    pub fn interior_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| !self.mask[k]).collect()
    }

    /// Right-hand side `-(L_μ)_{IB} ℱ̃` of the reduced system.
    pub fn reduced_rhs(&self) -> Vec<f64> {
        let full: Vec<f64> = self
            .data
            .iter()
            .zip(&self.mask)
            .map(|(v, &b)| if b { *v } else { 0.0 })
            .collect();
        let y = self.normal_apply(&full);
        self.interior_indices().iter().map(|&k| -y[k]).collect()
    }

    /// Residual row `L𝒰` for inspection.
    pub fn residual(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        spmv(&self.l, u, &mut out);
        out
    }

    /// Write `L` as 1-based `row,col,value` lines.
    pub fn write_operator(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "row,col,value")?;
        for (v, (r, c)) in self.l.iter() {
            writeln!(w, "{},{},{:.16e}", r + 1, c + 1, v)?;
        }
        Ok(())
    }
}

/// Fourier coefficients `u_m(x_i, y_j)` in lined-up order.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierField {
    pub lineup: LineUp,
    pub values: Vec<f64>,
}

impl FourierField {
    /// Coefficients at node `(i, j)` (0-based).
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let o = self.lineup.at(i, j, 0);
        &self.values[o..o + self.lineup.n]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Solver for the reduced normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Sparse Cholesky factorization with a fill-reducing ordering,
    /// followed by iterative refinement when needed.
    #[default]
    Cholesky,
    /// Jacobi preconditioned conjugate gradients.
    Cg,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cholesky" => Ok(SolverKind::Cholesky),
            "cg" => Ok(SolverKind::Cg),
            other => Err(Error::Config(format!(
                "unknown solver '{other}' (expected cholesky or cg)"
            ))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Cholesky => "cholesky",
            SolverKind::Cg => "cg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub method: SolverKind,
    pub tol: f64,
    /// Defaults to `20 sqrt(dim)` of the reduced system.
    pub max_iter: Option<usize>,
    /// Initial interior guess, full lined-up length; boundary entries ignored.
    pub initial: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: SolverKind::Cholesky,
            tol: 1e-10,
            max_iter: None,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub dimension: usize,
    /// Relative residual `‖r‖/‖b‖` after each iteration (index 0: start).
    pub history: Vec<f64>,
}

impl SolveStats {
    pub fn residual(&self) -> f64 {
        *self.history.last().unwrap_or(&0.0)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,relative_residual")?;
        for (k, r) in self.history.iter().enumerate() {
            writeln!(w, "{k},{r:.16e}")?;
        }
        Ok(())
    }
}

/// Minimize the functional subject to the boundary constraint.
pub fn solve(system: &LinedSystem, opts: &SolveOptions) -> Result<(FourierField, SolveStats)> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "solver tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if let Some(init) = &opts.initial {
        if init.len() != system.dim() {
            return Err(Error::InvalidArgument(format!(
                "initial guess has length {}, expected {}",
                init.len(),
                system.dim()
            )));
        }
    }
    match opts.method {
        SolverKind::Cholesky => solve_direct(system, opts),
        SolverKind::Cg => solve_cg(system, opts),
    }
}

fn boundary_values(system: &LinedSystem) -> Vec<f64> {
    system
        .data
        .iter()
        .zip(&system.mask)
        .map(|(v, &b)| if b { *v } else { 0.0 })
        .collect()
}

fn assemble_field(system: &LinedSystem, interior: &[usize], x: &[f64]) -> FourierField {
    let mut values = boundary_values(system);
    for (&k, &v) in interior.iter().zip(x) {
        values[k] = v;
    }
    FourierField {
        lineup: system.lineup,
        values,
    }
}

/// `(L_μ)_{II} x` for interior values `x`.
fn apply_reduced(system: &LinedSystem, interior: &[usize], x: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; system.dim()];
    for (&k, &v) in interior.iter().zip(x) {
        full[k] = v;
    }
    let y = system.normal_apply(&full);
    interior.iter().map(|&k| y[k]).collect()
}

/// Maximum number of refinement steps after the factorization.
const MAX_REFINEMENT: usize = 3;

fn solve_direct(system: &LinedSystem, opts: &SolveOptions) -> Result<(FourierField, SolveStats)> {
    use faer::linalg::solvers::Solve;
    use faer::sparse::{SparseColMat, Triplet};

    let interior = system.interior_indices();
    let ni = interior.len();
    let rhs = system.reduced_rhs();
    let bnorm = dot(&rhs, &rhs).sqrt();
    if bnorm == 0.0 || ni == 0 {
        let stats = SolveStats {
            iterations: 0,
            dimension: ni,
            history: vec![0.0],
        };
        return Ok((assemble_field(system, &interior, &vec![0.0; ni]), stats));
    }
    let mut slot = vec![usize::MAX; system.dim()];
    for (r, &k) in interior.iter().enumerate() {
        slot[k] = r;
    }
    let full = system.normal_matrix();
    let mut trips = Vec::with_capacity(full.nnz() / 2 + ni);
    for (v, (r, c)) in full.iter() {
        let (rr, cc) = (slot[r], slot[c]);
        if rr != usize::MAX && cc != usize::MAX && rr >= cc {
            trips.push(Triplet::new(rr, cc, *v));
        }
    }
    drop(full);
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(ni, ni, &trips)
        .map_err(|e| Error::InvalidArgument(format!("reduced matrix: {e:?}")))?;
    drop(trips);
    let llt = mat
        .sp_cholesky(faer::Side::Lower)
        .map_err(|e| Error::NotPositiveDefinite(format!("Cholesky factorization failed: {e:?}")))?;
    let solve_with = |b: &[f64]| -> Vec<f64> {
        let mut m = faer::Mat::<f64>::from_fn(ni, 1, |i, _| b[i]);
        llt.solve_in_place(m.as_mut());
        (0..ni).map(|i| m[(i, 0)]).collect()
    };
    let mut x = solve_with(&rhs);
    let residual = |x: &[f64]| -> Vec<f64> {
        let ax = apply_reduced(system, &interior, x);
        rhs.iter().zip(&ax).map(|(b, a)| b - a).collect()
    };
    let mut r = residual(&x);
    let mut history = vec![1.0, dot(&r, &r).sqrt() / bnorm];
    let mut steps = 0;
    while *history.last().unwrap() >= opts.tol && steps < MAX_REFINEMENT {
        let dx = solve_with(&r);
        x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
        r = residual(&x);
        history.push(dot(&r, &r).sqrt() / bnorm);
        steps += 1;
    }
    let rel = *history.last().unwrap();
    if !(rel < opts.tol) {
        return Err(Error::NonConvergence {
            what: "Cholesky solve with refinement",
            iterations: steps,
            residual: rel,
        });
    }
    let stats = SolveStats {
        iterations: steps,
        dimension: ni,
        history,
    };
    Ok((assemble_field(system, &interior, &x), stats))
}

fn solve_cg(system: &LinedSystem, opts: &SolveOptions) -> Result<(FourierField, SolveStats)> {
    let dim = system.dim();
    let interior = system.interior_indices();
    let ni = interior.len();
    let max_iter = opts
        .max_iter
        .unwrap_or_else(|| (20.0 * (ni as f64).sqrt()).ceil() as usize)
        .max(1);
    let rhs = system.reduced_rhs();

    // Jacobi preconditioner: diagonal of L_μ restricted to the interior.
    let mut diag = vec![system.eps1; dim];
    for (v, (_, c)) in system.l.iter() {
        diag[c] += v * v;
    }
    for (v, (_, c)) in system.dx.iter() {
        diag[c] += system.eps2 * v * v;
    }
    for (v, (_, c)) in system.dy.iter() {
        diag[c] += system.eps2 * v * v;
    }
    let inv_diag: Vec<f64> = interior.iter().map(|&k| 1.0 / diag[k]).collect();

    let mut x: Vec<f64> = match &opts.initial {
        Some(init) => interior.iter().map(|&k| init[k]).collect(),
        None => vec![0.0; ni],
    };
    let bnorm = dot(&rhs, &rhs).sqrt();
    let finish = |x: &[f64], iterations: usize, history: Vec<f64>| {
        (
            assemble_field(system, &interior, x),
            SolveStats {
                iterations,
                dimension: ni,
                history,
            },
        )
    };
    if bnorm == 0.0 {
        // Homogeneous data: the unique minimizer is zero inside.
        return Ok(finish(&vec![0.0; ni], 0, vec![0.0]));
    }

    let ax = apply_reduced(system, &interior, &x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = vec![dot(&r, &r).sqrt() / bnorm];
    if history[0] < opts.tol {
        return Ok(finish(&x, 0, history));
    }
    for it in 1..=max_iter {
        let ap = apply_reduced(system, &interior, &p);
        let curv = dot(&p, &ap);
        if !(curv > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "nonpositive curvature {curv:.3e} at iteration {it}"
            )));
        }
        let alpha = rz / curv;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        let rel = dot(&r, &r).sqrt() / bnorm;
        history.push(rel);
        if rel < opts.tol {
            return Ok(finish(&x, it, history));
        }
        z.par_iter_mut()
            .zip(&r)
            .zip(&inv_diag)
            .for_each(|((zi, ri), d)| *zi = ri * d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(Error::NonConvergence {
        what: "conjugate gradients",
        iterations: max_iter,
        residual: *history.last().unwrap(),
    })
}
