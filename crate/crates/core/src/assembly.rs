//! Per-node coefficient matrices of the coupled first-order system
//!
//! ```text
//! (M_N + A) U_y + B U_x + C U = 0
//! ```
//!
//! obtained by differentiating the transport equation in `α`, multiplying
//! by `|x - x_α| / y`, substituting the truncated expansion and projecting
//! on `Ψ_m`:
//!
//! ```text
//! A_mn = ∫ (x-α)/|x-x_α|² Ψ_n Ψ_m
//! B_mn = ∫ [(x-α)/y Ψ_n' Ψ_m - y/|x-x_α|² Ψ_n Ψ_m]
//! C_mn = ∫ |x-x_α|/y (μ_a+μ_s) Ψ_n' Ψ_m
//!      - ∫ |x-x_α|/y μ_s (∫ K_α(α, β) Ψ_n(β) dβ) Ψ_m(α)
//! ```
//!
//! The `-y/|x-x_α|²` term comes from `∂_α ν_x = -y²/|x-x_α|³`. All
//! integrals use the Gauss–Legendre rule of the basis, since the
//! integrands are known analytically.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::media::{KernelShape, MediaModel};

/// Dense `N x N` blocks per grid node, row-major (`m` row, `n` column),
/// nodes in row-major grid order (`j` outer).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrices {
    pub n: usize,
    pub nx: usize,
    pub ny: usize,
    /// `M_N`, shared by all nodes.
    pub m_n: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl NodeMatrices {
    fn block(&self, v: &[f64], i: usize, j: usize) -> std::ops::Range<usize> {
        debug_assert_eq!(v.len(), self.nx * self.ny * self.n * self.n);
        let nn = self.n * self.n;
        let o = (j * self.nx + i) * nn;
        o..o + nn
    }

    pub fn a_at(&self, i: usize, j: usize) -> &[f64] {
        &self.a[self.block(&self.a, i, j)]
    }

    pub fn b_at(&self, i: usize, j: usize) -> &[f64] {
        &self.b[self.block(&self.b, i, j)]
    }

    pub fn c_at(&self, i: usize, j: usize) -> &[f64] {
        &self.c[self.block(&self.c, i, j)]
    }

    /// Coefficient of `U_y`: `M_N + A`.
    pub fn p_at(&self, i: usize, j: usize) -> Vec<f64> {
        self.m_n.iter().zip(self.a_at(i, j)).map(|(m, a)| m + a).collect()
    }

    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Assemble `A`, `B`, `C` at every node of `grid`.
pub fn assemble(basis: &BasisSet, media: &MediaModel, grid: &Grid2D) -> Result<NodeMatrices> {
    let n = basis.order();
    let nn = n * n;
    let (alphas, weights) = basis.quadrature();
    let q = alphas.len();
    if (basis.half_interval() - grid.domain.d).abs() > 1e-12 * grid.domain.d {
        return Err(Error::InvalidArgument(format!(
            "basis interval d = {} does not match domain d = {}",
            basis.half_interval(),
            grid.domain.d
        )));
    }
    let psi: Vec<&[f64]> = (0..n).map(|k| basis.psi_table(k)).collect();
    let dpsi: Vec<&[f64]> = (0..n).map(|k| basis.dpsi_table(k)).collect();

    // Products Ψ_n Ψ_m and Ψ_n' Ψ_m per quadrature node, weighted.
    let mut pp = vec![0.0; q * nn];
    let mut dp = vec![0.0; q * nn];
    for qi in 0..q {
        for m in 0..n {
            for k in 0..n {
                pp[qi * nn + m * n + k] = weights[qi] * psi[k][qi] * psi[m][qi];
                dp[qi * nn + m * n + k] = weights[qi] * dpsi[k][qi] * psi[m][qi];
            }
        }
    }

    let m_n: Vec<f64> = basis.m_n().iter().flatten().copied().collect();
    let count = grid.node_count();
    let mut a = vec![0.0; count * nn];
    let mut b = vec![0.0; count * nn];
    let mut c = vec![0.0; count * nn];
    let hg = !matches!(media.kernel.shape, KernelShape::Constant(_));

    a.par_chunks_mut(nn)
        .zip(b.par_chunks_mut(nn))
        .zip(c.par_chunks_mut(nn))
        .enumerate()
        .try_for_each(|(node, ((ab, bb), cb))| -> Result<()> {
            let (i, j) = (node % grid.nx(), node / grid.nx());
            let (x, y) = (grid.x(i), grid.y(j));
            let sigma = media.sigma(x, y);
            let mu_s = media.mu_s(x, y);
            for qi in 0..q {
                let dx = x - alphas[qi];
                let r2 = dx * dx + y * y;
                let fa = dx / r2;
                let fb1 = dx / y;
                let fb2 = -y / r2;
                let fc = sigma * r2.sqrt() / y;
                let pq = &pp[qi * nn..(qi + 1) * nn];
                let dq = &dp[qi * nn..(qi + 1) * nn];
                for e in 0..nn {
                    ab[e] += fa * pq[e];
                    bb[e] += fb1 * dq[e] + fb2 * pq[e];
                    if sigma != 0.0 {
                        cb[e] += fc * dq[e];
                    }
                }
            }
            if mu_s != 0.0 && hg {
                // kpsi[qi][k] = ∫ K_α(x, α_qi, β) Ψ_k(β) dβ
                let mut kpsi = vec![0.0; n];
                for qi in 0..q {
                    kpsi.iter_mut().for_each(|v| *v = 0.0);
                    for ql in 0..q {
                        let kd = weights[ql] * media.kernel.d_alpha(x, y, alphas[qi], alphas[ql])?;
                        for (k, v) in kpsi.iter_mut().enumerate() {
                            *v += kd * psi[k][ql];
                        }
                    }
                    let dx = x - alphas[qi];
                    let f = weights[qi] * mu_s * dx.hypot(y) / y;
                    for m in 0..n {
                        for k in 0..n {
                            cb[m * n + k] -= f * kpsi[k] * psi[m][qi];
                        }
                    }
                }
            }
            Ok(())
        })?;

    Ok(NodeMatrices {
        n,
        nx: grid.nx(),
        ny: grid.ny(),
        m_n,
        a,
        b,
        c,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningReport {
    /// Smallest singular value of `M_N + A` over all nodes.
    pub min_singular: f64,
    /// Node attaining the minimum.
    pub argmin: (usize, usize),
    /// Nodes whose smallest singular value is below [`SINGULAR_FLOOR`].
    pub flagged: Vec<(usize, usize)>,
    pub max_norm_a: f64,
    pub max_norm_b: f64,
    pub max_norm_c: f64,
}

pub const SINGULAR_FLOOR: f64 = 1e-8;

fn dmatrix(n: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

/// Smallest singular value of the `U_y` coefficient at every node, and
/// Frobenius norms of the blocks.
pub fn check_conditioning(nodes: &NodeMatrices) -> ConditioningReport {
    let n = nodes.n;
    let per_node: Vec<(f64, f64, f64, f64)> = (0..nodes.node_count())
        .into_par_iter()
        .map(|node| {
            let (i, j) = (node % nodes.nx, node / nodes.nx);
            let p = dmatrix(n, &nodes.p_at(i, j));
            let smin = p.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
            (
                smin,
                frobenius(nodes.a_at(i, j)),
                frobenius(nodes.b_at(i, j)),
                frobenius(nodes.c_at(i, j)),
            )
        })
        .collect();
    let mut report = ConditioningReport {
        min_singular: f64::INFINITY,
        argmin: (0, 0),
        flagged: Vec::new(),
        max_norm_a: 0.0,
        max_norm_b: 0.0,
        max_norm_c: 0.0,
    };
    for (node, &(s, na, nb, nc)) in per_node.iter().enumerate() {
        let ij = (node % nodes.nx, node / nodes.nx);
        if s < report.min_singular {
            report.min_singular = s;
            report.argmin = ij;
        }
        if s < SINGULAR_FLOOR {
            report.flagged.push(ij);
        }
        report.max_norm_a = report.max_norm_a.max(na);
        report.max_norm_b = report.max_norm_b.max(nb);
        report.max_norm_c = report.max_norm_c.max(nc);
    }
    report
}

/// `A_1 = (M_N + A)^{-1} B` and `A_2 = (M_N + A)^{-1} C` at one node, the
/// explicit form `U_y = -A_1 U_x - A_2 U`. `None` if the coefficient of
/// `U_y` is singular there.
pub fn explicit_form(nodes: &NodeMatrices, i: usize, j: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = nodes.n;
    let lu = dmatrix(n, &nodes.p_at(i, j)).lu();
    let a1 = lu.solve(&dmatrix(n, nodes.b_at(i, j)))?;
    let a2 = lu.solve(&dmatrix(n, nodes.c_at(i, j)))?;
    let rows = |m: DMatrix<f64>| -> Vec<f64> { m.transpose().iter().copied().collect() };
    Some((rows(a1), rows(a2)))
}
