//! Orthonormal basis of `L²(-d, d)` obtained by Gram–Schmidt on
//! `{α^(n-1) e^α}` and the derivative-coupling matrix `M_N`.
//!
//! The span of the first `n` functions `α^k e^α` equals the span of
//! `P_k(α/d) e^α` (Legendre polynomials), so the orthonormalization runs on
//! the Legendre family, which is far better conditioned at `N ≈ 12` and
//! yields the same `Ψ_n` (both families have positive leading
//! coefficients). Each `Ψ_n` is stored as coefficients against that
//! family, so `Ψ_n'` is evaluated analytically.

use std::io::Write;

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};
use crate::grid::AngleGrid;

/// Smallest accepted Gauss–Legendre order for construction.
pub const MIN_QUADRATURE: usize = 200;

const PRODUCT_RULE_POINTS: usize = 8;
// Interpolation stencil for projections; wider stencils amplify noise.
const PRODUCT_STENCIL: usize = 8;

#[derive(Debug, Clone)]
pub struct BasisSet {
    n: usize,
    d: f64,
    quad_nodes: Vec<f64>,
    quad_weights: Vec<f64>,
    /// Row `n`: coefficients of `Ψ_n` against `P_k(α/d) e^α`.
    coeffs: Vec<Vec<f64>>,
    /// `psi[n][q] = Ψ_n(α_q)` at the quadrature nodes.
    psi: Vec<Vec<f64>>,
    dpsi: Vec<Vec<f64>>,
    /// `m_n[m][n] = ∫ Ψ_n' Ψ_m dα`.
    m_n: Vec<Vec<f64>>,
}

/// `P_0..P_{n-1}` and their derivatives at `t`.
fn legendre_table(t: f64, n: usize, p: &mut [f64], dp: &mut [f64]) {
    p[0] = 1.0;
    dp[0] = 0.0;
    if n > 1 {
        p[1] = t;
        dp[1] = 1.0;
    }
    for k in 1..n.saturating_sub(1) {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * t * p[k] - kf * p[k - 1]) / (kf + 1.0);
        dp[k + 1] = dp[k - 1] + (2.0 * kf + 1.0) * p[k];
    }
}

/// Build `Ψ_1..Ψ_N` on `[-d, d]` using a `q`-node Gauss–Legendre rule.
pub fn build_basis(n: usize, d: f64, q: usize) -> Result<BasisSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("basis order N must be >= 1".into()));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidArgument(format!("d must be positive, got {d}")));
    }
    if q < MIN_QUADRATURE.max(2 * n) {
        return Err(Error::InvalidArgument(format!(
            "quadrature order {q} too small (need at least {})",
            MIN_QUADRATURE.max(2 * n)
        )));
    }

    let (ref_nodes, ref_weights) = GaussLegendre::nodes_and_weights(q);
    let quad_nodes: Vec<f64> = ref_nodes.iter().map(|t| d * t).collect();
    let quad_weights: Vec<f64> = ref_weights.iter().map(|w| d * w).collect();

    // Columns of sqrt(w_q) φ_k(α_q).
    let mut p = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut family = vec![vec![0.0; q]; n];
    for (qi, (&a, &w)) in quad_nodes.iter().zip(&quad_weights).enumerate() {
        legendre_table(a / d, n, &mut p, &mut dp);
        let s = w.sqrt() * a.exp();
        for k in 0..n {
            family[k][qi] = s * p[k];
        }
    }

    // Modified Gram–Schmidt with one re-orthogonalization pass, tracking
    // coefficients alongside the sampled vectors.
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = family[k].clone();
        let mut c = vec![0.0; n];
        c[k] = 1.0;
        let orig = norm(&v);
        for _pass in 0..2 {
            for (qm, cm) in ortho.iter().zip(&coeffs) {
                let r = dot(&v, qm);
                for (vi, qi) in v.iter_mut().zip(qm) {
                    *vi -= r * qi;
                }
                for (ci, cmi) in c.iter_mut().zip(cm) {
                    *ci -= r * cmi;
                }
            }
        }
        let nv = norm(&v);
        if !(nv > 1e-13 * orig) {
            return Err(Error::Basis(format!(
                "raw family numerically dependent at n = {} (relative norm {:.2e})",
                k + 1,
                nv / orig
            )));
        }
        v.iter_mut().for_each(|x| *x /= nv);
        c.iter_mut().for_each(|x| *x /= nv);
        ortho.push(v);
        coeffs.push(c);
    }

    let mut basis = BasisSet {
        n,
        d,
        quad_nodes,
        quad_weights,
        coeffs,
        psi: vec![vec![0.0; q]; n],
        dpsi: vec![vec![0.0; q]; n],
        m_n: vec![vec![0.0; n]; n],
    };
    let mut vals = vec![0.0; n];
    let mut dvals = vec![0.0; n];
    for qi in 0..q {
        basis.eval_all(basis.quad_nodes[qi], &mut vals, &mut dvals);
        for k in 0..n {
            basis.psi[k][qi] = vals[k];
            basis.dpsi[k][qi] = dvals[k];
        }
    }
    for m in 0..n {
        for k in 0..n {
            basis.m_n[m][k] = basis.quad_inner(&basis.dpsi[k], &basis.psi[m]);
        }
    }
    Ok(basis)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl BasisSet {
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn half_interval(&self) -> f64 {
        self.d
    }

    pub fn quadrature_len(&self) -> usize {
        self.quad_nodes.len()
    }

    pub fn quad_nodes(&self) -> &[f64] {
        &self.quad_nodes
    }

    /// `Ψ_n` at the quadrature nodes (0-based `n`).
    pub fn psi_table(&self, n: usize) -> &[f64] {
        &self.psi[n]
    }

    pub fn dpsi_table(&self, n: usize) -> &[f64] {
        &self.dpsi[n]
    }

    /// `M_N` with `m_n()[m][n] = ∫ Ψ_n' Ψ_m`; unit upper triangular.
    pub fn m_n(&self) -> &[Vec<f64>] {
        &self.m_n
    }

    fn quad_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.quad_weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    /// Gram matrix `<Ψ_m, Ψ_n>` by the construction quadrature.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|m| {
                (0..self.n)
                    .map(|k| self.quad_inner(&self.psi[m], &self.psi[k]))
                    .collect()
            })
            .collect()
    }

    /// All `Ψ_n(α)` and `Ψ_n'(α)`; `α` is not range-checked.
    pub fn eval_all(&self, alpha: f64, vals: &mut [f64], dvals: &mut [f64]) {
        let n = self.n;
        let mut p = vec![0.0; n];
        let mut dp = vec![0.0; n];
        legendre_table(alpha / self.d, n, &mut p, &mut dp);
        let e = alpha.exp();
        for (k, row) in self.coeffs.iter().enumerate() {
            let mut v = 0.0;
            let mut dv = 0.0;
            for j in 0..=k {
                v += row[j] * p[j];
                dv += row[j] * dp[j];
            }
            // (p(α/d) e^α)' = (p + p'/d) e^α
            vals[k] = e * v;
            dvals[k] = e * (v + dv / self.d);
        }
    }

    fn check_alpha(&self, alpha: f64) -> Result<()> {
        if !(alpha.abs() <= self.d * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "alpha = {alpha} outside [-{d}, {d}]",
                d = self.d
            )));
        }
        Ok(())
    }

    fn check_coeffs(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                self.n,
                coeffs.len()
            )));
        }
        Ok(())
    }

    /// `Σ c_n Ψ_n(α)`.
    pub fn synthesize(&self, coeffs: &[f64], alpha: f64) -> Result<f64> {
        self.check_alpha(alpha)?;
        self.check_coeffs(coeffs)?;
        let mut v = vec![0.0; self.n];
        let mut dv = vec![0.0; self.n];
        self.eval_all(alpha, &mut v, &mut dv);
        Ok(dot(coeffs, &v))
    }

    /// `Σ c_n Ψ_n'(α)`.
    pub fn synthesize_derivative(&self, coeffs: &[f64], alpha: f64) -> Result<f64> {
        self.check_alpha(alpha)?;
        self.check_coeffs(coeffs)?;
        let mut v = vec![0.0; self.n];
        let mut dv = vec![0.0; self.n];
        self.eval_all(alpha, &mut v, &mut dv);
        Ok(dot(coeffs, &dv))
    }

    /// Basis values on an angle grid.
    pub fn tabulate(&self, angles: &AngleGrid) -> AngleTable {
        let n = self.n;
        let len = angles.len();
        let mut psi = vec![0.0; len * n];
        let mut dpsi = vec![0.0; len * n];
        for (k, &a) in angles.nodes().iter().enumerate() {
            self.eval_all(a, &mut psi[k * n..(k + 1) * n], &mut dpsi[k * n..(k + 1) * n]);
        }
        AngleTable {
            n,
            weights: angles.weights().to_vec(),
            nodes: angles.nodes().to_vec(),
            proj: self.projection_weights(angles),
            psi,
            dpsi,
        }
    }

    /// Weights `W[k][n]` with `∫ u Ψ_n dα ≈ Σ_k W[k][n] u(α_k)`.
    ///
    /// The samples are interpolated piecewise by polynomials through the
    /// `PRODUCT_STENCIL` nearest nodes of each subinterval and the interpolant is integrated exactly
    /// against `Ψ_n`, so accuracy depends on the smoothness of `u`, not on
    /// how oscillatory the high-order `Ψ_n` are.
    pub fn projection_weights(&self, angles: &AngleGrid) -> Vec<f64> {
        let n = self.n;
        let nodes = angles.nodes();
        let m = angles.m;
        let (gx, gw) = GaussLegendre::nodes_and_weights(PRODUCT_RULE_POINTS);
        let mut out = vec![0.0; nodes.len() * n];
        let mut v = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let stencil = PRODUCT_STENCIL.min(m + 1);
        for i in 0..m {
            let start = (i + 1).saturating_sub(stencil / 2).min(m + 1 - stencil);
            let (lo, hi) = (nodes[i], nodes[i + 1]);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for (&t, &w) in gx.iter().zip(&gw) {
                let a = mid + half * t;
                self.eval_all(a, &mut v, &mut dv);
                for j in 0..stencil {
                    let mut lag = 1.0;
                    for l in 0..stencil {
                        if l != j {
                            lag *= (a - nodes[start + l]) / (nodes[start + j] - nodes[start + l]);
                        }
                    }
                    let f = w * half * lag;
                    let row = &mut out[(start + j) * n..(start + j + 1) * n];
                    for (o, p) in row.iter_mut().zip(&v) {
                        *o += f * p;
                    }
                }
            }
        }
        out
    }

    /// Approximation of `∫ u(α) Ψ_n(α) dα` from samples on `angles`
    /// (0-based `n`).
    pub fn project(&self, samples: &[f64], angles: &AngleGrid, n: usize) -> Result<f64> {
        if n >= self.n {
            return Err(Error::InvalidArgument(format!(
                "component {n} out of range for order {}",
                self.n
            )));
        }
        if samples.len() != angles.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples, got {}",
                angles.len(),
                samples.len()
            )));
        }
        let w = self.projection_weights(angles);
        Ok(samples.iter().enumerate().map(|(k, s)| s * w[k * self.n + n]).sum())
    }

    /// Gauss–Legendre nodes and weights used for construction.
    pub fn quadrature(&self) -> (&[f64], &[f64]) {
        (&self.quad_nodes, &self.quad_weights)
    }

    /// Write `α, Ψ_1..Ψ_N, Ψ_1'..Ψ_N'` rows for each angle node.
    pub fn write_csv<W: Write>(&self, angles: &AngleGrid, mut out: W) -> std::io::Result<()> {
        let table = self.tabulate(angles);
        write!(out, "alpha")?;
        for k in 1..=self.n {
            write!(out, ",psi{k}")?;
        }
        for k in 1..=self.n {
            write!(out, ",dpsi{k}")?;
        }
        writeln!(out)?;
        for (k, a) in angles.nodes().iter().enumerate() {
            write!(out, "{a:.16e}")?;
            for v in table.psi_at(k) {
                write!(out, ",{v:.16e}")?;
            }
            for v in table.dpsi_at(k) {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `Ψ_n` and `Ψ_n'` sampled on an [`AngleGrid`], laid out angle-major.
#[derive(Debug, Clone)]
pub struct AngleTable {
    pub n: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    proj: Vec<f64>,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
}

impl AngleTable {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Ψ_1..Ψ_N` at angle node `k`.
    pub fn psi_at(&self, k: usize) -> &[f64] {
        &self.psi[k * self.n..(k + 1) * self.n]
    }

    pub fn dpsi_at(&self, k: usize) -> &[f64] {
        &self.dpsi[k * self.n..(k + 1) * self.n]
    }

    /// Projections of `samples` onto all components, as in
    /// [`BasisSet::project`].
    pub fn project_all(&self, samples: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (k, &s) in samples.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let w = &self.proj[k * self.n..(k + 1) * self.n];
            for (o, p) in out.iter_mut().zip(w) {
                *o += s * p;
            }
        }
    }

    /// `Σ c_n Ψ_n(α_k)` for every node `k`.
    pub fn synthesize_all(&self, coeffs: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = dot(coeffs, self.psi_at(k));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_gram_error(b: &BasisSet) -> f64 {
        let g = b.gram();
        let mut err: f64 = 0.0;
        for (m, row) in g.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                let t = if m == k { 1.0 } else { 0.0 };
                err = err.max((v - t).abs());
            }
        }
        err
    }

    #[test]
    fn first_function_closed_form() {
        let b = build_basis(1, 1.0, 200).unwrap();
        let c2 = ((2.0f64).exp() - (-2.0f64).exp()) / 2.0;
        assert!((c2 - 3.62686).abs() < 1e-5);
        for &a in &[-1.0, -0.3, 0.0, 0.7, 1.0] {
            let v = b.synthesize(&[1.0], a).unwrap();
            assert!((v - a.exp() / c2.sqrt()).abs() < 1e-13, "alpha={a}");
            let dv = b.synthesize_derivative(&[1.0], a).unwrap();
            assert!((dv - v).abs() < 1e-13);
        }
    }

    #[test]
    fn orthonormal_and_unit_upper_triangular() {
        let b = build_basis(12, 5.0, 400).unwrap();
        assert!(max_gram_error(&b) < 1e-8);
        let m = b.m_n();
        for i in 0..12 {
            assert!((m[i][i] - 1.0).abs() < 1e-8, "a_{i}{i} = {}", m[i][i]);
            for k in 0..i {
                assert!(m[i][k].abs() < 1e-8, "a_{i}{k} = {}", m[i][k]);
            }
        }
    }

    #[test]
    fn leading_coefficient_sign_matches_monomial_family() {
        // Ψ_2 = (c1 α + c0) e^α with c1 > 0.
        let b = build_basis(2, 2.0, 200).unwrap();
        let f = |a: f64| b.synthesize(&[0.0, 1.0], a).unwrap() / a.exp();
        assert!(f(1.0) - f(0.0) > 0.0);
    }

    #[test]
    fn derivatives_not_identically_zero() {
        let b = build_basis(12, 5.0, 400).unwrap();
        for k in 0..12 {
            let mx = b.dpsi_table(k).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(mx > 0.0);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let b = build_basis(8, 5.0, 300).unwrap();
        let h = 1e-5;
        for k in 0..8 {
            let mut e = vec![0.0; 8];
            e[k] = 1.0;
            for &a in &[-4.0, -1.3, 0.2, 3.9] {
                let fd = (b.synthesize(&e, a + h).unwrap() - b.synthesize(&e, a - h).unwrap()) / (2.0 * h);
                let an = b.synthesize_derivative(&e, a).unwrap();
                assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "k={k} a={a}");
            }
        }
    }

    #[test]
    fn projection_examples() {
        let b = build_basis(12, 5.0, 400).unwrap();
        let ag = AngleGrid::new(5.0, 50).unwrap();
        let table = b.tabulate(&ag);

        let mut e1 = vec![0.0; 12];
        e1[0] = 1.0;
        let mut samples = vec![0.0; ag.len()];
        table.synthesize_all(&e1, &mut samples);
        assert!((b.project(&samples, &ag, 0).unwrap() - 1.0).abs() < 1e-3);
        assert!(b.project(&samples, &ag, 1).unwrap().abs() < 1e-3);

        let zeros = vec![0.0; ag.len()];
        for k in 0..12 {
            assert_eq!(b.project(&zeros, &ag, k).unwrap(), 0.0);
        }

        let mut c = vec![0.0; 12];
        c[1] = 3.0;
        c[6] = 5.0;
        table.synthesize_all(&c, &mut samples);
        for k in 0..12 {
            let p = b.project(&samples, &ag, k).unwrap();
            assert!((p - c[k]).abs() < 1e-3, "k={k}: {p} vs {}", c[k]);
        }
        assert!(b.project(&samples, &ag, 12).is_err());
    }

    #[test]
    fn synthesize_unit_vectors_and_range() {
        let b = build_basis(5, 5.0, 200).unwrap();
        let mut v = vec![0.0; 5];
        let mut dv = vec![0.0; 5];
        b.eval_all(1.5, &mut v, &mut dv);
        for k in 0..5 {
            let mut e = vec![0.0; 5];
            e[k] = 1.0;
            assert_eq!(b.synthesize(&e, 1.5).unwrap(), v[k]);
        }
        assert_eq!(b.synthesize(&[0.0; 5], 1.5).unwrap(), 0.0);
        assert!(b.synthesize(&[0.0; 5], 5.5).is_err());
        assert!(b.synthesize(&[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn cosine_round_trip_improves_with_order() {
        let d = 5.0;
        // L² error of the Galerkin truncation, measured on a dense rule.
        let err = |n: usize| {
            let b = build_basis(n, d, 400).unwrap();
            let nodes = b.quad_nodes().to_vec();
            let w: Vec<f64> = b.quad_weights.clone();
            let g: Vec<f64> = nodes.iter().map(|a| a.cos()).collect();
            let c: Vec<f64> = (0..n).map(|k| b.quad_inner(&g, b.psi_table(k))).collect();
            let mut e2 = 0.0;
            for (q, a) in nodes.iter().enumerate() {
                let s = b.synthesize(&c, *a).unwrap();
                e2 += w[q] * (s - g[q]).powi(2);
            }
            e2.sqrt()
        };
        let e4 = err(4);
        let e8 = err(8);
        let e12 = err(12);
        assert!(e8 < e4 && e12 < e8, "{e4} {e8} {e12}");
    }

    #[test]
    fn deterministic() {
        let a = build_basis(6, 5.0, 250).unwrap();
        let b = build_basis(6, 5.0, 250).unwrap();
        assert_eq!(a.coeffs, b.coeffs);
        assert_eq!(a.m_n, b.m_n);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_basis(0, 5.0, 400).is_err());
        assert!(build_basis(3, -1.0, 400).is_err());
        assert!(build_basis(3, 5.0, 10).is_err());
    }
}
