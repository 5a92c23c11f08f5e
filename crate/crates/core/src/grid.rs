//! Rectangular domain, uniform spatial and angular grids, and inflow
//! classification of boundary points.
//!
//! The domain is `(-R, R) x (a, b)` with point sources on the segment
//! `{(alpha, 0) : |alpha| <= d}` below it.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    /// Half-width in x.
    pub r: f64,
    /// Lower y-bound.
    pub a: f64,
    /// Upper y-bound.
    pub b: f64,
    /// Half-extent of the source line.
    pub d: f64,
}

impl Domain {
    pub fn new(r: f64, a: f64, b: f64, d: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!("R must be positive, got {r}")));
        }
        // a = 1 is admitted: it is the boundary value used by the
        // reference experiments.
        if !(a >= 1.0) {
            return Err(Error::Domain(format!("constraint 1 < a violated: a = {a}")));
        }
        if !(b > a && b.is_finite()) {
            return Err(Error::Domain(format!("constraint a < b violated: a = {a}, b = {b}")));
        }
        if !(d >= r && d.is_finite()) {
            return Err(Error::Domain(format!("constraint d >= R violated: d = {d}, R = {r}")));
        }
        Ok(Self { r, a, b, d })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > -self.r && x < self.r && y > self.a && y < self.b
    }

    pub fn contains_closed(&self, x: f64, y: f64) -> bool {
        x >= -self.r && x <= self.r && y >= self.a && y <= self.b
    }
}

impl Default for Domain {
    fn default() -> Self {
        Self {
            r: 1.0,
            a: 1.0,
            b: 3.0,
            d: 5.0,
        }
    }
}

/// Uniform node grid on the closed rectangle.
///
/// Node coordinates are stored rather than recomputed so every module
/// indexes identical values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub domain: Domain,
    pub mx: usize,
    pub my: usize,
    pub hx: f64,
    pub hy: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Grid2D {
    pub fn new(domain: Domain, mx: usize, my: usize) -> Result<Self> {
        if mx < 2 || my < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 subintervals per axis, got {mx}x{my}"
            )));
        }
        let hx = 2.0 * domain.r / mx as f64;
        let hy = (domain.b - domain.a) / my as f64;
        let xs = (0..=mx).map(|i| -domain.r + i as f64 * hx).collect();
        let ys = (0..=my).map(|j| domain.a + j as f64 * hy).collect();
        Ok(Self {
            domain,
            mx,
            my,
            hx,
            hy,
            xs,
            ys,
        })
    }

    /// Number of nodes along x (`M_x + 1`).
    pub fn nx(&self) -> usize {
        self.mx + 1
    }

    /// Number of nodes along y (`M_y + 1`).
    pub fn ny(&self) -> usize {
        self.my + 1
    }

    pub fn node_count(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.xs[i]
    }

    pub fn y(&self, j: usize) -> f64 {
        self.ys[j]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.mx || j == self.my
    }

    /// Boundary nodes in a fixed order: bottom, right, top (right to
    /// left), left (top to bottom). Corners appear once.
    pub fn boundary_nodes(&self) -> Vec<(usize, usize)> {
        let (mx, my) = (self.mx, self.my);
        let mut out = Vec::with_capacity(2 * (mx + my));
        out.extend((0..=mx).map(|i| (i, 0)));
        out.extend((1..=my).map(|j| (mx, j)));
        out.extend((0..mx).rev().map(|i| (i, my)));
        out.extend((1..my).rev().map(|j| (0, j)));
        out
    }
}

/// Angular integration rule over the source abscissa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleQuadrature {
    #[default]
    Trapezoid,
    /// Composite Simpson; requires an even subinterval count.
    Simpson,
}

/// Uniform grid on `[-d, d]` with quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    pub m: usize,
    pub d: f64,
    pub h: f64,
    pub rule: AngleQuadrature,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl AngleGrid {
    pub fn new(d: f64, m: usize) -> Result<Self> {
        Self::with_rule(d, m, AngleQuadrature::Trapezoid)
    }

    pub fn with_rule(d: f64, m: usize, rule: AngleQuadrature) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "angle grid needs at least 2 subintervals, got {m}"
            )));
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!("d must be positive, got {d}")));
        }
        if rule == AngleQuadrature::Simpson && m % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "Simpson rule needs an even subinterval count, got {m}"
            )));
        }
        let h = 2.0 * d / m as f64;
        let mut nodes: Vec<f64> = (0..=m).map(|k| -d + k as f64 * h).collect();
        nodes[m] = d;
        let weights = match rule {
            AngleQuadrature::Trapezoid => (0..=m).map(|k| if k == 0 || k == m { 0.5 * h } else { h }).collect(),
            AngleQuadrature::Simpson => (0..=m)
                .map(|k| {
                    let c = if k == 0 || k == m {
                        1.0
                    } else if k % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    c * h / 3.0
                })
                .collect(),
        };
        Ok(Self {
            m,
            d,
            h,
            rule,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

/// Unit vector from the source `(alpha, 0)` towards `(x, y)`.
pub fn direction_vector(x: f64, y: f64, alpha: f64) -> Result<[f64; 2]> {
    if !(y > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "direction undefined for y = {y} (need y > 0)"
        )));
    }
    let dx = x - alpha;
    let norm = dx.hypot(y);
    Ok([dx / norm, y / norm])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Inflow,
    Outflow,
}

/// Classify a boundary point as inflow (`nu . n <= 0`) or outflow.
///
/// `tol` is the snapping distance to an edge. A corner is inflow only
/// when the test passes for both adjacent edge normals.
pub fn classify_inflow(domain: &Domain, x: f64, y: f64, alpha: f64, tol: f64) -> Result<Flow> {
    let mut normals: Vec<[f64; 2]> = Vec::with_capacity(2);
    let in_x = x >= -domain.r - tol && x <= domain.r + tol;
    let in_y = y >= domain.a - tol && y <= domain.b + tol;
    if in_x && (y - domain.a).abs() <= tol {
        normals.push([0.0, -1.0]);
    }
    if in_x && (y - domain.b).abs() <= tol {
        normals.push([0.0, 1.0]);
    }
    if in_y && (x + domain.r).abs() <= tol {
        normals.push([-1.0, 0.0]);
    }
    if in_y && (x - domain.r).abs() <= tol {
        normals.push([1.0, 0.0]);
    }
    if normals.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "point ({x}, {y}) is not on the boundary"
        )));
    }
    let nu = direction_vector(x, y, alpha)?;
    let inflow = normals.iter().all(|n| nu[0] * n[0] + nu[1] * n[1] <= 0.0);
    Ok(if inflow { Flow::Inflow } else { Flow::Outflow })
}

impl Grid2D {
    /// Inflow status of boundary node `(i, j)` for source abscissa `alpha`.
    pub fn node_flow(&self, i: usize, j: usize, alpha: f64) -> Result<Flow> {
        if !self.is_boundary(i, j) {
            return Err(Error::InvalidArgument(format!(
                "node ({i}, {j}) is not a boundary node"
            )));
        }
        let tol = 0.5 * self.hx.min(self.hy);
        classify_inflow(&self.domain, self.x(i), self.y(j), alpha, tol)
    }
}
