//! Forward problem: Picard iteration on the Volterra form of the transport
//! equation along source rays, boundary traces, and multiplicative noise.
//!
//! Along the ray from `(α, 0)` to `(x, y)` the point at height `w` is
//! `z(w) = (α + w(x-α)/y, w)` and arc length is `ds = (|x - x_α| / y) dw`.
//! Fields vanish below `y = a`, so all ray integrals start there. Rays are
//! sampled at the grid rows and gridded fields are interpolated linearly
//! in `x` along each row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{AngleGrid, Domain, Flow, Grid2D};
use crate::media::{KernelShape, MediaModel};

/// Scalar samples on every node of a [`Grid2D`], row-major (`j` outer).
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: &Grid2D) -> Self {
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn sample(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.node_count());
        for &y in grid.ys() {
            for &x in grid.xs() {
                values.push(f(x, y));
            }
        }
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
            values,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[j * self.nx + i] = v;
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bilinear interpolation; zero outside the closed grid rectangle.
    pub fn interpolate(&self, grid: &Grid2D, x: f64, y: f64) -> f64 {
        let dom = &grid.domain;
        if !dom.contains_closed(x, y) {
            return 0.0;
        }
        let (i0, tx) = cell(x + dom.r, grid.hx, self.nx - 1);
        let (j0, ty) = cell(y - dom.a, grid.hy, self.ny - 1);
        let v00 = self.get(i0, j0);
        let v10 = self.get(i0 + 1, j0);
        let v01 = self.get(i0, j0 + 1);
        let v11 = self.get(i0 + 1, j0 + 1);
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }
}

/// Cell index and fractional offset of `s >= 0` on a grid with `cells` cells.
fn cell(s: f64, h: f64, cells: usize) -> (usize, f64) {
    let p = (s / h).max(0.0);
    let i = (p.floor() as usize).min(cells - 1);
    (i, (p - i as f64).min(1.0))
}

/// Arc-length integral of `field` along the segment from `(α, 0)` to
/// `(x, y)`, by the composite trapezoid in `w` over `[a, y]` with
/// `steps` subintervals. Fields are assumed to vanish below `a`.
pub fn ray_integral(
    field: impl Fn(f64, f64) -> f64,
    domain: &Domain,
    x: f64,
    y: f64,
    alpha: f64,
    steps: usize,
) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::InvalidArgument(format!("ray end needs y > 0, got {y}")));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("ray integral needs at least one step".into()));
    }
    if y <= domain.a {
        return Ok(0.0);
    }
    let scale = (x - alpha).hypot(y) / y;
    let h = (y - domain.a) / steps as f64;
    let mut acc = 0.0;
    for l in 0..=steps {
        let w = if l == steps { y } else { domain.a + l as f64 * h };
        let v = field(alpha + w * (x - alpha) / y, w);
        acc += if l == 0 || l == steps { 0.5 * v } else { v };
    }
    Ok(scale * h * acc)
}

/// `u(x_i, y_j, α_k)` on the full grid, node-major with `α` contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub nx: usize,
    pub ny: usize,
    pub na: usize,
    pub values: Vec<f64>,
}

impl RadianceField {
    pub fn zeros(grid: &Grid2D, angles: &AngleGrid) -> Self {
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
            na: angles.len(),
            values: vec![0.0; grid.node_count() * angles.len()],
        }
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        (j * self.nx + i) * self.na
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.offset(i, j) + k]
    }

    /// All angular samples at node `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j);
        &self.values[o..o + self.na]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = self.offset(i, j);
        let na = self.na;
        &mut self.values[o..o + na]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardStats {
    /// Picard sweeps after the pure-source iterate.
    pub iterations: usize,
    /// Sup-norm difference of the last two iterates.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub radiance: RadianceField,
    /// `ln χ(x, α)`, laid out like the radiance.
    pub ln_chi: RadianceField,
    pub stats: ForwardStats,
}

/// Gridded media used by the ray sweeps.
struct Sampled {
    sigma: GridField,
    source: GridField,
    mu_s: GridField,
}

impl Sampled {
    fn new(media: &MediaModel, grid: &Grid2D) -> Self {
        Self {
            sigma: GridField::sample(grid, |x, y| media.sigma(x, y)),
            source: GridField::sample(grid, |x, y| media.source(x, y)),
            mu_s: GridField::sample(grid, |x, y| media.mu_s(x, y)),
        }
    }
}

/// Linear interpolation along row `l` at abscissa `zx`; zero outside.
#[inline]
fn row_lookup(grid: &Grid2D, zx: f64) -> Option<(usize, f64)> {
    let r = grid.domain.r;
    if zx < -r || zx > r {
        return None;
    }
    Some(cell(zx + r, grid.hx, grid.mx))
}

#[inline]
fn row_interp(values: &[f64], row: usize, nx: usize, at: (usize, f64)) -> f64 {
    let (i0, t) = at;
    let base = row * nx + i0;
    (1.0 - t) * values[base] + t * values[base + 1]
}

/// One ray sweep to node `(i, j)` for source `alpha`: returns
/// `(ln χ, ∫ (f χ) dw · s / χ, ∫ (S χ) dw · s / χ)` where `S` is the
/// scattering source sampled at `(node, k)` in `scatter`.
fn sweep(
    grid: &Grid2D,
    sampled: &Sampled,
    scatter: Option<(&[f64], usize, usize)>,
    i: usize,
    j: usize,
    alpha: f64,
) -> (f64, f64, f64) {
    let x = grid.x(i);
    let y = grid.y(j);
    if j == 0 {
        return (0.0, 0.0, 0.0);
    }
    let nx = grid.nx();
    let s = (x - alpha).hypot(y) / y;
    let hy = grid.hy;
    let ys = grid.ys();
    // Cumulative ln χ along the ray; the sub-ray to z(y_l) is a prefix of
    // this ray, so χ(z_l) needs no interpolation.
    let mut lam = 0.0;
    let mut prev_sigma = 0.0;
    let mut src = 0.0;
    let mut sct = 0.0;
    for l in 0..=j {
        let zx = alpha + ys[l] * (x - alpha) / y;
        let at = row_lookup(grid, zx);
        let (sig, f, sc) = match at {
            Some(at) => {
                let sig = row_interp(&sampled.sigma.values, l, nx, at);
                let f = row_interp(&sampled.source.values, l, nx, at);
                let sc = match scatter {
                    Some((vals, na, k)) => {
                        let (i0, t) = at;
                        let b = (l * nx + i0) * na + k;
                        (1.0 - t) * vals[b] + t * vals[b + na]
                    }
                    None => 0.0,
                };
                (sig, f, sc)
            }
            None => (0.0, 0.0, 0.0),
        };
        if l > 0 {
            lam += 0.5 * hy * s * (prev_sigma + sig);
        }
        prev_sigma = sig;
        let wgt = if l == 0 || l == j { 0.5 * hy } else { hy };
        let e = lam.exp();
        src += wgt * f * e;
        sct += wgt * sc * e;
    }
    let inv = (-lam).exp();
    (lam, s * src * inv, s * sct * inv)
}

/// Scattering source `μ_s(x) ∫ K(x, α_k, β) u(x, β) dβ` on every node.
fn scattering_source(
    media: &MediaModel,
    grid: &Grid2D,
    angles: &AngleGrid,
    mu_s: &GridField,
    u: &RadianceField,
) -> Result<Vec<f64>> {
    let na = angles.len();
    let w = angles.weights();
    let mut out = vec![0.0; u.values.len()];
    out.par_chunks_mut(na)
        .enumerate()
        .try_for_each(|(node, row)| -> Result<()> {
            let ms = mu_s.values[node];
            if ms == 0.0 {
                return Ok(());
            }
            let (i, j) = (node % grid.nx(), node / grid.nx());
            let (x, y) = (grid.x(i), grid.y(j));
            let uu = u.at(i, j);
            match media.kernel.shape {
                KernelShape::Constant(_) => {
                    let kv = media.kernel.eval(x, y, 0.0, 0.0)?;
                    let integral: f64 = w.iter().zip(uu).map(|(a, b)| a * b).sum();
                    row.iter_mut().for_each(|r| *r = ms * kv * integral);
                }
                _ => {
                    let (kmat, _) = media.kernel.matrix_at(x, y, angles, false)?;
                    for (k, r) in row.iter_mut().enumerate() {
                        let krow = &kmat[k * na..(k + 1) * na];
                        let mut acc = 0.0;
                        for l in 0..na {
                            acc += w[l] * krow[l] * uu[l];
                        }
                        *r = ms * acc;
                    }
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Fixed point of the Volterra operator on the full grid.
///
/// The first iterate is the pure-source term; each sweep recomputes the
/// scattering source from the previous iterate (double-buffered).
pub fn solve_forward(
    media: &MediaModel,
    grid: &Grid2D,
    angles: &AngleGrid,
    opts: ForwardOptions,
) -> Result<ForwardSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "forward tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::InvalidArgument("forward max_iter must be positive".into()));
    }
    let sampled = Sampled::new(media, grid);
    let nodes = angles.nodes();
    let na = angles.len();
    let nx = grid.nx();

    let mut u0 = RadianceField::zeros(grid, angles);
    let mut ln_chi = RadianceField::zeros(grid, angles);
    u0.values
        .par_chunks_mut(na)
        .zip(ln_chi.values.par_chunks_mut(na))
        .enumerate()
        .for_each(|(node, (urow, crow))| {
            let (i, j) = (node % nx, node / nx);
            for (k, &alpha) in nodes.iter().enumerate() {
                let (lam, src, _) = sweep(grid, &sampled, None, i, j, alpha);
                crow[k] = lam;
                urow[k] = src;
            }
        });

    let scattering = sampled.mu_s.values.iter().any(|&m| m != 0.0);
    let mut u = u0.clone();
    let mut next = u0.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        if scattering {
            let s = scattering_source(media, grid, angles, &sampled.mu_s, &u)?;
            next.values
                .par_chunks_mut(na)
                .zip(u0.values.par_chunks(na))
                .enumerate()
                .for_each(|(node, (out, base))| {
                    let (i, j) = (node % nx, node / nx);
                    for (k, &alpha) in nodes.iter().enumerate() {
                        let (_, _, sc) = sweep(grid, &sampled, Some((&s, na, k)), i, j, alpha);
                        out[k] = base[k] + sc;
                    }
                });
        } else {
            next.values.copy_from_slice(&u0.values);
        }
        residual = next
            .values
            .par_iter()
            .zip(u.values.par_iter())
            .map(|(a, b)| (a - b).abs())
            .reduce(|| 0.0, f64::max);
        std::mem::swap(&mut u, &mut next);
        if !u.is_finite() {
            return Err(Error::NonConvergence {
                what: "forward Picard iteration",
                iterations: it,
                residual: f64::NAN,
            });
        }
        if residual < opts.tol {
            return Ok(ForwardSolution {
                radiance: u,
                ln_chi,
                stats: ForwardStats {
                    iterations: it,
                    residual,
                },
            });
        }
    }
    Err(Error::NonConvergence {
        what: "forward Picard iteration",
        iterations: opts.max_iter,
        residual,
    })
}

/// Right-hand side of the Volterra equation at an arbitrary point
/// `(x, y)`, `y > 0`, for source `α_k`, using `solution` for the
/// scattering term. Ray samples are spaced by `h_y` with a final partial
/// step; fields are interpolated bilinearly.
pub fn evaluate_at(
    media: &MediaModel,
    grid: &Grid2D,
    angles: &AngleGrid,
    solution: &RadianceField,
    x: f64,
    y: f64,
    k: usize,
) -> Result<f64> {
    if k >= angles.len() {
        return Err(Error::InvalidArgument(format!("angle index {k} out of range")));
    }
    if !(y > 0.0) {
        return Err(Error::InvalidArgument(format!("evaluation point needs y > 0, got {y}")));
    }
    let a = grid.domain.a;
    if y <= a {
        return Ok(0.0);
    }
    let sampled = Sampled::new(media, grid);
    let scatter = if sampled.mu_s.values.iter().any(|&m| m != 0.0) {
        let s = scattering_source(media, grid, angles, &sampled.mu_s, solution)?;
        let na = angles.len();
        Some(GridField {
            nx: grid.nx(),
            ny: grid.ny(),
            values: s.iter().skip(k).step_by(na).copied().collect(),
        })
    } else {
        None
    };
    let alpha = angles.nodes()[k];
    let s = (x - alpha).hypot(y) / y;
    let steps = ((y - a) / grid.hy).ceil().max(1.0) as usize;
    let mut ws: Vec<f64> = (0..steps).map(|l| a + l as f64 * grid.hy).collect();
    ws.push(y);
    let mut lam = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut acc = 0.0;
    let mut prev_g = 0.0;
    for &w in &ws {
        let zx = alpha + w * (x - alpha) / y;
        let sig = sampled.sigma.interpolate(grid, zx, w);
        let mut g = sampled.source.interpolate(grid, zx, w);
        if let Some(sf) = &scatter {
            g += sf.interpolate(grid, zx, w);
        }
        if let Some((pw, ps)) = prev {
            let dw = w - pw;
            lam += 0.5 * dw * s * (ps + sig);
            let e = lam.exp();
            acc += 0.5 * dw * (prev_g + g * e);
            prev_g = g * e;
        } else {
            prev_g = g;
        }
        prev = Some((w, sig));
    }
    Ok(s * acc * (-lam).exp())
}

/// `|x|` beyond which every ray to `(x, y)`, `a < y <= b`, misses the
/// closed domain, so the solution vanishes there.
pub fn support_cutoff(domain: &Domain) -> f64 {
    (domain.b / domain.a) * (domain.r + (1.0 + domain.a / domain.b) * domain.d)
}

/// Measured radiance on all boundary nodes and angles.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    /// Boundary nodes in [`Grid2D::boundary_nodes`] order.
    pub nodes: Vec<(usize, usize)>,
    pub na: usize,
    /// `values[b * na + k]`.
    pub values: Vec<f64>,
    pub inflow: Vec<bool>,
}

impl BoundaryData {
    pub fn at(&self, b: usize) -> &[f64] {
        &self.values[b * self.na..(b + 1) * self.na]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Radiance at every boundary node; inflow entries are set to zero.
pub fn boundary_trace(field: &RadianceField, grid: &Grid2D, angles: &AngleGrid) -> Result<BoundaryData> {
    if field.nx != grid.nx() || field.ny != grid.ny() || field.na != angles.len() {
        return Err(Error::InvalidArgument("radiance field does not match the grid".into()));
    }
    let nodes = grid.boundary_nodes();
    let na = angles.len();
    let mut values = Vec::with_capacity(nodes.len() * na);
    let mut inflow = Vec::with_capacity(nodes.len() * na);
    for &(i, j) in &nodes {
        for (k, &alpha) in angles.nodes().iter().enumerate() {
            let is_in = grid.node_flow(i, j, alpha)? == Flow::Inflow;
            inflow.push(is_in);
            values.push(if is_in { 0.0 } else { field.get(i, j, k) });
        }
    }
    Ok(BoundaryData {
        nodes,
        na,
        values,
        inflow,
    })
}

/// How noise variates are shared across the samples of the boundary data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseModel {
    /// One variate per (boundary node, angle).
    PerSample,
    /// One variate per boundary node, shared by all angles.
    #[default]
    PerNode,
}

impl std::str::FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sample" | "per_sample" => Ok(NoiseModel::PerSample),
            "node" | "per_node" => Ok(NoiseModel::PerNode),
            other => Err(Error::Config(format!(
                "unknown noise model '{other}' (expected sample or node)"
            ))),
        }
    }
}

impl std::fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseModel::PerSample => "sample",
            NoiseModel::PerNode => "node",
        })
    }
}

/// [`apply_noise_with`] using the default [`NoiseModel::PerNode`].
pub fn apply_noise(data: &BoundaryData, delta: f64, seed: u64) -> Result<BoundaryData> {
    apply_noise_with(data, delta, seed, NoiseModel::PerNode)
}

/// Multiply every non-inflow value by `1 + δ(2r - 1)`, `r ~ U[0, 1)`;
/// inflow values are set to 0.
///
/// Variates are drawn in storage order (per entry or per node, inflow or
/// not), so the perturbation of a given entry depends only on `seed`.
pub fn apply_noise_with(data: &BoundaryData, delta: f64, seed: u64, model: NoiseModel) -> Result<BoundaryData> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be nonnegative, got {delta}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    let mut r = 0.0;
    for (e, (v, &is_in)) in out.values.iter_mut().zip(&data.inflow).enumerate() {
        if model == NoiseModel::PerSample || e % data.na == 0 {
            r = rng.gen();
        }
        if is_in {
            *v = 0.0;
        } else if delta > 0.0 {
            *v *= 1.0 + delta * (2.0 * r - 1.0);
        }
    }
    Ok(out)
}
