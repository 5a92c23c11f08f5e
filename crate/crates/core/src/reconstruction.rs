//! Source recovery from the solved Fourier field, two-step cleanup, and
//! quality metrics against a known source.
//!
//! With `u` synthesized from its coefficients the source follows from the
//! transport equation `f = ν·∇u + (μ_a+μ_s)u − μ_s ∫K u dβ` at every angle
//! node; the estimate is the trapezoid mean of these values over `α`.

use std::str::FromStr;

use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::forward::{GridField, RadianceField};
use crate::grid::{direction_vector, AngleGrid, Grid2D};
use crate::media::MediaModel;
use crate::qrm::FourierField;

/// `u(x_i, y_j, α_k) = Σ_m U_m(x_i, y_j) Ψ_m(α_k)`.
pub fn synthesize_radiance(
    u: &FourierField,
    basis: &BasisSet,
    grid: &Grid2D,
    angles: &AngleGrid,
) -> Result<RadianceField> {
    let lu = u.lineup;
    if lu.nx != grid.nx() || lu.ny != grid.ny() || lu.n != basis.order() {
        return Err(Error::InvalidArgument(format!(
            "Fourier field is {}x{}x{} but grid/basis are {}x{}x{}",
            lu.nx,
            lu.ny,
            lu.n,
            grid.nx(),
            grid.ny(),
            basis.order()
        )));
    }
    let table = basis.tabulate(angles);
    let mut out = RadianceField::zeros(grid, angles);
    let na = angles.len();
    let nx = grid.nx();
    out.values.par_chunks_mut(na).enumerate().for_each(|(node, slot)| {
        let (i, j) = (node % nx, node / nx);
        table.synthesize_all(u.at(i, j), slot);
    });
    Ok(out)
}

/// Raw source estimate on the interior nodes from radiance samples on
/// every node and angle.
///
/// Gradients are central differences. Boundary nodes are not part of the
/// reconstruction set and hold 0.
pub fn recover_from_radiance(
    field: &RadianceField,
    media: &MediaModel,
    grid: &Grid2D,
    angles: &AngleGrid,
) -> Result<GridField> {
    if field.nx != grid.nx() || field.ny != grid.ny() || field.na != angles.len() {
        return Err(Error::InvalidArgument(format!(
            "radiance field is {}x{}x{} but grid/angles are {}x{}x{}",
            field.nx,
            field.ny,
            field.na,
            grid.nx(),
            grid.ny(),
            angles.len()
        )));
    }
    let (nx, ny, na) = (grid.nx(), grid.ny(), angles.len());
    let nodes = angles.nodes();
    let w = angles.weights();
    let width = 2.0 * angles.d;
    let values: Result<Vec<f64>> = (0..nx * ny)
        .into_par_iter()
        .map(|node| {
            let (i, j) = (node % nx, node / nx);
            if grid.is_boundary(i, j) {
                return Ok(0.0);
            }
            let (x, y) = (grid.x(i), grid.y(j));
            let (dx, dy) = (2.0 * grid.hx, 2.0 * grid.hy);
            let u = field.at(i, j);
            let (uxp, uxm) = (field.at(i + 1, j), field.at(i - 1, j));
            let (uyp, uym) = (field.at(i, j + 1), field.at(i, j - 1));
            let sigma = media.sigma(x, y);
            let mu_s = media.mu_s(x, y);
            let kmat = if mu_s != 0.0 {
                Some(media.kernel.matrix_at(x, y, angles, false)?.0)
            } else {
                None
            };
            let mut acc = 0.0;
            for k in 0..na {
                let nu = direction_vector(x, y, nodes[k])?;
                let gx = (uxp[k] - uxm[k]) / dx;
                let gy = (uyp[k] - uym[k]) / dy;
                let mut f = nu[0] * gx + nu[1] * gy + sigma * u[k];
                if let Some(km) = &kmat {
                    let row = &km[k * na..(k + 1) * na];
                    let s: f64 = row.iter().zip(w).zip(u).map(|((kv, wv), uv)| kv * wv * uv).sum();
                    f -= mu_s * s;
                }
                acc += w[k] * f;
            }
            Ok(acc / width)
        })
        .collect();
    Ok(GridField {
        nx,
        ny,
        values: values?,
    })
}

/// Synthesize `u` from `U` and recover the raw source.
pub fn recover_source(
    u: &FourierField,
    basis: &BasisSet,
    media: &MediaModel,
    grid: &Grid2D,
    angles: &AngleGrid,
) -> Result<GridField> {
    let field = synthesize_radiance(u, basis, grid, angles)?;
    recover_from_radiance(&field, media, grid, angles)
}

/// Smoothing neighbourhood of the second cleanup step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Neighborhood {
    /// 3×3 block including the centre.
    #[default]
    Box3,
    /// Centre and its four axis neighbours.
    Cross,
}

impl FromStr for Neighborhood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "box3" | "3x3" | "box" => Ok(Neighborhood::Box3),
            "cross" | "5point" => Ok(Neighborhood::Cross),
            other => Err(Error::Config(format!(
                "unknown smoothing kernel '{other}' (expected box3 or cross)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostOptions {
    pub threshold_fraction: f64,
    pub neighborhood: Neighborhood,
}

impl Default for PostOptions {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.2,
            neighborhood: Neighborhood::Box3,
        }
    }
}

/// Zero every node with value `<= fraction · max`.
pub fn threshold(field: &GridField, fraction: f64) -> GridField {
    let cut = fraction * field.max();
    GridField {
        values: field.values.iter().map(|&v| if v > cut { v } else { 0.0 }).collect(),
        ..field.clone()
    }
}

/// Mean over the neighbourhood of every node, truncated at the grid edges.
pub fn smooth(field: &GridField, neighborhood: Neighborhood) -> GridField {
    let (nx, ny) = (field.nx as isize, field.ny as isize);
    let offsets: &[(isize, isize)] = match neighborhood {
        Neighborhood::Box3 => &[
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (0, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ],
        Neighborhood::Cross => &[(0, -1), (-1, 0), (0, 0), (1, 0), (0, 1)],
    };
    let values = (0..field.values.len())
        .into_par_iter()
        .map(|node| {
            let (i, j) = ((node as isize) % nx, (node as isize) / nx);
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(di, dj) in offsets {
                let (p, q) = (i + di, j + dj);
                if p >= 0 && p < nx && q >= 0 && q < ny {
                    sum += field.values[(q * nx + p) as usize];
                    count += 1;
                }
            }
            sum / count as f64
        })
        .collect();
    GridField {
        values,
        ..field.clone()
    }
}

/// Threshold then smooth.
pub fn post_process(raw: &GridField, opts: &PostOptions) -> Result<GridField> {
    if !(0.0..1.0).contains(&opts.threshold_fraction) {
        return Err(Error::InvalidArgument(format!(
            "threshold fraction must lie in [0, 1), got {}",
            opts.threshold_fraction
        )));
    }
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("raw estimate has non-finite values".into()));
    }
    Ok(smooth(&threshold(raw, opts.threshold_fraction), opts.neighborhood))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `‖f − f_true‖/‖f_true‖`, or the absolute norm when `f_true = 0`.
    pub relative_l2: f64,
    /// False when `relative_l2` holds an absolute norm.
    pub relative: bool,
    /// Distance between mass centroids of the positive parts; the domain
    /// diameter when either field has no positive mass.
    pub centroid_offset: f64,
    /// Jaccard index of the sets `{f > 0.2 max f}`.
    pub support_jaccard: f64,
}

/// Fraction of `max` defining the support sets of [`Metrics`].
pub const SUPPORT_FRACTION: f64 = 0.2;

fn centroid(field: &GridField, grid: &Grid2D) -> Option<[f64; 2]> {
    let (mut m, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for j in 0..field.ny {
        for i in 0..field.nx {
            let v = field.get(i, j).max(0.0);
            m += v;
            cx += v * grid.x(i);
            cy += v * grid.y(j);
        }
    }
    (m > 0.0).then(|| [cx / m, cy / m])
}

/// Nodes strictly above `SUPPORT_FRACTION · max`; empty when `max <= 0`.
pub fn support(field: &GridField) -> Vec<bool> {
    let m = field.max();
    let cut = SUPPORT_FRACTION * m;
    field.values.iter().map(|&v| m > 0.0 && v > cut).collect()
}

pub fn compute_metrics(estimate: &GridField, truth: &GridField, grid: &Grid2D) -> Result<Metrics> {
    if estimate.nx != truth.nx || estimate.ny != truth.ny || estimate.nx != grid.nx() || estimate.ny != grid.ny() {
        return Err(Error::InvalidArgument("metric fields are on different grids".into()));
    }
    let cell = grid.hx * grid.hy;
    let err: f64 = estimate
        .values
        .iter()
        .zip(&truth.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        * cell;
    let norm: f64 = truth.values.iter().map(|b| b * b).sum::<f64>() * cell;
    let (relative_l2, relative) = if norm > 0.0 {
        ((err / norm).sqrt(), true)
    } else {
        (err.sqrt(), false)
    };
    let dom = &grid.domain;
    let diameter = (2.0 * dom.r).hypot(dom.b - dom.a);
    let centroid_offset = match (centroid(estimate, grid), centroid(truth, grid)) {
        (Some(p), Some(q)) => (p[0] - q[0]).hypot(p[1] - q[1]),
        _ => diameter,
    };
    let (se, st) = (support(estimate), support(truth));
    let inter = se.iter().zip(&st).filter(|(a, b)| **a && **b).count();
    let union = se.iter().zip(&st).filter(|(a, b)| **a || **b).count();
    let support_jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(Metrics {
        relative_l2,
        relative,
        centroid_offset,
        support_jaccard,
    })
}

/// Nodes with positive value outside [`support`] of the true source.
pub fn artifact_count(field: &GridField, truth: &GridField) -> usize {
    field
        .values
        .iter()
        .zip(support(truth))
        .filter(|(v, inside)| **v > 0.0 && !inside)
        .count()
}

/// Raw and post-processed estimates with metrics against the true source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEstimate {
    pub f_comp: GridField,
    pub f_post: GridField,
    pub metrics: Metrics,
}

impl SourceEstimate {
    pub fn new(f_comp: GridField, truth: &GridField, grid: &Grid2D, opts: &PostOptions) -> Result<Self> {
        let f_post = post_process(&f_comp, opts)?;
        let metrics = compute_metrics(&f_post, truth, grid)?;
        Ok(Self {
            f_comp,
            f_post,
            metrics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::grid::Domain;
    use crate::media::{Kernel, PiecewiseField, Shape};
    use crate::qrm::LineUp;
    use proptest::prelude::*;

    fn small() -> (Grid2D, AngleGrid, BasisSet) {
        let dom = Domain::default();
        (
            Grid2D::new(dom, 8, 8).unwrap(),
            AngleGrid::new(dom.d, 20).unwrap(),
            build_basis(4, dom.d, 200).unwrap(),
        )
    }

    fn media(mu_a: f64, mu_s: f64) -> MediaModel {
        MediaModel {
            domain: Domain::default(),
            mu_a: PiecewiseField::constant(mu_a),
            mu_s: PiecewiseField::constant(mu_s),
            kernel: Kernel::constant(0.1),
            source: PiecewiseField::constant(0.0),
        }
    }

    fn field_from(grid: &Grid2D, n: usize, f: impl Fn(usize) -> f64) -> FourierField {
        let lineup = LineUp::new(grid.mx, grid.my, n);
        FourierField {
            lineup,
            values: (0..lineup.len()).map(f).collect(),
        }
    }

    #[test]
    fn zero_field_gives_zero_source() {
        let (grid, angles, basis) = small();
        let u = field_from(&grid, 4, |_| 0.0);
        let f = recover_source(&u, &basis, &media(0.3, 0.2), &grid, &angles).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatially_constant_radiance_without_scattering() {
        let (grid, angles, basis) = small();
        let coeffs = [0.7, -0.2, 0.1, 0.05];
        let u = field_from(&grid, 4, |k| coeffs[k % 4]);
        let m = media(0.3, 0.0);
        let f = recover_source(&u, &basis, &m, &grid, &angles).unwrap();
        let vals: Vec<f64> = angles
            .nodes()
            .iter()
            .map(|&a| basis.synthesize(&coeffs, a).unwrap())
            .collect();
        let mean = angles.integrate(&vals) / (2.0 * angles.d);
        for j in 1..grid.my {
            for i in 1..grid.mx {
                assert!((f.get(i, j) - 0.3 * mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_kernel_scattering_term() {
        // Isotropic constant kernel: ∫K u dβ = K ∫u dβ is α independent.
        let (grid, angles, _) = small();
        let mut field = RadianceField::zeros(&grid, &angles);
        for (k, v) in field.values.iter_mut().enumerate() {
            *v = 1.0 + 0.01 * (k % angles.len()) as f64;
        }
        let m = media(0.0, 0.5);
        let f = recover_from_radiance(&field, &m, &grid, &angles).unwrap();
        let slice = field.at(3, 3).to_vec();
        let int = angles.integrate(&slice);
        let mean_u = int / (2.0 * angles.d);
        let want = 0.5 * mean_u - 0.5 * 0.1 * int;
        assert!((f.get(3, 3) - want).abs() < 1e-12);
    }

    #[test]
    fn linear_radiance_gradient() {
        // u = x + 2y for every α: f = mean_α(ν_x + 2ν_y), exact for differences.
        let (grid, angles, _) = small();
        let mut field = RadianceField::zeros(&grid, &angles);
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let v = grid.x(i) + 2.0 * grid.y(j);
                field.at_mut(i, j).iter_mut().for_each(|s| *s = v);
            }
        }
        let f = recover_from_radiance(&field, &media(0.0, 0.0), &grid, &angles).unwrap();
        for (i, j) in [(0, 0), (8, 3), (3, 0)] {
            assert_eq!(f.get(i, j), 0.0);
        }
        for (i, j) in [(1, 1), (4, 4), (7, 3), (2, 7)] {
            let (x, y) = (grid.x(i), grid.y(j));
            let vals: Vec<f64> = angles
                .nodes()
                .iter()
                .map(|&a| {
                    let nu = direction_vector(x, y, a).unwrap();
                    nu[0] + 2.0 * nu[1]
                })
                .collect();
            let want = angles.integrate(&vals) / (2.0 * angles.d);
            assert!((f.get(i, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn recover_is_linear() {
        let (grid, angles, basis) = small();
        let m = media(0.2, 0.3);
        let u1 = field_from(&grid, 4, |k| ((k * 37) % 11) as f64 - 5.0);
        let u2 = field_from(&grid, 4, |k| ((k * 13) % 7) as f64 * 0.3);
        let sum = FourierField {
            lineup: u1.lineup,
            values: u1.values.iter().zip(&u2.values).map(|(a, b)| a + b).collect(),
        };
        let f1 = recover_source(&u1, &basis, &m, &grid, &angles).unwrap();
        let f2 = recover_source(&u2, &basis, &m, &grid, &angles).unwrap();
        let fs = recover_source(&sum, &basis, &m, &grid, &angles).unwrap();
        for k in 0..fs.values.len() {
            let scale = 1.0 + fs.values[k].abs();
            assert!((fs.values[k] - f1.values[k] - f2.values[k]).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (grid, angles, basis) = small();
        let u = field_from(&Grid2D::new(Domain::default(), 4, 4).unwrap(), 4, |_| 0.0);
        assert!(recover_source(&u, &basis, &media(0.0, 0.0), &grid, &angles).is_err());
    }

    fn blank(n: usize) -> GridField {
        GridField {
            nx: n,
            ny: n,
            values: vec![0.0; n * n],
        }
    }

    #[test]
    fn single_spike_spreads_to_ninths() {
        let mut f = blank(5);
        f.set(2, 2, 9.0);
        let out = post_process(&f, &PostOptions::default()).unwrap();
        for j in 0..5 {
            for i in 0..5 {
                let near = (i as isize - 2).abs() <= 1 && (j as isize - 2).abs() <= 1;
                let want = if near { 1.0 } else { 0.0 };
                assert!((out.get(i, j) - want).abs() < 1e-15);
            }
        }
        let cross = post_process(
            &f,
            &PostOptions {
                neighborhood: Neighborhood::Cross,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((cross.get(2, 2) - 1.8).abs() < 1e-15);
        assert!((cross.get(1, 1)).abs() < 1e-15);
    }

    #[test]
    fn constant_field_unchanged() {
        let mut f = blank(4);
        f.values.iter_mut().for_each(|v| *v = 2.5);
        let out = post_process(&f, &PostOptions::default()).unwrap();
        assert!(out.values.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn all_zero_passes_through() {
        let f = blank(4);
        assert_eq!(post_process(&f, &PostOptions::default()).unwrap(), f);
    }

    #[test]
    fn metrics_identity_and_scaling() {
        let grid = Grid2D::new(Domain::default(), 20, 20).unwrap();
        let disk = Shape::Disk {
            center: [0.0, 2.0],
            radius: 0.5,
        };
        let truth = GridField::sample(&grid, |x, y| if disk.contains(x, y) { 1.0 } else { 0.0 });
        let m = compute_metrics(&truth, &truth, &grid).unwrap();
        assert_eq!((m.relative_l2, m.centroid_offset, m.support_jaccard), (0.0, 0.0, 1.0));
        let double = GridField {
            values: truth.values.iter().map(|v| 2.0 * v).collect(),
            ..truth.clone()
        };
        let m = compute_metrics(&double, &truth, &grid).unwrap();
        assert!((m.relative_l2 - 1.0).abs() < 1e-14);
        assert!(m.centroid_offset < 1e-14);
        assert_eq!(m.support_jaccard, 1.0);
    }

    #[test]
    fn metrics_shifted_disk_oracle() {
        let grid = Grid2D::new(Domain::default(), 40, 40).unwrap();
        let disk = |cx: f64| {
            let s = Shape::Disk {
                center: [cx, 2.0],
                radius: 0.4,
            };
            GridField::sample(&grid, move |x, y| if s.contains(x, y) { 1.0 } else { 0.0 })
        };
        let truth = disk(0.0);
        let shifted = disk(grid.hx);
        let m = compute_metrics(&shifted, &truth, &grid).unwrap();
        // Same node pattern moved one column: offset is exactly h_x.
        assert!((m.centroid_offset - grid.hx).abs() < 1e-12);
        let st = support(&truth);
        let count = st.iter().filter(|&&b| b).count() as f64;
        // Nodes leaving the support are the leftmost node of each row.
        let mut lost = 0.0;
        for j in 0..grid.ny() {
            let row: Vec<bool> = (0..grid.nx()).map(|i| st[j * grid.nx() + i]).collect();
            if row.iter().any(|&b| b) {
                lost += 1.0;
            }
        }
        let want = (count - lost) / (count + lost);
        assert!((m.support_jaccard - want).abs() < 1e-12);
        let want_l2 = (2.0 * lost / count).sqrt();
        assert!((m.relative_l2 - want_l2).abs() < 1e-12);
    }

    #[test]
    fn metrics_zero_truth_reports_absolute_norm() {
        let grid = Grid2D::new(Domain::default(), 2, 2).unwrap();
        let truth = GridField::zeros(&grid);
        let mut est = truth.clone();
        est.values[0] = 1.0;
        let m = compute_metrics(&est, &truth, &grid).unwrap();
        assert!(!m.relative);
        assert!((m.relative_l2 - (grid.hx * grid.hy).sqrt()).abs() < 1e-14);
        assert!(m.centroid_offset.is_finite());
    }

    #[test]
    fn artifacts_counted_outside_support() {
        let mut t = blank(3);
        t.set(1, 1, 1.0);
        let mut f = blank(3);
        f.set(1, 1, 1.0);
        f.set(0, 0, 0.1);
        f.set(2, 2, -0.1);
        assert_eq!(artifact_count(&f, &t), 1);
        t.set(0, 0, 0.01);
        assert_eq!(artifact_count(&f, &t), 1);
    }

    fn grid_strategy() -> impl Strategy<Value = GridField> {
        (2usize..8, 2usize..8).prop_flat_map(|(nx, ny)| {
            prop::collection::vec(-2.0f64..5.0, nx * ny).prop_map(move |values| GridField { nx, ny, values })
        })
    }

    proptest! {
        #[test]
        fn threshold_is_idempotent(f in grid_strategy(), frac in 0.0f64..0.99) {
            let once = threshold(&f, frac);
            prop_assert_eq!(threshold(&once, frac), once);
        }

        #[test]
        fn smoothing_is_sup_contraction(f in grid_strategy()) {
            let sup = |g: &GridField| g.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for nb in [Neighborhood::Box3, Neighborhood::Cross] {
                prop_assert!(sup(&smooth(&f, nb)) <= sup(&f) * (1.0 + 1e-15));
            }
        }

        #[test]
        fn smoothing_preserves_interior_mass(vals in prop::collection::vec(-2.0f64..5.0, 16)) {
            // 4×4 block padded by two zero rings on an 8×8 grid.
            let mut f = GridField { nx: 8, ny: 8, values: vec![0.0; 64] };
            for (k, v) in vals.iter().enumerate() {
                f.set(2 + k % 4, 2 + k / 4, *v);
            }
            let total: f64 = f.values.iter().sum();
            for nb in [Neighborhood::Box3, Neighborhood::Cross] {
                let s: f64 = smooth(&f, nb).values.iter().sum();
                prop_assert!((s - total).abs() < 1e-12 * (1.0 + total.abs()));
            }
        }
    }

    #[test]
    fn post_options_validation() {
        let f = blank(3);
        let bad = PostOptions {
            threshold_fraction: 1.5,
            ..Default::default()
        };
        assert!(post_process(&f, &bad).is_err());
        let mut nan = blank(3);
        nan.values[0] = f64::NAN;
        assert!(post_process(&nan, &PostOptions::default()).is_err());
        assert_eq!("cross".parse::<Neighborhood>().unwrap(), Neighborhood::Cross);
        assert!("ring".parse::<Neighborhood>().is_err());
    }
}
