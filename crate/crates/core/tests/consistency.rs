use rte_qrm::assembly::{assemble, NodeMatrices};
use rte_qrm::basis::build_basis;
use rte_qrm::config::RunConfig;
use rte_qrm::forward::{boundary_trace, ray_integral, solve_forward, GridField, RadianceField};
use rte_qrm::pipeline::prepare;
use rte_qrm::qrm::{build_operator, FourierField, LineUp};
use rte_qrm::reconstruction::{compute_metrics, recover_source};

fn config(text: &str) -> RunConfig {
    RunConfig::parse(text).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Exact radiance projected node by node on the basis.
fn project_radiance(
    field: &RadianceField,
    table: &rte_qrm::basis::AngleTable,
    nx: usize,
    ny: usize,
    n: usize,
) -> FourierField {
    let lineup = LineUp::new(nx - 1, ny - 1, n);
    let mut values = vec![0.0; lineup.len()];
    let mut f = vec![0.0; n];
    for i in 0..nx {
        for j in 0..ny {
            table.project_all(field.at(i, j), &mut f);
            for (m, v) in f.iter().enumerate() {
                values[lineup.at(i, j, m)] = *v;
            }
        }
    }
    FourierField { lineup, values }
}

#[test]
fn source_recovered_from_projected_forward_radiance() {
    let cfg = config("media.preset=test1\nbasis.n=12");
    let (grid, angles, media) = (cfg.grid().unwrap(), cfg.angles().unwrap(), cfg.media_model().unwrap());
    let basis = build_basis(cfg.n, cfg.d, cfg.q).unwrap();
    let table = basis.tabulate(&angles);
    let sol = solve_forward(&media, &grid, &angles, cfg.forward_options()).unwrap();
    let u = project_radiance(&sol.radiance, &table, grid.nx(), grid.ny(), cfg.n);
    let f = recover_source(&u, &basis, &media, &grid, &angles).unwrap();
    let truth = GridField::sample(&grid, |x, y| media.source(x, y));
    let m = compute_metrics(&f, &truth, &grid).unwrap();
    assert!(m.relative_l2 <= 0.15, "relative l2 {}", m.relative_l2);
}

#[test]
fn projected_boundary_data_matches_ray_oracle() {
    let cfg = config("grid.mx=40\ngrid.my=40\nmedia.preset=test1\nbasis.n=12");
    let p = prepare(&cfg).unwrap();
    let mut sys = p.system.clone();
    sys.apply_boundary(&p.clean, &p.table).unwrap();
    let (qx, qw) = p.basis.quadrature();
    let mut worst = 0.0_f64;
    let mut scale = 0.0_f64;
    for &(i, j) in &p.grid.boundary_nodes() {
        let (x, y) = (p.grid.x(i), p.grid.y(j));
        // test1 has no attenuation inside the domain, so the trace is the
        // plain ray integral of the source; inflow directions give 0.
        let trace: Vec<f64> = qx
            .iter()
            .map(|&a| {
                let inflow = p.grid.node_flow(i, j, a).unwrap() == rte_qrm::grid::Flow::Inflow;
                if inflow {
                    0.0
                } else {
                    ray_integral(|x, y| p.media.source(x, y), &p.grid.domain, x, y, a, 800).unwrap()
                }
            })
            .collect();
        for m in 0..cfg.n {
            let psi = p.basis.psi_table(m);
            let oracle: f64 = trace.iter().zip(psi).zip(qw).map(|((t, s), w)| t * s * w).sum();
            let got = sys.data[sys.lineup.at(i, j, m)];
            worst = worst.max((got - oracle).abs());
            scale = scale.max(oracle.abs());
        }
    }
    assert!(worst <= 5e-3 * scale, "worst {worst:.3e} against scale {scale:.3e}");
}

#[test]
fn boundary_trace_zeroes_inflow_only() {
    let cfg = config("grid.mx=20\ngrid.my=20\nmedia.preset=test1");
    let (grid, angles, media) = (cfg.grid().unwrap(), cfg.angles().unwrap(), cfg.media_model().unwrap());
    let sol = solve_forward(&media, &grid, &angles, cfg.forward_options()).unwrap();
    let data = boundary_trace(&sol.radiance, &grid, &angles).unwrap();
    for (b, &(i, j)) in data.nodes.iter().enumerate() {
        for k in 0..data.na {
            let v = data.values[b * data.na + k];
            if data.inflow[b * data.na + k] {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, sol.radiance.get(i, j, k));
            }
        }
    }
}

#[test]
fn post_processing_reduces_artifacts() {
    let p = prepare(&config("grid.mx=50\ngrid.my=50\nbasis.n=12\nmedia.preset=test1")).unwrap();
    let r = p.reconstruct(p.clean.clone()).unwrap();
    assert!(r.artifacts_raw > 0);
    assert!(
        r.artifacts_post < r.artifacts_raw,
        "{} -> {}",
        r.artifacts_raw,
        r.artifacts_post
    );
}

fn flipped(nodes: &NodeMatrices) -> NodeMatrices {
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<f64>>();
    NodeMatrices {
        a: neg(&nodes.a),
        b: neg(&nodes.b),
        c: neg(&nodes.c),
        ..nodes.clone()
    }
}

#[test]
fn derived_sign_fits_forward_solution_better_than_flipped() {
    let cfg = config(
        "grid.mx=50\ngrid.my=50\nbasis.n=12\nmedia.preset=custom\nmedia.custom.mu_a=0.2\nmedia.custom.mu_s=0\nmedia.custom.source_disk=0,2,0.6\nmedia.smoothing=0.3",
    );
    let (grid, angles, media) = (cfg.grid().unwrap(), cfg.angles().unwrap(), cfg.media_model().unwrap());
    let basis = build_basis(cfg.n, cfg.d, cfg.q).unwrap();
    let table = basis.tabulate(&angles);
    let sol = solve_forward(&media, &grid, &angles, cfg.forward_options()).unwrap();
    let u = project_radiance(&sol.radiance, &table, grid.nx(), grid.ny(), cfg.n);
    let nodes = assemble(&basis, &media, &grid).unwrap();
    let derived = build_operator(&nodes, &grid, cfg.epsilon1, cfg.epsilon2).unwrap();
    let negated = build_operator(&flipped(&nodes), &grid, cfg.epsilon1, cfg.epsilon2).unwrap();
    let rd = norm(&derived.residual(&u.values));
    let rp = norm(&negated.residual(&u.values));
    assert!(rp > 1.5 * rd, "derived {rd:.4e}, flipped {rp:.4e}");
}
