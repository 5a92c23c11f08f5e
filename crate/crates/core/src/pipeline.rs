//! End-to-end run: basis, forward data, noise, assembly, quasi-reversibility
//! solve, source recovery, cleanup and metrics, then artifacts on disk.
//!
//! Every CSV artifact depends only on the config and seed; wall-clock
//! timings go to `summary.txt` alone.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::assembly::{assemble, check_conditioning, ConditioningReport};
use crate::basis::{build_basis, AngleTable, BasisSet};
use crate::config::{GridFormat, RunConfig};
use crate::error::{Result, Stage, StageExt};
use crate::forward::{apply_noise_with, boundary_trace, solve_forward, BoundaryData, ForwardStats, GridField};
use crate::grid::{AngleGrid, Grid2D};
use crate::io::{export_grid, write_boundary_csv};
use crate::media::MediaModel;
use crate::qrm::{build_operator, solve, FourierField, LinedSystem, SolveOptions, SolveStats};
use crate::reconstruction::{artifact_count, recover_source, SourceEstimate};

/// Wall-clock time per stage, in execution order.
#[derive(Debug, Clone, Default)]
pub struct Timings(pub Vec<(Stage, Duration)>);

impl Timings {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().stage(stage);
        self.0.push((stage, t.elapsed()));
        out
    }
}

/// Everything that does not depend on the measured data.
pub struct Prepared {
    pub config: RunConfig,
    pub grid: Grid2D,
    pub angles: AngleGrid,
    pub basis: BasisSet,
    pub table: AngleTable,
    pub media: MediaModel,
    pub truth: GridField,
    /// Noiseless boundary trace of the forward solution.
    pub clean: BoundaryData,
    pub forward_stats: ForwardStats,
    pub conditioning: ConditioningReport,
    pub system: LinedSystem,
    pub timings: Timings,
}

/// Outcome of one reconstruction from boundary data.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub data: BoundaryData,
    pub coefficients: FourierField,
    pub solve_stats: SolveStats,
    pub estimate: SourceEstimate,
    pub artifacts_raw: usize,
    pub artifacts_post: usize,
    pub timings: Timings,
}

/// Build the basis, media, forward data and the lined-up operator.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate().stage(Stage::Config)?;
    let mut timings = Timings::default();
    let (grid, angles, media) = timings.time(Stage::Config, || {
        Ok((config.grid()?, config.angles()?, config.media_model()?))
    })?;
    let basis = timings.time(Stage::Basis, || build_basis(config.n, config.d, config.q))?;
    let table = basis.tabulate(&angles);
    let (clean, forward_stats) = timings.time(Stage::Forward, || {
        let sol = solve_forward(&media, &grid, &angles, config.forward_options())?;
        Ok((boundary_trace(&sol.radiance, &grid, &angles)?, sol.stats))
    })?;
    let truth = GridField::sample(&grid, |x, y| media.source(x, y));
    let (system, conditioning) = timings.time(Stage::Assembly, || {
        let nodes = assemble(&basis, &media, &grid)?;
        let cond = check_conditioning(&nodes);
        Ok((build_operator(&nodes, &grid, config.epsilon1, config.epsilon2)?, cond))
    })?;
    Ok(Prepared {
        config: config.clone(),
        grid,
        angles,
        basis,
        table,
        media,
        truth,
        clean,
        forward_stats,
        conditioning,
        system,
        timings,
    })
}

impl Prepared {
    /// Clean data perturbed with noise level `delta` and `seed`.
    pub fn noisy(&self, delta: f64, seed: u64) -> Result<BoundaryData> {
        apply_noise_with(&self.clean, delta, seed, self.config.noise_model).stage(Stage::Noise)
    }

    /// Quasi-reversibility solve, recovery, cleanup and metrics for `data`.
    pub fn reconstruct(&self, data: BoundaryData) -> Result<Reconstruction> {
        let mut timings = Timings::default();
        let cfg = &self.config;
        let (coefficients, solve_stats) = timings.time(Stage::Qrm, || {
            let mut system = self.system.clone();
            system.apply_boundary(&data, &self.table)?;
            solve(
                &system,
                &SolveOptions {
                    method: cfg.solver,
                    tol: cfg.qrm_tol,
                    max_iter: cfg.qrm_max_iter,
                    initial: None,
                },
            )
        })?;
        let f_comp = timings.time(Stage::Recover, || {
            recover_source(&coefficients, &self.basis, &self.media, &self.grid, &self.angles)
        })?;
        let estimate = timings.time(Stage::PostProcess, || {
            SourceEstimate::new(f_comp, &self.truth, &self.grid, &cfg.post)
        })?;
        Ok(Reconstruction {
            artifacts_raw: artifact_count(&estimate.f_comp, &self.truth),
            artifacts_post: artifact_count(&estimate.f_post, &self.truth),
            data,
            coefficients,
            solve_stats,
            estimate,
            timings,
        })
    }
}

/// Files written by a run plus the in-memory results.
pub struct RunReport {
    pub prepared: Prepared,
    pub reconstruction: Reconstruction,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, files: &mut Vec<PathBuf>, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    files.push(path.to_path_buf());
    Ok(())
}

/// Header of `metrics.csv`.
pub const METRICS_HEADER: &str = "preset,delta,seed,relative_l2,relative,centroid_offset,support_jaccard,artifacts_raw,artifacts_post,forward_iterations,forward_residual,qrm_iterations,qrm_residual";

fn metrics_row(p: &Prepared, r: &Reconstruction) -> String {
    let m = &r.estimate.metrics;
    let preset = match &p.config.media {
        crate::config::MediaSpec::Preset(p) => p.to_string(),
        crate::config::MediaSpec::Custom(_) => "custom".into(),
    };
    format!(
        "{preset},{},{},{:.16e},{},{:.16e},{:.16e},{},{},{},{:.16e},{},{:.16e}",
        p.config.delta,
        p.config.seed,
        m.relative_l2,
        m.relative,
        m.centroid_offset,
        m.support_jaccard,
        r.artifacts_raw,
        r.artifacts_post,
        p.forward_stats.iterations,
        p.forward_stats.residual,
        r.solve_stats.iterations,
        r.solve_stats.residual()
    )
}

/// Write every artifact of a finished run into `config.out_dir`.
pub fn write_artifacts(p: &Prepared, r: &Reconstruction) -> Result<Vec<PathBuf>> {
    let dir = &p.config.out_dir;
    let mut files = Vec::new();
    let inner = |files: &mut Vec<PathBuf>| -> Result<()> {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("config.txt"), files, |w| {
            Ok(w.write_all(p.config.to_text().as_bytes())?)
        })?;
        for (name, field) in [
            ("f_true", &p.truth),
            ("f_comp", &r.estimate.f_comp),
            ("f_post", &r.estimate.f_post),
        ] {
            for &fmt in &p.config.formats {
                let ext = match fmt {
                    GridFormat::Csv => "csv",
                    GridFormat::Pgm => "pgm",
                };
                let path = dir.join(format!("{name}.{ext}"));
                export_grid(field, &p.grid, &path, fmt)?;
                files.push(path);
            }
        }
        write_file(&dir.join("boundary.csv"), files, |w| {
            write_boundary_csv(&r.data, &p.grid, &p.angles, w)
        })?;
        write_file(&dir.join("qrm_stats.csv"), files, |w| Ok(r.solve_stats.write_csv(w)?))?;
        write_file(&dir.join("metrics.csv"), files, |w| {
            writeln!(w, "{METRICS_HEADER}")?;
            writeln!(w, "{}", metrics_row(p, r))?;
            Ok(())
        })?;
        if p.config.dump_operator {
            write_file(&dir.join("operator.csv"), files, |w| Ok(p.system.write_operator(w)?))?;
        }
        write_file(&dir.join("summary.txt"), files, |w| {
            Ok(w.write_all(summary(p, r).as_bytes())?)
        })?;
        Ok(())
    };
    inner(&mut files).stage(Stage::Output)?;
    Ok(files)
}

/// Human-readable run summary including timings.
pub fn summary(p: &Prepared, r: &Reconstruction) -> String {
    let m = &r.estimate.metrics;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "grid {}x{}, angles {}, basis order {}",
        p.grid.mx,
        p.grid.my,
        p.angles.m,
        p.basis.order()
    );
    let _ = writeln!(s, "noise delta {} seed {}", p.config.delta, p.config.seed);
    let _ = writeln!(
        s,
        "forward: {} sweeps, residual {:.3e}",
        p.forward_stats.iterations, p.forward_stats.residual
    );
    let _ = writeln!(
        s,
        "conditioning: min singular value of M_N+A {:.3e} at {:?}, {} flagged nodes",
        p.conditioning.min_singular,
        p.conditioning.argmin,
        p.conditioning.flagged.len()
    );
    let _ = writeln!(
        s,
        "qrm: {} unknowns, {} iterations, relative residual {:.3e}",
        r.solve_stats.dimension,
        r.solve_stats.iterations,
        r.solve_stats.residual()
    );
    let label = if m.relative { "relative_l2" } else { "absolute_l2" };
    let _ = writeln!(s, "{label} {:.6}", m.relative_l2);
    let _ = writeln!(s, "centroid_offset {:.6}", m.centroid_offset);
    let _ = writeln!(s, "support_jaccard {:.6}", m.support_jaccard);
    let _ = writeln!(s, "artifacts raw {} post {}", r.artifacts_raw, r.artifacts_post);
    for w in p.config.warnings() {
        let _ = writeln!(s, "warning: {w}");
    }
    for (stage, d) in p.timings.0.iter().chain(&r.timings.0) {
        let _ = writeln!(s, "time {stage} {:.3}s", d.as_secs_f64());
    }
    s
}

/// Full run with artifacts on disk.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    let prepared = prepare(config)?;
    let data = prepared.noisy(config.delta, config.seed)?;
    let reconstruction = prepared.reconstruct(data)?;
    let files = write_artifacts(&prepared, &reconstruction)?;
    Ok(RunReport {
        prepared,
        reconstruction,
        files,
    })
}
