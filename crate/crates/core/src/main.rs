use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rte_qrm::basis::build_basis;
use rte_qrm::carleman::{run_trials, Inequality};
use rte_qrm::config::{MediaSpec, RunConfig};
use rte_qrm::error::{Error, Result, Stage, StageExt};
use rte_qrm::forward::{boundary_trace, solve_forward, GridField};
use rte_qrm::io::{export_grid, read_boundary_csv, write_boundary_csv};
use rte_qrm::media::Preset;
use rte_qrm::pipeline::{prepare, run_pipeline, summary, write_artifacts};

#[derive(Parser)]
#[command(
    name = "rte-qrm",
    version,
    about = "Inverse source reconstruction for the 2-D stationary radiative transfer equation"
)]
struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Noise and trial seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Media preset: test1, test2 or test3.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the basis and write Psi, Psi' tables and M_N.
    Basis,
    /// Solve the forward problem and write boundary data and the true source.
    Forward,
    /// Reconstruct the source from a boundary data CSV.
    Reconstruct {
        /// Boundary data as written by `forward` or `pipeline`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Randomized checks of the discrete Carleman inequalities.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
    },
    /// Forward data, noise, reconstruction, metrics and artifacts.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = cli.preset {
        cfg.media = MediaSpec::Preset(p);
    }
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_basis(cfg: &RunConfig) -> Result<()> {
    let basis = build_basis(cfg.n, cfg.d, cfg.q).stage(Stage::Basis)?;
    let angles = cfg.angles().stage(Stage::Config)?;
    let write = || -> Result<()> {
        fs::create_dir_all(&cfg.out_dir)?;
        let mut w = create(&cfg.out_dir.join("basis.csv"))?;
        basis.write_csv(&angles, &mut w)?;
        w.flush()?;
        let mut w = create(&cfg.out_dir.join("m_n.csv"))?;
        for row in basis.m_n() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    };
    write().stage(Stage::Output)?;
    let gram = basis.gram();
    let mut orth = 0.0_f64;
    for (m, row) in gram.iter().enumerate() {
        for (n, g) in row.iter().enumerate() {
            orth = orth.max((g - if m == n { 1.0 } else { 0.0 }).abs());
        }
    }
    println!(
        "basis order {} on [-{d}, {d}], max orthonormality error {orth:.3e}",
        basis.order(),
        d = cfg.d
    );
    Ok(())
}

fn cmd_forward(cfg: &RunConfig) -> Result<()> {
    let grid = cfg.grid().stage(Stage::Config)?;
    let angles = cfg.angles().stage(Stage::Config)?;
    let media = cfg.media_model().stage(Stage::Config)?;
    let sol = solve_forward(&media, &grid, &angles, cfg.forward_options()).stage(Stage::Forward)?;
    let data = boundary_trace(&sol.radiance, &grid, &angles).stage(Stage::Forward)?;
    let truth = GridField::sample(&grid, |x, y| media.source(x, y));
    let write = || -> Result<()> {
        fs::create_dir_all(&cfg.out_dir)?;
        let mut w = create(&cfg.out_dir.join("boundary.csv"))?;
        write_boundary_csv(&data, &grid, &angles, &mut w)?;
        w.flush()?;
        for &fmt in &cfg.formats {
            let ext = match fmt {
                rte_qrm::config::GridFormat::Csv => "csv",
                rte_qrm::config::GridFormat::Pgm => "pgm",
            };
            export_grid(&truth, &grid, &cfg.out_dir.join(format!("f_true.{ext}")), fmt)?;
        }
        Ok(())
    };
    write().stage(Stage::Output)?;
    println!(
        "forward: {} sweeps, residual {:.3e}, boundary sup {:.6e}",
        sol.stats.iterations,
        sol.stats.residual,
        data.sup_norm()
    );
    Ok(())
}

fn cmd_reconstruct(cfg: &RunConfig, data: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    let file = File::open(data).map_err(|e| Error::Config(format!("cannot read {}: {e}", data.display())))?;
    let data = read_boundary_csv(BufReader::new(file), &prepared.grid, &prepared.angles).stage(Stage::Config)?;
    let rec = prepared.reconstruct(data)?;
    write_artifacts(&prepared, &rec)?;
    print!("{}", summary(&prepared, &rec));
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, trials: u64) -> Result<bool> {
    let mut ok = true;
    for which in [
        Inequality::SummationByParts,
        Inequality::Carleman,
        Inequality::Simplified,
    ] {
        let r = run_trials(which, trials, cfg.seed);
        println!(
            "{which}: {} trials, {} violations, min relative slack {:.3e}",
            r.trials, r.violations, r.min_slack
        );
        if let Some(c) = &r.counterexample {
            ok = false;
            fs::create_dir_all(&cfg.out_dir)
                .map_err(Error::from)
                .stage(Stage::Output)?;
            let path = cfg.out_dir.join(format!("counterexample_{which}.txt"));
            c.save(&path).stage(Stage::Output)?;
            println!("  counterexample written to {}", path.display());
        }
    }
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli).stage(Stage::Config)?;
    if let Ok(v) = std::env::var("RTE_QRM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("RTE_QRM_THREADS: cannot parse '{v}'")))
            .stage(Stage::Config)?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("RTE_QRM_THREADS: {e}")))
            .stage(Stage::Config)?;
    }
    match &cli.command {
        Command::Basis => cmd_basis(&cfg).map(|_| true),
        Command::Forward => cmd_forward(&cfg).map(|_| true),
        Command::Reconstruct { data } => cmd_reconstruct(&cfg, data).map(|_| true),
        Command::Verify { trials } => cmd_verify(&cfg, *trials),
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            print!("{}", summary(&report.prepared, &report.reconstruction));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
