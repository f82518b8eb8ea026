//! Command-line front end: runs the named experiments, writes their CSV
//! tables and gnuplot scripts, and exposes mesh/basis utilities for the
//! flow-aligned planar pair.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use ddmres::experiments::{exit_code_for, run_experiment, write_report, ExperimentSpec};
use ddmres::mesh::{flow_aligned_strip_mesh, TriMesh2D};
use ddmres::optimal_test::build_p1conf_basis;
use ddmres::{DdmresError, Result};

#[derive(Parser)]
#[command(
    name = "ddmres",
    version,
    about = "Dual-residual minimization experiments for transport in L^p",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a named experiment and write its tables under the output directory.
    Run(RunArgs),
    /// Planar mesh utilities.
    #[command(subcommand)]
    Mesh(MeshCmd),
    /// Test-basis utilities.
    #[command(subcommand)]
    Basis(BasisCmd),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment name: one of level_convergence, gibbs_ideal, gibbs_ddmres,
    /// jump_rates_1d, singular_refined, advect2d_smooth, advect2d_jump.
    experiment: String,
    /// Trial exponents, comma separated; empty keeps the experiment default.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    /// Trial mesh sizes, comma separated; empty keeps the experiment default.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Test-space degrees, comma separated; empty keeps the experiment default.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Refinement levels, comma separated; empty keeps the experiment default.
    #[arg(long, alias = "level", value_delimiter = ',')]
    levels: Vec<usize>,
    /// Mixed-solver convergence tolerance.
    #[arg(long)]
    newton_tol: Option<f64>,
    /// Mixed-solver iteration cap per continuation stage.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Directory for CSV tables and the gnuplot script.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// TOML file with the same fields as the flags; explicit flags override
    /// it, and the positional experiment name always wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MeshCmd {
    /// Generate a flow-aligned strip mesh and print or save its text form.
    Dump(MeshGenArgs),
    /// Validate the flow-aligned invariants of a mesh file.
    Check {
        /// Mesh file in the plain-text format produced by `mesh dump`.
        file: PathBuf,
    },
}

#[derive(Subcommand)]
enum BasisCmd {
    /// Tabulate the conforming planar test basis as per-element vertex values.
    Dump(MeshGenArgs),
}

#[derive(Args)]
struct MeshGenArgs {
    /// Number of flow strips.
    #[arg(long, default_value_t = 4)]
    strips: usize,
    /// Number of bands along each strip.
    #[arg(long, default_value_t = 4)]
    bands: usize,
    /// Seed for the strip-interface jitter.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Red-refinement sweeps applied after generation.
    #[arg(long, default_value_t = 0)]
    refine: usize,
    /// Output file; prints to standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = apply_thread_cap() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    // `mesh check` reports any invalid mesh as a validation failure, even
    // when the underlying error class would otherwise signal a solver issue.
    let (result, validation_only) = match cli.cmd {
        Cmd::Run(args) => (cmd_run(args), false),
        Cmd::Mesh(MeshCmd::Dump(args)) => (cmd_mesh_dump(args), false),
        Cmd::Mesh(MeshCmd::Check { file }) => (cmd_mesh_check(&file), true),
        Cmd::Basis(BasisCmd::Dump(args)) => (cmd_basis_dump(args), false),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if validation_only { 2 } else { exit_code_for(&e) };
            ExitCode::from(code.clamp(0, 255) as u8)
        }
    }
}

/// Honors `DDMRES_THREADS` by capping the global worker pool before any
/// parallel section runs.
fn apply_thread_cap() -> Result<()> {
    let Ok(raw) = std::env::var("DDMRES_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| {
            DdmresError::InvalidConfig(format!(
                "DDMRES_THREADS must be a positive integer, got '{raw}'"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| DdmresError::InvalidConfig(format!("thread pool setup failed: {e}")))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::from_toml_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentSpec::new(&args.experiment),
    };
    spec.name = args.experiment.clone();
    if !args.p.is_empty() {
        spec.p = args.p.clone();
    }
    if !args.n.is_empty() {
        spec.n = args.n.clone();
    }
    if !args.k.is_empty() {
        spec.k = args.k.clone();
    }
    if !args.levels.is_empty() {
        spec.levels = args.levels.clone();
    }
    if let Some(tol) = args.newton_tol {
        spec.newton_tol = tol;
    }
    if let Some(iters) = args.max_iters {
        spec.max_iters = iters;
    }
    let report = run_experiment(&spec)?;
    for table in &report.tables {
        println!(
            "{}: fitted slope {:.4} (R^2 {:.6}) over {} rows",
            table.label,
            table.fit.slope,
            table.fit.r_squared,
            table.rows.len()
        );
    }
    for (label, overshoot) in &report.overshoots {
        println!("overshoot {label}: {overshoot:.6e}");
    }
    if let Some(gap) = report.reference_gap {
        println!("reference gap: {gap:.6e}");
    }
    if let Some(defect) = report.max_orthogonality_defect {
        println!("max orthogonality defect: {defect:.3e}");
    }
    for path in write_report(&report, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn generated_mesh(args: &MeshGenArgs) -> Result<TriMesh2D> {
    let mut mesh = flow_aligned_strip_mesh(args.strips, args.bands, args.seed)?;
    for _ in 0..args.refine {
        mesh = mesh.red_refine();
    }
    Ok(mesh)
}

/// Writes `text` to the file when given, standard output otherwise.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_mesh_dump(args: MeshGenArgs) -> Result<()> {
    let mesh = generated_mesh(&args)?;
    emit(args.out.as_deref(), &mesh.to_text())
}

fn cmd_mesh_check(file: &Path) -> Result<()> {
    let mesh = TriMesh2D::from_text(&std::fs::read_to_string(file)?)?;
    let classes = mesh.classify_faces()?;
    mesh.verify_flow_aligned(&classes)?;
    let order = mesh.flow_order(&classes)?;
    println!(
        "ok: {} vertices, {} triangles, flow-aligned, transport order covers {} triangles",
        mesh.num_vertices(),
        mesh.num_triangles(),
        order.order.len()
    );
    Ok(())
}

fn cmd_basis_dump(args: MeshGenArgs) -> Result<()> {
    let mesh = Arc::new(generated_mesh(&args)?);
    let space = build_p1conf_basis(&mesh)?;
    let mut text = String::from("# ddmres v1\nelement,dof,v1,v2,v3\n");
    for t in 0..mesh.num_triangles() {
        for (dof, values) in space.element_dofs(t) {
            text.push_str(&format!(
                "{t},{dof},{:.16e},{:.16e},{:.16e}\n",
                values[0], values[1], values[2]
            ));
        }
    }
    emit(args.out.as_deref(), &text)
}
