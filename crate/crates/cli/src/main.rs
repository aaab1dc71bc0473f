//! `pdgs`: mesh generation, FEM oracle solves, training, inference and
//! verification utilities for physics-driven GraphSAGE.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pdgs_core::case::{CaseConfig, CaseSetup};
use pdgs_core::fem::fem_solve_dirichlet;
use pdgs_core::grf::{grf_sample, ExponentMode, GrfConfig};
use pdgs_core::mesh::{
    describe, generate_grid_with_centers, generate_rectangle, generate_slit_square, refine_toward, refine_uniform,
    BBox, Mesh, Point,
};
use pdgs_core::model::{node_features, Architecture, MappingSpec, Model, ModelConfig};
use pdgs_core::physics::{quadrature_residual, relative_l2, write_solution_csv, write_solution_vtk, ResidualSystem};
use pdgs_core::training::{
    evaluate, gradient_audit, predict_batch, predict_solution, train_nonparametric, train_parametric, Sample,
    TrainHistory,
};
use pdgs_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "pdgs", version, about = "Physics-driven GraphSAGE PDE solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, refine or describe meshes.
    #[command(subcommand)]
    Mesh(MeshCommand),
    /// Solve a case with FEM and export the solution.
    Oracle(OracleArgs),
    /// Train a model for a case (parametric when the source is `grf`).
    Train(TrainArgs),
    /// Run a trained model on source vectors.
    Infer(InferArgs),
    /// Gaussian random fields.
    #[command(subcommand)]
    Grf(GrfCommand),
    /// Finite-difference audit of the full-model loss gradient.
    Gradcheck(GradcheckArgs),
    /// Compare matrix-form and quadrature-form residuals.
    ResidualCheck(ResidualCheckArgs),
    /// Train over a grid of mapping settings.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Generate a structured mesh.
    Gen(MeshGenArgs),
    /// Refine a mesh uniformly or around a point.
    Refine(MeshRefineArgs),
    /// Print mesh statistics.
    Info(MeshInfoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MeshKind {
    Rectangle,
    Slit,
    GridCenters,
}

#[derive(Args)]
struct MeshGenArgs {
    #[arg(long, value_enum)]
    kind: MeshKind,
    #[arg(long, default_value_t = 8)]
    nx: usize,
    #[arg(long, default_value_t = 8)]
    ny: usize,
    /// Lower-left corner `x,y`.
    #[arg(long, value_parser = parse_point, default_value = "0,0")]
    min: Point,
    /// Upper-right corner `x,y`.
    #[arg(long, value_parser = parse_point, default_value = "1,1")]
    max: Point,
    /// Cells per side of the slit square (even).
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Boundary cell layers without centre nodes (grid-centers).
    #[arg(long, default_value_t = 1)]
    inset: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MeshRefineArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Uniform refinement levels.
    #[arg(long, default_value_t = 0)]
    uniform: usize,
    /// Refine triangles within `radius` of this point.
    #[arg(long, value_parser = parse_point, requires = "radius")]
    center: Option<Point>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MeshInfoArgs {
    /// Mesh JSON or Gmsh file.
    #[arg(long, conflicts_with = "config")]
    mesh: Option<PathBuf>,
    /// Case config whose mesh to describe.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Source vectors for parametric cases (one row per sample).
    #[arg(long)]
    mu: Option<PathBuf>,
    /// Also solve on the configured reference mesh.
    #[arg(long)]
    reference: bool,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Seed for model initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(long)]
    val_every: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut CaseConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(t) = self.max_seconds {
            cfg.train.max_seconds = Some(t);
        }
        if let Some(v) = self.val_every {
            cfg.train.val_every = v;
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Source vectors, one row per sample (parametric models).
    #[arg(long)]
    mu: Option<PathBuf>,
    /// Case config; defaults to `case.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `infer/` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write VTK files.
    #[arg(long)]
    vtk: bool,
}

#[derive(Subcommand)]
enum GrfCommand {
    /// Sample fields on the periodic grid, or at case mesh nodes.
    Gen(GrfGenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PaperLiteral,
    SmoothnessMonotone,
}

#[derive(Args)]
struct GrfGenArgs {
    #[arg(long, default_value_t = 6.0)]
    r: f64,
    #[arg(long, default_value_t = 64)]
    grid_n: usize,
    #[arg(long, value_enum, default_value = "smoothness-monotone")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample at the nodes of this case's mesh instead of the grid.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of node samples (with `--config`).
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Architecture to audit; defaults to a narrow copy of the case's.
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct ResidualCheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum KindArg {
    Gamma1,
    Gamma2,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gamma2")]
    kinds: Vec<KindArg>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    sigmas: Vec<f64>,
    /// Mapped widths; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_point(s: &str) -> std::result::Result<Point, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected `x,y`, got `{s}`"));
    }
    let x = parts[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let y = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok([x, y])
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = check_threads().and_then(|()| run(cli.command));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}

/// `PDGS_THREADS` must be a positive integer. Kernels run on one thread,
/// so any valid value gives the same, bit-reproducible results.
fn check_threads() -> Result<()> {
    match std::env::var("PDGS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::InvalidArgument(format!("PDGS_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Mesh(MeshCommand::Gen(a)) => mesh_gen(a),
        Command::Mesh(MeshCommand::Refine(a)) => mesh_refine(a),
        Command::Mesh(MeshCommand::Info(a)) => mesh_info(a),
        Command::Oracle(a) => oracle(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Grf(GrfCommand::Gen(a)) => grf_gen(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ResidualCheck(a) => residual_check(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_mesh(path: &Path) -> Result<Mesh> {
    if path.extension().is_some_and(|e| e == "msh") {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Mesh::from_msh(&text)
    } else {
        Mesh::load(path)
    }
}

fn mesh_gen(a: MeshGenArgs) -> Result<u8> {
    let bbox = BBox::new(a.min, a.max)?;
    let mesh = match a.kind {
        MeshKind::Rectangle => generate_rectangle(a.nx, a.ny, bbox)?,
        MeshKind::Slit => generate_slit_square(a.n, 1.0)?,
        MeshKind::GridCenters => generate_grid_with_centers(a.nx, a.ny, bbox, a.inset)?,
    };
    mesh.save(&a.out)?;
    print_mesh_info(&mesh);
    Ok(0)
}

fn mesh_refine(a: MeshRefineArgs) -> Result<u8> {
    let mut mesh = read_mesh(&a.mesh)?;
    if let (Some(c), Some(r)) = (a.center, a.radius) {
        mesh = refine_toward(&mesh, c, r, a.levels)?;
    }
    for _ in 0..a.uniform {
        mesh = refine_uniform(&mesh)?;
    }
    mesh.save(&a.out)?;
    print_mesh_info(&mesh);
    Ok(0)
}

fn mesh_info(a: MeshInfoArgs) -> Result<u8> {
    match (a.mesh, a.config) {
        (Some(path), _) => print_mesh_info(&read_mesh(&path)?),
        (None, Some(path)) => {
            let cfg = CaseConfig::load(&path)?;
            let space = cfg.build_space()?;
            print_mesh_info(space.mesh());
            println!("p2_nodes {}", space.num_nodes());
            println!("dirichlet_nodes {}", space.dirichlet_nodes().len());
            println!("interior_nodes {}", space.num_interior());
        }
        (None, None) => return Err(Error::InvalidArgument("give --mesh or --config".into())),
    }
    Ok(0)
}

fn print_mesh_info(mesh: &Mesh) {
    for (k, v) in describe(mesh) {
        println!("{k} {v}");
    }
}

/// Rows of a μ CSV: one sample per row, one value per node. A non-numeric
/// first row is treated as a header.
fn read_mu_csv(path: &Path, nodes: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if row.len() != nodes {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("{}: {} values, the mesh has {nodes} nodes", path.display(), row.len()),
                    });
                }
                rows.push(row);
            }
            Err(_) if i == 0 => {}
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("{}: {e}", path.display()),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: format!("{}: no source rows", path.display()),
        });
    }
    Ok(rows)
}

fn mu_csv(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn oracle(a: OracleArgs) -> Result<u8> {
    let cfg = CaseConfig::load(&a.config)?;
    let setup = cfg.setup()?;
    create_dir(&a.out)?;
    if cfg.is_parametric() {
        let mus = match &a.mu {
            Some(p) => read_mu_csv(p, setup.space.num_nodes())?,
            None => setup.grf_sources(None, 1, cfg.dataset.map_or(0, |d| d.seed))?,
        };
        for (i, mu) in mus.iter().enumerate() {
            let t = Instant::now();
            let u = fem_solve_dirichlet(&setup.space, &cfg.coefficients(Some(mu))?)?;
            println!("sample {i}: FEM solve {:.3e}s", t.elapsed().as_secs_f64());
            write_solution_csv(a.out.join(format!("oracle_{i}.csv")), &setup.space, &u)?;
            write_solution_vtk(a.out.join(format!("oracle_{i}.vtk")), &setup.space, &u)?;
        }
        return Ok(0);
    }
    let t = Instant::now();
    let u = fem_solve_dirichlet(&setup.space, &setup.coeffs)?;
    println!("FEM solve on {} nodes: {:.3e}s", setup.space.num_nodes(), t.elapsed().as_secs_f64());
    write_solution_csv(a.out.join("oracle.csv"), &setup.space, &u)?;
    write_solution_vtk(a.out.join("oracle.vtk"), &setup.space, &u)?;
    if a.reference {
        if let Some(reference) = setup.reference_solution()? {
            println!("same-mesh FEM vs reference: rel L2 {:.4e}", relative_l2(&u, &reference)?);
            write_solution_csv(a.out.join("reference.csv"), &setup.space, &reference)?;
        }
    }
    Ok(0)
}

fn save_run(dir: &Path, cfg: &CaseConfig, model: &Model, history: &TrainHistory) -> Result<()> {
    model.save(dir.join("best.json"))?;
    history.write_csv(dir.join("history.csv"))?;
    let mut saved = cfg.clone();
    // mesh files are resolved relative to the original config
    if let pdgs_core::case::MeshSource::File { path } = &mut saved.mesh.source {
        *path = fs::canonicalize(cfg.base_dir.join(&*path)).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    write_text(&dir.join("case.json"), &saved.to_json())
}

fn report_history(history: &TrainHistory) {
    let epochs = history.records.last().map_or(0, |r| r.epoch);
    let seconds = history.records.last().map_or(0.0, |r| r.seconds);
    println!("epochs {epochs} in {seconds:.1}s, stop: {}", history.stop_reason);
    if let (Some(e), Some(v)) = (history.best_epoch, history.best_val) {
        println!("best validation rel L2 {v:.4e} at epoch {e}");
    }
}

fn train(a: TrainArgs) -> Result<u8> {
    let mut cfg = CaseConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg)?;
    let setup = cfg.setup()?;
    create_dir(&a.out)?;
    let model = Model::init(cfg.model.clone())?;
    println!("{}: {} nodes, {} parameters", cfg.name, setup.space.num_nodes(), model.num_params());
    if cfg.is_parametric() {
        train_parametric_case(&cfg, &setup, model, &a.out)
    } else {
        let problem = setup.problem()?;
        let (model, history) = train_nonparametric(model, &problem, &cfg.train)?;
        report_history(&history);
        save_run(&a.out, &cfg, &model, &history)?;
        let features = node_features(setup.topology(), &[])?;
        let u = predict_solution(&model, &setup.ctx, &setup.system, &features)?;
        if let Some(reference) = &problem.reference {
            println!("final rel L2 {:.4e}", relative_l2(&u, reference)?);
        }
        write_solution_csv(a.out.join("solution.csv"), &setup.space, &u)?;
        write_solution_vtk(a.out.join("solution.vtk"), &setup.space, &u)?;
        Ok(0)
    }
}

fn train_parametric_case(cfg: &CaseConfig, setup: &CaseSetup, model: Model, out: &Path) -> Result<u8> {
    let [train, val, test] = setup.dataset_splits(None)?;
    println!("samples: {} train, {} val, {} test", train.len(), val.len(), test.len());
    let (model, history) = train_parametric(model, &setup.ctx, &train, &val, &cfg.train)?;
    report_history(&history);
    save_run(out, cfg, &model, &history)?;
    let mus: Vec<Vec<f64>> = test.iter().map(|s| s.mu.clone()).collect();
    write_text(&out.join("test_sources.csv"), &mu_csv(&mus))?;
    if test.is_empty() {
        return Ok(0);
    }
    let eval = evaluate(&model, &setup.ctx, &setup.space, &test)?;
    println!(
        "test rel L2 mean {:.4e} (min {:.4e}, max {:.4e})",
        eval.mean, eval.min, eval.max
    );
    println!(
        "inference {:.3e}s vs FEM {:.3e}s per sample (FEM/inference {:.3})",
        eval.infer_seconds,
        eval.fem_seconds,
        eval.speedup()
    );
    let mut csv = String::from("sample,rel_l2\n");
    for (i, e) in eval.per_sample.iter().enumerate() {
        writeln!(csv, "{i},{e:e}").unwrap();
    }
    write_text(&out.join("test_errors.csv"), &csv)?;
    let u = predict_batch(&model, &setup.ctx, &[&test[0]])?.pop().unwrap();
    write_solution_csv(out.join("solution.csv"), &setup.space, &u)?;
    write_solution_vtk(out.join("solution.vtk"), &setup.space, &u)?;
    Ok(0)
}

fn infer(a: InferArgs) -> Result<u8> {
    let model_dir = a.model.parent().map(Path::to_path_buf).unwrap_or_default();
    let config_path = a.config.clone().unwrap_or_else(|| model_dir.join("case.json"));
    let cfg = CaseConfig::load(&config_path)?;
    let model = Model::load(&a.model)?;
    if model.config().input_width() != cfg.model.input_width() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint takes {} input features, case {} takes {}",
            model.config().input_width(),
            cfg.name,
            cfg.model.input_width()
        )));
    }
    let setup = cfg.setup()?;
    let out = a.out.clone().unwrap_or_else(|| model_dir.join("infer"));
    create_dir(&out)?;
    let n = setup.space.num_nodes();
    let solutions: Vec<(Vec<f64>, f64)> = if cfg.is_parametric() {
        let path = a
            .mu
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("parametric models need --mu".into()))?;
        let mus = read_mu_csv(path, n)?;
        let samples: Vec<Sample> = setup.samples(mus, false)?;
        samples
            .iter()
            .map(|s| {
                let t = Instant::now();
                let u = predict_batch(&model, &setup.ctx, &[s])?.pop().unwrap();
                Ok((u, t.elapsed().as_secs_f64()))
            })
            .collect::<Result<_>>()?
    } else {
        let t = Instant::now();
        let features = node_features(setup.topology(), &[])?;
        let u = predict_solution(&model, &setup.ctx, &setup.system, &features)?;
        vec![(u, t.elapsed().as_secs_f64())]
    };
    for (i, (u, secs)) in solutions.iter().enumerate() {
        println!("sample {i}: {secs:.3e}s");
        write_solution_csv(out.join(format!("solution_{i}.csv")), &setup.space, u)?;
        if a.vtk {
            write_solution_vtk(out.join(format!("solution_{i}.vtk")), &setup.space, u)?;
        }
    }
    let mean = solutions.iter().map(|s| s.1).sum::<f64>() / solutions.len() as f64;
    println!("{} solutions, mean inference {mean:.3e}s per sample", solutions.len());
    Ok(0)
}

fn grf_gen(a: GrfGenArgs) -> Result<u8> {
    let grf = GrfConfig {
        r: a.r,
        grid_n: a.grid_n,
        exponent_mode: match a.mode {
            ModeArg::PaperLiteral => ExponentMode::PaperLiteral,
            ModeArg::SmoothnessMonotone => ExponentMode::SmoothnessMonotone,
        },
        amplitude: a.amplitude,
        seed: a.seed,
    };
    grf.validate()?;
    match &a.config {
        None => {
            let field = grf_sample(&grf, a.seed)?;
            write_text(&a.out, &field.to_csv())?;
            println!("{0}x{0} field written to {1}", grf.grid_n, a.out.display());
        }
        Some(path) => {
            let mut cfg = CaseConfig::load(path)?;
            cfg.grf = Some(grf);
            let setup = cfg.setup()?;
            let mus = setup.grf_sources(None, a.count, a.seed)?;
            write_text(&a.out, &mu_csv(&mus))?;
            println!("{} samples at {} nodes written to {}", mus.len(), setup.space.num_nodes(), a.out.display());
        }
    }
    Ok(0)
}

/// Narrow architecture with the case's input and mapping layout.
fn narrow_arch(cfg: &ModelConfig) -> Result<Architecture> {
    let q = cfg.input_width();
    let text = match cfg.mapping {
        MappingSpec::None => format!("{q}+8x2+1"),
        _ => format!("{q}+{}+8x2+1", 4 * q),
    };
    text.parse()
}

fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let cfg = CaseConfig::load(&a.config)?;
    let setup = cfg.setup()?;
    let mut mc = cfg.model.clone();
    mc.architecture = match a.arch {
        Some(arch) => arch,
        None => narrow_arch(&cfg.model)?,
    };
    let model = Model::init(mc)?;
    let (features, systems) = if cfg.is_parametric() {
        let mus = setup.grf_sources(None, 2, cfg.dataset.map_or(0, |d| d.seed))?;
        let samples = setup.samples(mus, false)?;
        let refs: Vec<&[f64]> = samples.iter().map(|s| &s.mu[..]).collect();
        let systems: Vec<Arc<ResidualSystem>> = samples.iter().map(|s| s.system.clone()).collect();
        (node_features(setup.topology(), &refs)?, systems)
    } else {
        (node_features(setup.topology(), &[])?, vec![setup.system.clone()])
    };
    println!(
        "auditing {} parameters ({}) on {} nodes",
        model.num_params(),
        model.config().architecture,
        setup.space.num_nodes()
    );
    let report = gradient_audit(&model, &setup.ctx, &features, &systems, a.h)?;
    println!(
        "max rel err {:.3e} (worst tensor {}), {} entries",
        report.max_rel_err,
        model.param_names()[report.worst_tensor],
        report.entries_checked
    );
    Ok(if report.max_rel_err <= a.tol { 0 } else { EXIT_NUMERICAL })
}

fn residual_check(a: ResidualCheckArgs) -> Result<u8> {
    let cfg = CaseConfig::load(&a.config)?;
    let setup = cfg.setup()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst = 0.0f64;
    let sources = if cfg.is_parametric() {
        setup.grf_sources(None, a.trials, a.seed)?
    } else {
        Vec::new()
    };
    for trial in 0..a.trials {
        let (coeffs, system) = match sources.get(trial) {
            Some(mu) => {
                let c = cfg.coefficients(Some(mu))?;
                let s = setup.system.with_load(&setup.space, &c)?;
                (c, Arc::new(s))
            }
            None => (setup.coeffs.clone(), setup.system.clone()),
        };
        let f: Vec<f64> = (0..system.num_interior()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r_matrix = system.residual_vector(&f)?;
        let m = system.assemble_full_solution(&f)?;
        let r_quad = quadrature_residual(&setup.space, &coeffs, &m)?;
        let scale = r_quad.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let diff = r_matrix.iter().zip(&r_quad).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
    }
    println!("{} trials on {} nodes: max rel diff {worst:.3e}", a.trials, setup.space.num_nodes());
    Ok(if worst <= a.tol { 0 } else { EXIT_NUMERICAL })
}

fn sweep(a: SweepArgs) -> Result<u8> {
    let mut base = CaseConfig::load(&a.config)?;
    a.overrides.apply(&mut base)?;
    if base.is_parametric() {
        return Err(Error::InvalidArgument("sweep supports non-parametric cases".into()));
    }
    let default_width = base.model.architecture.widths().get(1).copied().unwrap_or(40);
    let widths = if a.widths.is_empty() { vec![default_width] } else { a.widths.clone() };
    let setup = base.setup()?;
    let problem = setup.problem()?;
    create_dir(&a.out)?;
    let mut csv = String::from("mapping,sigma,width,best_rel_l2,best_epoch,epochs\n");
    for &kind in &a.kinds {
        for &sigma in &a.sigmas {
            for &width in &widths {
                let mut cfg = base.clone();
                let mut w = cfg.model.architecture.widths().to_vec();
                if matches!(cfg.model.mapping, MappingSpec::None) {
                    w.insert(1, width);
                } else {
                    w[1] = width;
                }
                cfg.model.architecture = Architecture::new(w)?;
                cfg.model.mapping = match kind {
                    KindArg::Gamma1 => MappingSpec::Gamma1 { sigma },
                    KindArg::Gamma2 => MappingSpec::Gamma2 { sigma },
                };
                let label = format!("{}_s{sigma}_m{width}", if kind == KindArg::Gamma1 { "gamma1" } else { "gamma2" });
                cfg.model.validate()?;
                let model = Model::init(cfg.model.clone())?;
                let (_, history) = train_nonparametric(model, &problem, &cfg.train)?;
                let epochs = history.records.last().map_or(0, |r| r.epoch);
                println!(
                    "{label}: best rel L2 {:.4e} at epoch {} of {epochs}",
                    history.best_val.unwrap_or(f64::NAN),
                    history.best_epoch.unwrap_or(0)
                );
                history.write_csv(a.out.join(format!("history_{label}.csv")))?;
                writeln!(
                    csv,
                    "{},{sigma},{width},{:e},{},{epochs}",
                    if kind == KindArg::Gamma1 { "gamma1" } else { "gamma2" },
                    history.best_val.unwrap_or(f64::NAN),
                    history.best_epoch.unwrap_or(0)
                )
                .unwrap();
            }
        }
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    Ok(0)
}
