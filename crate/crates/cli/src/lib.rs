//! Command implementations behind the `eqgap` binary: scenario generation,
//! registration, evaluation and beta sweeps. The functions here are called
//! both by `main` and in-process by the acceptance suite.

pub mod config;
pub mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use eqgap::engine::{
    normalize_coords, register, write_history_csv, CoordMap, EngineError, Regularizer,
};
use eqgap::eval::{
    cumulative_tre, jacobian_audit, percent_error, tre_snap, warp_grid_export, write_cumulative_csv,
};
use eqgap::field::{read_eqgf, sample_field, write_eqgf, AnyGrid, ControlGrid};
use eqgap::image::{load_landmarks, load_metaimage, Image, Mask};
use eqgap::loss::LossError;
use eqgap::synth::{export_scenario, generate_scenario, load_ground_truth, ScenarioOptions, SynthError};

use config::{parse_config, RunConfig};
use manifest::{hash_file, write_manifest, InputRecord, Manifest};

#[derive(Debug, Error)]
pub enum CliError {
    /// Usage, configuration, parsing or IO problems (exit code 2).
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    /// Numerical failures: non-convergence, invertibility gate (exit code 1).
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 1,
        }
    }
}

fn engine_err(e: EngineError) -> CliError {
    match &e {
        EngineError::Config(_) | EngineError::Image(_) | EngineError::Field(_) => {
            CliError::Config(e.to_string())
        }
        EngineError::Loss(LossError::InvalidBeta { .. }) => CliError::Config(e.to_string()),
        EngineError::Loss(_) | EngineError::Mechanics(_) => CliError::Numerical(e.to_string()),
        EngineError::Io(_) => CliError::Io(e.to_string()),
    }
}

fn synth_err(e: SynthError) -> CliError {
    match &e {
        SynthError::NonConvergence { .. }
        | SynthError::AllDrawsRejected { .. }
        | SynthError::NonPositiveJacobian { .. }
        | SynthError::LinearSolve(_) => CliError::Numerical(e.to_string()),
        _ => CliError::Io(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "eqgap",
    about = "Deformable registration with a pointwise equilibrium-gap regularizer",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic hyperelastic benchmark scenarios.
    Synth(SynthArgs),
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Evaluate an estimated field.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run registrations over a list of betas and regularizers.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Seed list: "4", "1,2,5" or an inclusive range "1..3".
    #[arg(long)]
    pub seed: String,
    /// Output directory (one scenario subdirectory per seed).
    #[arg(long)]
    pub out: PathBuf,
    /// Canvas resolution in pixels per side.
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    /// Elements per side of the FE mesh.
    #[arg(long, default_value_t = 120)]
    pub elements: usize,
    /// Element order: 1 (bilinear) or 2 (biquadratic).
    #[arg(long, default_value_t = 1)]
    pub order: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    /// Fixed image (.mhd).
    #[arg(long)]
    pub fixed: PathBuf,
    /// Moving image (.mhd).
    #[arg(long)]
    pub moving: PathBuf,
    /// Optional sampling-region mask (MET_UCHAR .mhd, fixed-image geometry).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Run configuration file (key = value lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Snap-to-voxel target registration error against paired landmarks.
    Tre(TreArgs),
    /// Percent-of-unit-length error against synthetic ground truth.
    Percent(PercentArgs),
    /// Export a forward-warped uniform grid as CSV polylines.
    Grid(GridArgs),
    /// Jacobian validity audit of the estimated transformation.
    Audit(AuditArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TreArgs {
    /// Estimated field (.eqgf).
    #[arg(long)]
    pub field: PathBuf,
    /// Fixed image that defined the registration geometry.
    #[arg(long)]
    pub fixed: PathBuf,
    /// Fixed-image landmarks (1-based voxel indices).
    #[arg(long)]
    pub fixed_landmarks: PathBuf,
    /// Moving-image landmarks (1-based voxel indices).
    #[arg(long)]
    pub moving_landmarks: PathBuf,
    /// Output directory for tre.csv and cumulative.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PercentArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Ground-truth CSV (x,y,ux,uy rows) from the synth generator.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub rows: usize,
    #[arg(long, default_value_t = 20)]
    pub cols: usize,
    /// Samples per grid-cell segment.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Audit lattice resolution per axis (default 256 in 2D, 64 in 3D).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Exit nonzero when any audited J <= 0 (acceptance gate).
    #[arg(long, default_value_t = false)]
    pub gate: bool,
    /// Optional output directory for audit.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated beta list, e.g. 0,0.001,0.01,0.1,0.5,0.9.
    #[arg(long)]
    pub betas: String,
    /// Comma-separated regularizers from {physics, bending}.
    #[arg(long, default_value = "physics,bending")]
    pub regularizers: String,
    /// Synthetic ground-truth CSV; enables percent-error summary columns.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Landmark pair; enables TRE summary columns.
    #[arg(long)]
    pub fixed_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub moving_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse "4", "1,2,5" or "1..3" (inclusive).
pub fn parse_seed_spec(spec: &str) -> Result<Vec<u64>, CliError> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad seed range start '{a}'")))?;
        let hi: u64 = b
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad seed range end '{b}'")))?;
        if hi < lo {
            return Err(CliError::Config(format!("empty seed range {lo}..{hi}")));
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("bad seed '{s}'")))
        })
        .collect()
}

/// Number of dimensions declared in a MetaImage header.
pub fn sniff_ndims(path: &Path) -> Result<usize, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "NDims" {
                return v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad NDims in {}", path.display())));
            }
        }
    }
    Err(CliError::Config(format!(
        "missing NDims in {}",
        path.display()
    )))
}

pub fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let seeds = parse_seed_spec(&args.seed)?;
    if args.order != 1 && args.order != 2 {
        return Err(CliError::Config(format!("order must be 1 or 2, got {}", args.order)));
    }
    let opts = ScenarioOptions {
        elements: args.elements,
        order: args.order,
        resolution: args.resolution,
        ..ScenarioOptions::default()
    };
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;

    let started = Instant::now();
    let results: Vec<Result<(u64, usize), CliError>> = seeds
        .par_iter()
        .map(|&seed| {
            let scenario = generate_scenario(seed, &opts).map_err(synth_err)?;
            let dir = args.out.join(format!("scenario_{seed:03}"));
            export_scenario(&scenario, &dir).map_err(synth_err)?;
            log::info!(
                "scenario {seed}: {} attempts, residual {:e}",
                scenario.attempts,
                scenario.solution.final_residual
            );
            Ok((seed, scenario.attempts))
        })
        .collect();

    let mut outputs = Vec::new();
    let mut attempts_total = 0usize;
    for r in results {
        let (seed, attempts) = r?;
        outputs.push(format!("scenario_{seed:03}"));
        attempts_total += attempts;
    }

    write_manifest(
        &args.out,
        &Manifest {
            command: "synth".into(),
            config: serde_json::json!({
                "resolution": opts.resolution,
                "elements": opts.elements,
                "order": opts.order,
            }),
            seeds,
            inputs: Vec::new(),
            outputs,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            diagnostics: serde_json::json!({ "total_draw_attempts": attempts_total }),
        },
    )?;
    Ok(())
}

/// Everything a finished registration leaves on disk, plus in-memory
/// handles the sweep uses for metrics.
pub struct RegisterOutput<const D: usize> {
    pub grid: ControlGrid<D>,
    pub map: CoordMap<D>,
    pub final_total: f64,
}

fn load_image<const D: usize>(path: &Path) -> Result<Image<D>, CliError> {
    load_metaimage::<D>(path).map_err(|e| CliError::Config(e.to_string()))
}

fn register_typed<const D: usize>(
    fixed_path: &Path,
    moving_path: &Path,
    mask_path: Option<&Path>,
    config_path: Option<&Path>,
    run_cfg: &RunConfig,
    out_dir: &Path,
    command: &str,
) -> Result<RegisterOutput<D>, CliError>
where
    eqgap::mechanics::Kinematics<f64, D>: eqgap::mechanics::GapSensitivities<D>,
{
    let started = Instant::now();
    let fixed = load_image::<D>(fixed_path)?;
    let moving = load_image::<D>(moving_path)?;
    let mask = match mask_path {
        Some(p) => {
            let img = load_image::<D>(p)?;
            Some(Mask::from_image(&img).map_err(|e| CliError::Config(e.to_string()))?)
        }
        None => None,
    };

    let result = register(&fixed, &moving, mask.as_ref(), &run_cfg.engine).map_err(engine_err)?;

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    write_eqgf(&result.grid, &out_dir.join("field.eqgf"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_history_csv(&out_dir.join("history.csv"), &result.history)
        .map_err(|e| CliError::Io(e.to_string()))?;

    let mut inputs = vec![hash_file(fixed_path)?, hash_file(moving_path)?];
    if let Some(p) = mask_path {
        inputs.push(hash_file(p)?);
    }
    if let Some(p) = config_path {
        inputs.push(hash_file(p)?);
    }
    let d = &result.diagnostics;
    write_manifest(
        out_dir,
        &Manifest {
            command: command.into(),
            config: serde_json::to_value(run_cfg.snapshot()).unwrap(),
            seeds: vec![run_cfg.engine.seed],
            inputs,
            outputs: vec!["field.eqgf".into(), "history.csv".into()],
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            diagnostics: serde_json::json!({
                "sim_evals": d.sim_evals,
                "reg_evals": d.reg_evals,
                "moving_samples": d.moving_samples,
                "clamped_samples": d.clamped_samples,
                "barrier_points": d.barrier_points,
            }),
        },
    )?;

    let final_total = result.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok(RegisterOutput {
        grid: result.grid,
        map: result.map,
        final_total,
    })
}

pub fn run_register(args: &RegisterArgs) -> Result<(), CliError> {
    let run_cfg = parse_config(&args.config)?;
    match sniff_ndims(&args.fixed)? {
        2 => {
            register_typed::<2>(
                &args.fixed,
                &args.moving,
                args.mask.as_deref(),
                Some(&args.config),
                &run_cfg,
                &args.out,
                "register",
            )?;
        }
        3 => {
            register_typed::<3>(
                &args.fixed,
                &args.moving,
                args.mask.as_deref(),
                Some(&args.config),
                &run_cfg,
                &args.out,
                "register",
            )?;
        }
        n => return Err(CliError::Config(format!("unsupported NDims {n}"))),
    }
    Ok(())
}

fn load_grid_2d(path: &Path) -> Result<ControlGrid<2>, CliError> {
    match read_eqgf(path).map_err(|e| CliError::Config(e.to_string()))? {
        AnyGrid::D2(g) => Ok(g),
        AnyGrid::D3(_) => Err(CliError::Config(format!(
            "{} is a 3D field; this evaluation needs 2D",
            path.display()
        ))),
    }
}

pub fn run_eval(cmd: &EvalCommand) -> Result<(), CliError> {
    match cmd {
        EvalCommand::Tre(args) => run_eval_tre(args),
        EvalCommand::Percent(args) => run_eval_percent(args),
        EvalCommand::Grid(args) => run_eval_grid(args),
        EvalCommand::Audit(args) => run_eval_audit(args).map(|_| ()),
    }
}

fn eval_tre_typed<const D: usize>(args: &TreArgs) -> Result<(), CliError> {
    let fixed = load_image::<D>(&args.fixed)?;
    let grid = match read_eqgf(&args.field).map_err(|e| CliError::Config(e.to_string()))? {
        AnyGrid::D2(g) if D == 2 => AnyGridTyped::<D>::from2(g).0,
        AnyGrid::D3(g) if D == 3 => AnyGridTyped::<D>::from3(g).0,
        _ => return Err(CliError::Config("field/image dimension mismatch".into())),
    };
    let fixed_lms = load_landmarks::<D>(&args.fixed_landmarks, fixed.dims)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let moving_lms = load_landmarks::<D>(&args.moving_landmarks, fixed.dims)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let map = normalize_coords(&fixed);
    let report = tre_snap(&fixed_lms, &moving_lms, &grid, &map, &fixed)
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;
    let mut text = String::from("landmark,tre_mm,tre_unsnapped_mm\n");
    for (i, (s, u)) in report.tre.iter().zip(&report.tre_unsnapped).enumerate() {
        let _ = writeln!(text, "{i},{s},{u}");
    }
    let _ = writeln!(text, "mean,{},", report.mean);
    let _ = writeln!(text, "std,{},", report.std);
    fs::write(args.out.join("tre.csv"), text).map_err(|e| CliError::Io(e.to_string()))?;
    write_cumulative_csv(&args.out.join("cumulative.csv"), &cumulative_tre(&report))
        .map_err(|e| CliError::Io(e.to_string()))?;
    println!("TRE mean {:.3} mm (std {:.3} mm)", report.mean, report.std);
    Ok(())
}

/// Small helper to funnel AnyGrid into a const-generic context.
struct AnyGridTyped<const D: usize>(ControlGrid<D>);

impl<const D: usize> AnyGridTyped<D> {
    fn from2(g: ControlGrid<2>) -> Self {
        assert_eq!(D, 2);
        // SAFETY friendly reinterpretation via serialization would be wasteful;
        // D is checked equal to 2, so the transmute-free copy below is exact.
        let mut out = ControlGrid::<D>::new_zero(
            {
                let mut a = [0usize; D];
                a.copy_from_slice(&g.dims);
                a
            },
            {
                let mut a = [0.0; D];
                a.copy_from_slice(&g.spacing);
                a
            },
            {
                let mut a = [0.0; D];
                a.copy_from_slice(&g.origin);
                a
            },
        )
        .expect("grid geometry already validated");
        for (dst, src) in out.coeffs_mut().iter_mut().zip(g.coeffs()) {
            dst.copy_from_slice(src);
        }
        Self(out)
    }

    fn from3(g: ControlGrid<3>) -> Self {
        assert_eq!(D, 3);
        let mut out = ControlGrid::<D>::new_zero(
            {
                let mut a = [0usize; D];
                a.copy_from_slice(&g.dims);
                a
            },
            {
                let mut a = [0.0; D];
                a.copy_from_slice(&g.spacing);
                a
            },
            {
                let mut a = [0.0; D];
                a.copy_from_slice(&g.origin);
                a
            },
        )
        .expect("grid geometry already validated");
        for (dst, src) in out.coeffs_mut().iter_mut().zip(g.coeffs()) {
            dst.copy_from_slice(src);
        }
        Self(out)
    }
}

fn run_eval_tre(args: &TreArgs) -> Result<(), CliError> {
    match sniff_ndims(&args.fixed)? {
        2 => eval_tre_typed::<2>(args),
        3 => eval_tre_typed::<3>(args),
        n => Err(CliError::Config(format!("unsupported NDims {n}"))),
    }
}

fn run_eval_percent(args: &PercentArgs) -> Result<(), CliError> {
    let fixed = load_image::<2>(&args.fixed)?;
    let grid = load_grid_2d(&args.field)?;
    let truth = load_ground_truth(&args.truth).map_err(|e| CliError::Config(e.to_string()))?;
    let map = normalize_coords(&fixed);
    let report =
        percent_error(&grid, &map, &truth).map_err(|e| CliError::Numerical(e.to_string()))?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;
    let mut text = String::from("node,percent_error\n");
    for (i, e) in report.errors.iter().enumerate() {
        let _ = writeln!(text, "{i},{e}");
    }
    fs::write(args.out.join("percent_error.csv"), text)
        .map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(
        args.out.join("percent_summary.csv"),
        format!(
            "mean,q1,q3\n{},{},{}\n",
            report.mean, report.q1, report.q3
        ),
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    println!(
        "percent error mean {:.3} (q1 {:.3}, q3 {:.3})",
        report.mean, report.q1, report.q3
    );
    Ok(())
}

fn run_eval_grid(args: &GridArgs) -> Result<(), CliError> {
    let fixed = load_image::<2>(&args.fixed)?;
    let grid = load_grid_2d(&args.field)?;
    let map = normalize_coords(&fixed);
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;
    let lines = warp_grid_export(
        &grid,
        &map,
        &fixed,
        args.rows,
        args.cols,
        args.samples,
        &args.out.join("warped_grid.csv"),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    println!("wrote {lines} polylines");
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AuditOutcome {
    pub min_j: f64,
    pub fraction_nonpositive: f64,
}

fn eval_audit_typed<const D: usize>(
    args: &AuditArgs,
    default_res: usize,
) -> Result<AuditOutcome, CliError> {
    let fixed = load_image::<D>(&args.fixed)?;
    let grid = match read_eqgf(&args.field).map_err(|e| CliError::Config(e.to_string()))? {
        AnyGrid::D2(g) if D == 2 => AnyGridTyped::<D>::from2(g).0,
        AnyGrid::D3(g) if D == 3 => AnyGridTyped::<D>::from3(g).0,
        _ => return Err(CliError::Config("field/image dimension mismatch".into())),
    };
    let map = normalize_coords(&fixed);
    let res = args.resolution.unwrap_or(default_res);
    let audit =
        jacobian_audit(&grid, &map, &fixed, res).map_err(|e| CliError::Numerical(e.to_string()))?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
        fs::write(
            out.join("audit.csv"),
            format!(
                "min_j,fraction_nonpositive,points\n{},{},{}\n",
                audit.min_j, audit.fraction_nonpositive, audit.points
            ),
        )
        .map_err(|e| CliError::Io(e.to_string()))?;
    }
    println!(
        "jacobian audit: min J = {:.6}, non-positive fraction = {:.6}",
        audit.min_j, audit.fraction_nonpositive
    );
    if args.gate && audit.fraction_nonpositive > 0.0 {
        return Err(CliError::Numerical(format!(
            "invertibility gate failed: min J = {:.6}",
            audit.min_j
        )));
    }
    Ok(AuditOutcome {
        min_j: audit.min_j,
        fraction_nonpositive: audit.fraction_nonpositive,
    })
}

pub fn run_eval_audit(args: &AuditArgs) -> Result<AuditOutcome, CliError> {
    match sniff_ndims(&args.fixed)? {
        2 => eval_audit_typed::<2>(args, 256),
        3 => eval_audit_typed::<3>(args, 64),
        n => Err(CliError::Config(format!("unsupported NDims {n}"))),
    }
}

fn parse_betas(spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad beta '{s}'")))
        })
        .collect()
}

fn parse_regularizers(spec: &str) -> Result<Vec<Regularizer>, CliError> {
    spec.split(',')
        .map(|s| match s.trim() {
            "physics" => Ok(Regularizer::Physics),
            "bending" => Ok(Regularizer::Bending),
            other => Err(CliError::Config(format!("unknown regularizer '{other}'"))),
        })
        .collect()
}

fn regularizer_name(r: Regularizer) -> &'static str {
    match r {
        Regularizer::Physics => "physics",
        Regularizer::Bending => "bending",
    }
}

/// One summary row of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub regularizer: String,
    pub beta: f64,
    pub status: String,
    pub pct_mean: Option<f64>,
    pub pct_q1: Option<f64>,
    pub pct_q3: Option<f64>,
    pub tre_mean: Option<f64>,
    pub tre_std: Option<f64>,
    pub mean_disp: Option<f64>,
}

pub fn run_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>, CliError> {
    if sniff_ndims(&args.fixed)? != 2 && args.truth.is_some() {
        return Err(CliError::Config(
            "ground-truth percent evaluation is 2D only".into(),
        ));
    }
    let base_cfg = parse_config(&args.config)?;
    let betas = parse_betas(&args.betas)?;
    let regs = parse_regularizers(&args.regularizers)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;

    let started = Instant::now();
    let ndims = sniff_ndims(&args.fixed)?;
    let cases: Vec<(Regularizer, f64)> = regs
        .iter()
        .flat_map(|&r| betas.iter().map(move |&b| (r, b)))
        .collect();

    let rows: Vec<SweepRow> = cases
        .par_iter()
        .map(|&(reg, beta)| {
            let mut cfg = base_cfg.clone();
            cfg.engine.regularizer = reg;
            cfg.engine.beta = beta;
            let case_dir = args.out.join(format!("{}_beta{}", regularizer_name(reg), beta));
            let mut row = SweepRow {
                regularizer: regularizer_name(reg).into(),
                beta,
                status: "ok".into(),
                pct_mean: None,
                pct_q1: None,
                pct_q3: None,
                tre_mean: None,
                tre_std: None,
                mean_disp: None,
            };
            let mut run = || -> Result<(), CliError> {
                match ndims {
                    2 => {
                        let out = register_typed::<2>(
                            &args.fixed,
                            &args.moving,
                            args.mask.as_deref(),
                            Some(&args.config),
                            &cfg,
                            &case_dir,
                            "sweep",
                        )?;
                        if let Some(truth_path) = &args.truth {
                            let truth = load_ground_truth(truth_path)
                                .map_err(|e| CliError::Config(e.to_string()))?;
                            let report = percent_error(&out.grid, &out.map, &truth)
                                .map_err(|e| CliError::Numerical(e.to_string()))?;
                            row.pct_mean = Some(report.mean);
                            row.pct_q1 = Some(report.q1);
                            row.pct_q3 = Some(report.q3);
                            let mut disp = 0.0;
                            for (p, _) in &truth {
                                let u = sample_field(&out.grid, out.map.to_norm(p))
                                    .map_err(|e| CliError::Numerical(e.to_string()))?
                                    .u;
                                disp += (u[0] * u[0] + u[1] * u[1]).sqrt() / out.map.scale;
                            }
                            row.mean_disp = Some(disp / truth.len() as f64);
                        }
                        if let (Some(fl), Some(ml)) =
                            (&args.fixed_landmarks, &args.moving_landmarks)
                        {
                            let fixed = load_image::<2>(&args.fixed)?;
                            let flm = load_landmarks::<2>(fl, fixed.dims)
                                .map_err(|e| CliError::Config(e.to_string()))?;
                            let mlm = load_landmarks::<2>(ml, fixed.dims)
                                .map_err(|e| CliError::Config(e.to_string()))?;
                            let report = tre_snap(&flm, &mlm, &out.grid, &out.map, &fixed)
                                .map_err(|e| CliError::Numerical(e.to_string()))?;
                            row.tre_mean = Some(report.mean);
                            row.tre_std = Some(report.std);
                        }
                    }
                    3 => {
                        let out = register_typed::<3>(
                            &args.fixed,
                            &args.moving,
                            args.mask.as_deref(),
                            Some(&args.config),
                            &cfg,
                            &case_dir,
                            "sweep",
                        )?;
                        if let (Some(fl), Some(ml)) =
                            (&args.fixed_landmarks, &args.moving_landmarks)
                        {
                            let fixed = load_image::<3>(&args.fixed)?;
                            let flm = load_landmarks::<3>(fl, fixed.dims)
                                .map_err(|e| CliError::Config(e.to_string()))?;
                            let mlm = load_landmarks::<3>(ml, fixed.dims)
                                .map_err(|e| CliError::Config(e.to_string()))?;
                            let report = tre_snap(&flm, &mlm, &out.grid, &out.map, &fixed)
                                .map_err(|e| CliError::Numerical(e.to_string()))?;
                            row.tre_mean = Some(report.mean);
                            row.tre_std = Some(report.std);
                        }
                    }
                    n => return Err(CliError::Config(format!("unsupported NDims {n}"))),
                }
                Ok(())
            };
            if let Err(e) = run() {
                row.status = format!("failed: {e}");
            }
            row
        })
        .collect();

    // deterministic summary order
    let mut rows = rows;
    rows.sort_by(|a, b| {
        (a.regularizer.clone(), a.beta)
            .partial_cmp(&(b.regularizer.clone(), b.beta))
            .unwrap()
    });

    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text =
        String::from("regularizer,beta,status,pct_mean,pct_q1,pct_q3,tre_mean,tre_std,mean_disp\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            r.regularizer,
            r.beta,
            r.status,
            fmt(r.pct_mean),
            fmt(r.pct_q1),
            fmt(r.pct_q3),
            fmt(r.tre_mean),
            fmt(r.tre_std),
            fmt(r.mean_disp)
        );
    }
    fs::write(args.out.join("summary.csv"), text).map_err(|e| CliError::Io(e.to_string()))?;

    let mut inputs: Vec<InputRecord> =
        vec![hash_file(&args.fixed)?, hash_file(&args.moving)?, hash_file(&args.config)?];
    if let Some(p) = &args.mask {
        inputs.push(hash_file(p)?);
    }
    if let Some(p) = &args.truth {
        inputs.push(hash_file(p)?);
    }
    write_manifest(
        &args.out,
        &Manifest {
            command: "sweep".into(),
            config: serde_json::json!({
                "base": base_cfg.snapshot(),
                "betas": betas,
                "regularizers": regs.iter().map(|r| regularizer_name(*r)).collect::<Vec<_>>(),
            }),
            seeds: vec![base_cfg.engine.seed],
            inputs,
            outputs: rows
                .iter()
                .map(|r| format!("{}_beta{}", r.regularizer, r.beta))
                .chain(std::iter::once("summary.csv".into()))
                .collect(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            diagnostics: serde_json::json!({
                "failed_cases": rows.iter().filter(|r| r.status != "ok").count(),
            }),
        },
    )?;
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => run_synth(&args),
        Command::Register(args) => run_register(&args),
        Command::Eval(cmd) => run_eval(&cmd),
        Command::Sweep(args) => run_sweep(&args).map(|_| ()),
    }
}
