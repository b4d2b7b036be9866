//! Synthetic hyperelastic benchmark generator: random Gaussian-RBF Dirichlet
//! boundary displacements on the unit square, a plane-strain Neo-Hookean FE
//! Newton solve, binary image rasterization, and ground-truth export.

pub mod mesh;
pub mod raster;
pub mod solve;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{save_metaimage, ElementType, Image, ImageError};
use crate::mechanics::{lame_from_youngs, Kinematics, MaterialParams};
use crate::tensor::{rank3_zero, SmallMat};
use mesh::{shape_values, FeMesh};
use solve::{fe_solve_auto, FeSolution};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("non-positive Jacobian in element {element}")]
    NonPositiveJacobian { element: usize },
    #[error("Newton did not converge (load step {step}, {iterations} iterations, residual {residual:.3e})")]
    NonConvergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("all {attempts} seed draws rejected for seed {seed}")]
    AllDrawsRejected { seed: u64, attempts: usize },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata parse: {0}")]
    Meta(String),
}

/// RBF parameter bounds of this artifact (recorded in scenario metadata).
pub const RBF_KERNELS: usize = 12;
pub const RBF_SIGMA_LO: f64 = 0.1;
pub const RBF_SIGMA_HI: f64 = 0.3;
pub const RBF_AMP_BOUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: [f64; 2],
}

/// Sum of 12 randomly parameterized Gaussian radial basis functions.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfField {
    pub kernels: Vec<RbfKernel>,
}

/// Draw a random RBF displacement field: centers uniform in [0,1]^2, widths
/// in [0.1, 0.3], amplitude components in [-0.1, 0.1].
pub fn gen_rbf_field(seed: u64) -> RbfField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::with_capacity(RBF_KERNELS);
    for _ in 0..RBF_KERNELS {
        kernels.push(RbfKernel {
            center: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            sigma: rng.random_range(RBF_SIGMA_LO..RBF_SIGMA_HI),
            amplitude: [
                rng.random_range(-RBF_AMP_BOUND..RBF_AMP_BOUND),
                rng.random_range(-RBF_AMP_BOUND..RBF_AMP_BOUND),
            ],
        });
    }
    RbfField { kernels }
}

/// u(x) = sum_k amp_k exp(-|x - c_k|^2 / (2 sigma_k^2)).
pub fn eval_rbf(field: &RbfField, x: [f64; 2]) -> [f64; 2] {
    let mut u = [0.0; 2];
    for k in &field.kernels {
        let dx = x[0] - k.center[0];
        let dy = x[1] - k.center[1];
        let w = (-(dx * dx + dy * dy) / (2.0 * k.sigma * k.sigma)).exp();
        u[0] += k.amplitude[0] * w;
        u[1] += k.amplitude[1] * w;
    }
    u
}

/// FE interpolant kinematics (grad and Hessian of u_h) at local coordinates
/// (xi, eta) of element `e`.
pub fn interpolate_kinematics(
    mesh: &FeMesh,
    displacements: &[[f64; 2]],
    e: usize,
    xi: f64,
    eta: f64,
) -> Kinematics<f64, 2> {
    let sv = shape_values(mesh.order, mesh.h, xi, eta);
    let mut grad = SmallMat::<f64, 2>::zero();
    let mut hess = rank3_zero::<f64, 2>();
    for (a, s) in sv.iter().enumerate() {
        let d = displacements[mesh.elem_node(e, a)];
        for i in 0..2 {
            grad.e[i][0] += d[i] * s.d[0];
            grad.e[i][1] += d[i] * s.d[1];
            hess[i][0][0] += d[i] * s.dd[0];
            hess[i][0][1] += d[i] * s.dd[1];
            hess[i][1][1] += d[i] * s.dd[2];
        }
    }
    for i in 0..2 {
        hess[i][1][0] = hess[i][0][1];
    }
    Kinematics::new(grad, hess)
}

/// Norm of the pointwise equilibrium gap of the FE interpolant at a 2x2 set
/// of interior points per element.
pub fn interior_gap_norms(
    mesh: &FeMesh,
    displacements: &[[f64; 2]],
    mat: &MaterialParams,
) -> Vec<f64> {
    let mut norms = Vec::with_capacity(mesh.num_elems() * 4);
    for e in 0..mesh.num_elems() {
        for &eta in &[-0.5, 0.5] {
            for &xi in &[-0.5, 0.5] {
                let kin = interpolate_kinematics(mesh, displacements, e, xi, eta);
                if let Ok(gap) = crate::mechanics::equilibrium_gap(&kin, mat) {
                    norms.push((gap[0] * gap[0] + gap[1] * gap[1]).sqrt());
                }
            }
        }
    }
    norms
}

#[derive(Debug, Clone, Copy)]
pub struct ScenarioOptions {
    pub elements: usize,
    pub order: usize,
    pub resolution: usize,
    pub max_attempts: usize,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            elements: 120,
            order: 1,
            resolution: 256,
            max_attempts: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub requested_seed: u64,
    pub accepted_seed: u64,
    pub attempts: usize,
    pub options: ScenarioOptions,
    pub material: MaterialParams,
    pub rbf: RbfField,
    pub mesh: FeMesh,
    pub solution: FeSolution,
    pub fixed: Image<2>,
    pub moving: Image<2>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed of draw attempt `k` for a requested seed.
pub fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    splitmix64(seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Generate one scenario: draw RBF boundary data (redrawing deterministically
/// on Newton failure), solve the elastostatic problem, rasterize the binary
/// image pair.
pub fn generate_scenario(seed: u64, opts: &ScenarioOptions) -> Result<Scenario, SynthError> {
    let material = lame_from_youngs(1.0, 0.3).expect("fixed benchmark material");
    let mesh = FeMesh::unit_square(opts.elements, opts.order);

    for attempt in 0..opts.max_attempts {
        let accepted_seed = attempt_seed(seed, attempt);
        let rbf = gen_rbf_field(accepted_seed);
        // the smooth field everywhere: boundary values are prescribed, the
        // interior samples only seed the Newton warm start
        let bc: Vec<[f64; 2]> = mesh.nodes.iter().map(|p| eval_rbf(&rbf, *p)).collect();
        match fe_solve_auto(&mesh, &bc, &material) {
            Ok(solution) => {
                let (fixed, moving) =
                    raster::rasterize_pair(&mesh, &solution.displacements, opts.resolution);
                return Ok(Scenario {
                    requested_seed: seed,
                    accepted_seed,
                    attempts: attempt + 1,
                    options: *opts,
                    material,
                    rbf,
                    mesh,
                    solution,
                    fixed,
                    moving,
                });
            }
            Err(SynthError::NonConvergence { .. }) | Err(SynthError::NonPositiveJacobian { .. }) => {
                log::warn!("seed {seed} attempt {attempt} rejected; redrawing");
            }
            Err(e) => return Err(e),
        }
    }
    Err(SynthError::AllDrawsRejected {
        seed,
        attempts: opts.max_attempts,
    })
}

impl Scenario {
    pub fn mean_truth_displacement(&self) -> f64 {
        let sum: f64 = self
            .solution
            .displacements
            .iter()
            .map(|u| (u[0] * u[0] + u[1] * u[1]).sqrt())
            .sum();
        sum / self.solution.displacements.len() as f64
    }
}

/// Write a scenario directory: fixed/moving MetaImages, per-node ground
/// truth CSV, and self-describing key = value metadata.
pub fn export_scenario(scenario: &Scenario, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    save_metaimage(&scenario.fixed, &dir.join("fixed.mhd"), ElementType::Uchar)?;
    save_metaimage(&scenario.moving, &dir.join("moving.mhd"), ElementType::Uchar)?;

    let mut csv = String::from("x,y,ux,uy\n");
    for (p, u) in scenario
        .mesh
        .nodes
        .iter()
        .zip(&scenario.solution.displacements)
    {
        let _ = writeln!(csv, "{},{},{},{}", p[0], p[1], u[0], u[1]);
    }
    fs::write(dir.join("ground_truth.csv"), csv)?;

    let mut meta = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(meta, "{k} = {v}");
    };
    kv("requested_seed", scenario.requested_seed.to_string());
    kv("accepted_seed", scenario.accepted_seed.to_string());
    kv("attempts", scenario.attempts.to_string());
    kv("youngs", "1".into());
    kv("poisson", "0.3".into());
    kv("mu", scenario.material.mu.to_string());
    kv("lambda", scenario.material.lambda.to_string());
    kv("elements_per_side", scenario.options.elements.to_string());
    kv("element_order", scenario.options.order.to_string());
    kv("resolution", scenario.options.resolution.to_string());
    kv("rbf_kernels", RBF_KERNELS.to_string());
    kv("rbf_sigma_lo", RBF_SIGMA_LO.to_string());
    kv("rbf_sigma_hi", RBF_SIGMA_HI.to_string());
    kv("rbf_amp_bound", RBF_AMP_BOUND.to_string());
    kv("newton_iterations", scenario.solution.iterations.to_string());
    kv("final_residual", format!("{:e}", scenario.solution.final_residual));
    kv("mean_j", scenario.solution.mean_j.to_string());
    kv("min_j", scenario.solution.min_j.to_string());
    kv("strain_energy", scenario.solution.energy.to_string());
    kv(
        "mean_truth_displacement",
        scenario.mean_truth_displacement().to_string(),
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

/// Read a scenario metadata file back as a key -> value map.
pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>, SynthError> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SynthError::Meta(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// One ground-truth row: node position and its displacement (world units).
pub type TruthRow = ([f64; 2], [f64; 2]);

/// Parse a ground-truth CSV back into (position, displacement) rows.
pub fn load_ground_truth(path: &Path) -> Result<Vec<TruthRow>, SynthError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "x,y,ux,uy" {
                return Err(SynthError::Meta(format!(
                    "unexpected ground-truth header '{line}'"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SynthError::Meta(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 4 {
            return Err(SynthError::Meta(format!(
                "line {}: expected 4 columns",
                lineno + 1
            )));
        }
        rows.push(([vals[0], vals[1]], [vals[2], vals[3]]));
    }
    Ok(rows)
}
