//! Stochastic optimization of the registration objective: point sampling,
//! batch loss evaluation with exact coefficient gradients, Adam updates over
//! the B-spline coefficients, and convergence reporting.
//!
//! All field math runs in isotropically normalized coordinates (world mm
//! divided by the longest physical extent, centered on the domain), so the
//! mechanics invariants (rotation objectivity in particular) hold exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{param_gradient_into, sample_field, ControlGrid, FieldError};
use crate::image::{all_points, mask_points, sample_linear, Image, ImageError, Mask};
use crate::loss::{bending_energy_point, mse_batch, ncc_batch, total_loss, LossError};
use crate::mechanics::{GapSensitivities, Kinematics, MaterialParams, MechanicsError};
use crate::tensor::{det, inv, rank3_zero, Rank3, SmallMat};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error("history io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Mse,
    Ncc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    Bending,
    Physics,
}

/// Jacobian floor below which the physics penalty switches to a quadratic
/// barrier; ln(J) in the energy presumes J > 0 and transient violations
/// during stochastic descent must not kill the run.
pub const J_FLOOR: f64 = 0.05;
/// Barrier stiffness.
pub const J_BARRIER_KAPPA: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub beta: f64,
    pub similarity: Similarity,
    pub regularizer: Regularizer,
    pub material: MaterialParams,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub determinism: bool,
    /// Control-point spacing in normalized units; 0 selects the default
    /// (1/16 of the normalized extent in 2D, 8 voxels of the
    /// largest-spacing axis in 3D).
    pub control_spacing: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            beta: 0.001,
            similarity: Similarity::Mse,
            regularizer: Regularizer::Physics,
            material: MaterialParams {
                mu: 0.5,
                lambda: 0.0,
            },
            batch_size: 10_000,
            iterations: 10_000,
            learning_rate: 1e-4,
            seed: 0,
            determinism: true,
            control_spacing: 0.0,
        }
    }
}

impl RegistrationConfig {
    fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(EngineError::Loss(LossError::InvalidBeta { beta: self.beta }));
        }
        if self.batch_size < 1 {
            return Err(EngineError::Config("batch_size must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(EngineError::Config("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EngineError::Config("learning_rate must be positive".into()));
        }
        if self.material.mu <= 0.0 || self.material.lambda < 0.0 {
            return Err(EngineError::Config(format!(
                "material (mu = {}, lambda = {}) violates mu > 0, lambda >= 0",
                self.material.mu, self.material.lambda
            )));
        }
        Ok(())
    }
}

/// Isotropic world-to-normalized map: one scalar scale for all axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordMap<const D: usize> {
    /// Normalized units per world mm: 1 / (longest physical extent).
    pub scale: f64,
    /// World coordinates of the domain center.
    pub center: [f64; D],
}

impl<const D: usize> CoordMap<D> {
    #[inline]
    pub fn to_norm(&self, world: &[f64; D]) -> [f64; D] {
        let mut n = [0.0; D];
        for a in 0..D {
            n[a] = (world[a] - self.center[a]) * self.scale;
        }
        n
    }

    #[inline]
    pub fn to_world(&self, norm: &[f64; D]) -> [f64; D] {
        let mut w = [0.0; D];
        for a in 0..D {
            w[a] = norm[a] / self.scale + self.center[a];
        }
        w
    }
}

/// Build the isotropic normalization map of an image: world coordinates are
/// divided by the single longest physical extent (dims * spacing) and
/// centered at the domain center.
pub fn normalize_coords<const D: usize>(img: &Image<D>) -> CoordMap<D> {
    let mut max_extent = 0.0f64;
    let mut center = [0.0; D];
    for a in 0..D {
        max_extent = max_extent.max(img.dims[a] as f64 * img.spacing[a]);
        center[a] = img.origin[a] + (img.dims[a] - 1) as f64 * img.spacing[a] / 2.0;
    }
    CoordMap {
        scale: 1.0 / max_extent,
        center,
    }
}

/// Draw `n` points uniformly with replacement plus continuous jitter inside
/// each voxel cell; deterministic given the RNG state.
pub fn sample_batch<const D: usize>(
    points: &[[f64; D]],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; D]> {
    assert!(!points.is_empty());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(0..points.len());
        let mut p = points[idx];
        for a in 0..D {
            p[a] += rng.random_range(-0.5..0.5);
        }
        out.push(p);
    }
    out
}

/// Adam first/second moments congruent to the coefficient array.
#[derive(Debug, Clone)]
pub struct AdamState<const D: usize> {
    pub m: Vec<[f64; D]>,
    pub v: Vec<[f64; D]>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<const D: usize> AdamState<D> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; D]; n],
            v: vec![[0.0; D]; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One standard bias-corrected Adam update of `coeffs` in place.
pub fn adam_step<const D: usize>(
    state: &mut AdamState<D>,
    coeffs: &mut [[f64; D]],
    grads: &[[f64; D]],
    lr: f64,
) {
    assert_eq!(coeffs.len(), grads.len());
    assert_eq!(coeffs.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for k in 0..coeffs.len() {
        for i in 0..D {
            let g = grads[k][i];
            state.m[k][i] = state.beta1 * state.m[k][i] + (1.0 - state.beta1) * g;
            state.v[k][i] = state.beta2 * state.v[k][i] + (1.0 - state.beta2) * g * g;
            let m_hat = state.m[k][i] / bc1;
            let v_hat = state.v[k][i] / bc2;
            coeffs[k][i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
}

/// Per-iteration loss record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
}

/// Diagnostic counters reported at the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunDiagnostics {
    /// Batch similarity evaluations (0 for a beta = 1 run).
    pub sim_evals: u64,
    /// Pointwise regularizer evaluations (0 for a beta = 0 run).
    pub reg_evals: u64,
    /// Moving-image samples taken (0 for a beta = 1 run).
    pub moving_samples: u64,
    /// Samples clamped to a volume boundary.
    pub clamped_samples: u64,
    /// Points where the physics penalty fell back to the J-floor barrier.
    pub barrier_points: u64,
}

impl RunDiagnostics {
    fn add(&mut self, o: &RunDiagnostics) {
        self.sim_evals += o.sim_evals;
        self.reg_evals += o.reg_evals;
        self.moving_samples += o.moving_samples;
        self.clamped_samples += o.clamped_samples;
        self.barrier_points += o.barrier_points;
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult<const D: usize> {
    pub grid: ControlGrid<D>,
    pub map: CoordMap<D>,
    pub history: Vec<IterationRecord>,
    pub diagnostics: RunDiagnostics,
}

/// Batch evaluation output.
#[derive(Debug, Clone, Copy)]
pub struct BatchEval {
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
}

struct PointTerm<const D: usize> {
    x_norm: [f64; D],
    /// dM(phi(x))/du per normalized displacement component; zero when the
    /// similarity is inactive.
    dmoving_du: [f64; D],
    fixed_val: f64,
    moving_val: f64,
    reg_value: f64,
    reg_wrt_grad: SmallMat<f64, D>,
    reg_wrt_hess: Rank3<f64, D>,
    clamped: u64,
    barrier: bool,
}

fn eval_point<const D: usize>(
    grid: &ControlGrid<D>,
    fixed: &Image<D>,
    moving: &Image<D>,
    map: &CoordMap<D>,
    cfg: &RegistrationConfig,
    x_vox: [f64; D],
) -> Result<PointTerm<D>, EngineError>
where
    Kinematics<f64, D>: GapSensitivities<D>,
{
    let x_world = fixed.voxel_to_world(&x_vox);
    let x_norm = map.to_norm(&x_world);
    let fs = sample_field(grid, x_norm)?;

    let mut term = PointTerm {
        x_norm,
        dmoving_du: [0.0; D],
        fixed_val: 0.0,
        moving_val: 0.0,
        reg_value: 0.0,
        reg_wrt_grad: SmallMat::zero(),
        reg_wrt_hess: rank3_zero(),
        clamped: 0,
        barrier: false,
    };

    if cfg.beta < 1.0 {
        let fsamp = sample_linear(fixed, x_vox);
        if fsamp.clamped {
            term.clamped += 1;
        }
        term.fixed_val = fsamp.value;

        let mut phi_norm = x_norm;
        for a in 0..D {
            phi_norm[a] += fs.u[a];
        }
        let phi_world = map.to_world(&phi_norm);
        let phi_vox = moving.world_to_voxel(&phi_world);
        let msamp = sample_linear(moving, phi_vox);
        if msamp.clamped {
            term.clamped += 1;
        }
        term.moving_val = msamp.value;
        for a in 0..D {
            // chain through voxel = (norm/scale + center - origin)/spacing
            term.dmoving_du[a] = msamp.grad[a] / (moving.spacing[a] * map.scale);
        }
    }

    if cfg.beta > 0.0 {
        match cfg.regularizer {
            Regularizer::Bending => {
                let (value, grad) = bending_energy_point(&fs.hess);
                term.reg_value = value;
                term.reg_wrt_hess = grad;
            }
            Regularizer::Physics => {
                let kin = Kinematics::new(fs.grad, fs.hess);
                let f = kin.deformation_gradient();
                let j = det(&f);
                if j <= J_FLOOR {
                    // quadratic barrier replaces the gap at (near-)inverted points
                    term.barrier = true;
                    let defect = J_FLOOR - j;
                    term.reg_value = J_BARRIER_KAPPA * defect * defect;
                    if let Ok(finv) = inv(&f) {
                        let finv_t = finv.transpose();
                        let c = -2.0 * J_BARRIER_KAPPA * defect * j;
                        term.reg_wrt_grad = finv_t.scale(c);
                    }
                } else {
                    let sens = kin.gap_sensitivities(&cfg.material)?;
                    term.reg_value = sens.value;
                    term.reg_wrt_grad = sens.wrt_grad;
                    term.reg_wrt_hess = sens.wrt_hess;
                }
            }
        }
    }
    Ok(term)
}

/// Evaluate the full objective and its dense coefficient gradient on a fixed
/// batch of (jittered) fixed-image voxel coordinates.
///
/// `grad_out` must be congruent to the coefficient array; it is zeroed and
/// filled. Pure in all inputs, so finite differences over coefficients are
/// well defined.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grad<const D: usize>(
    grid: &ControlGrid<D>,
    fixed: &Image<D>,
    moving: &Image<D>,
    map: &CoordMap<D>,
    batch_vox: &[[f64; D]],
    cfg: &RegistrationConfig,
    grad_out: &mut [[f64; D]],
    diag: &mut RunDiagnostics,
) -> Result<BatchEval, EngineError>
where
    Kinematics<f64, D>: GapSensitivities<D>,
{
    assert_eq!(grad_out.len(), grid.num_points());
    let n = batch_vox.len();
    assert!(n >= 1);
    for g in grad_out.iter_mut() {
        *g = [0.0; D];
    }

    // pass 1: pointwise field, image and regularizer terms
    let terms: Vec<PointTerm<D>> = if cfg.determinism {
        batch_vox
            .iter()
            .map(|&x| eval_point(grid, fixed, moving, map, cfg, x))
            .collect::<Result<_, _>>()?
    } else {
        batch_vox
            .par_iter()
            .map(|&x| eval_point(grid, fixed, moving, map, cfg, x))
            .collect::<Result<_, _>>()?
    };

    for t in &terms {
        diag.clamped_samples += t.clamped;
        if t.barrier {
            diag.barrier_points += 1;
        }
    }
    if cfg.beta > 0.0 {
        diag.reg_evals += n as u64;
    }

    // batch similarity and its per-point gradient
    let (sim, dsim_dm) = if cfg.beta < 1.0 {
        diag.sim_evals += 1;
        diag.moving_samples += n as u64;
        let f_vals: Vec<f64> = terms.iter().map(|t| t.fixed_val).collect();
        let m_vals: Vec<f64> = terms.iter().map(|t| t.moving_val).collect();
        match cfg.similarity {
            Similarity::Mse => mse_batch(&f_vals, &m_vals),
            Similarity::Ncc => ncc_batch(&f_vals, &m_vals)?,
        }
    } else {
        (0.0, Vec::new())
    };

    // regularizer reduces as the mean over batch points
    let reg = if cfg.beta > 0.0 {
        terms.iter().map(|t| t.reg_value).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let total = total_loss(sim, reg, cfg.beta)?;

    // pass 2: scatter pointwise sensitivities onto the coefficients
    let sim_w = 1.0 - cfg.beta;
    let reg_w = cfg.beta / n as f64;
    let scatter = |p: usize,
                   t: &PointTerm<D>,
                   buf: &mut Vec<(usize, [f64; D])>,
                   dense: &mut [[f64; D]]|
     -> Result<(), EngineError> {
        let mut dl_du = [0.0; D];
        if cfg.beta < 1.0 {
            for a in 0..D {
                dl_du[a] = sim_w * dsim_dm[p] * t.dmoving_du[a];
            }
        }
        let mut dl_dgrad = SmallMat::<f64, D>::zero();
        let mut dl_dhess = rank3_zero::<f64, D>();
        if cfg.beta > 0.0 {
            dl_dgrad = t.reg_wrt_grad.scale(reg_w);
            for i in 0..D {
                for j in 0..D {
                    for k in 0..D {
                        dl_dhess[i][j][k] = reg_w * t.reg_wrt_hess[i][j][k];
                    }
                }
            }
        }
        buf.clear();
        param_gradient_into(grid, t.x_norm, &dl_du, &dl_dgrad, &dl_dhess, buf)?;
        for &(idx, g) in buf.iter() {
            for i in 0..D {
                dense[idx][i] += g[i];
            }
        }
        Ok(())
    };

    if cfg.determinism {
        // ordered reduction in point order
        let mut buf = Vec::with_capacity(1 << (2 * D));
        for (p, t) in terms.iter().enumerate() {
            scatter(p, t, &mut buf, grad_out)?;
        }
    } else {
        // unordered parallel reduction into per-thread dense arrays
        let partials: Vec<Result<Vec<[f64; D]>, EngineError>> = terms
            .par_iter()
            .enumerate()
            .fold(
                || Ok(vec![[0.0; D]; grid.num_points()]),
                |acc: Result<Vec<[f64; D]>, EngineError>, (p, t)| {
                    let mut dense = acc?;
                    let mut buf = Vec::with_capacity(1 << (2 * D));
                    scatter(p, t, &mut buf, &mut dense)?;
                    Ok(dense)
                },
            )
            .collect();
        for dense in partials {
            for (g, d) in grad_out.iter_mut().zip(dense?) {
                for i in 0..D {
                    g[i] += d[i];
                }
            }
        }
    }

    Ok(BatchEval { sim, reg, total })
}

/// Resolve the control spacing default for the image dimensionality.
pub fn resolve_control_spacing<const D: usize>(
    cfg: &RegistrationConfig,
    img: &Image<D>,
    map: &CoordMap<D>,
) -> f64 {
    if cfg.control_spacing > 0.0 {
        return cfg.control_spacing;
    }
    if D == 2 {
        1.0 / 16.0
    } else {
        let max_spacing = img.spacing.iter().cloned().fold(0.0f64, f64::max);
        8.0 * max_spacing * map.scale
    }
}

/// Run a full registration: loop of batch sampling, warped similarity +
/// chosen regularizer with sensitivities, chain rule to coefficient
/// gradients, and Adam updates. Returns the final grid and per-iteration
/// losses.
pub fn register<const D: usize>(
    fixed: &Image<D>,
    moving: &Image<D>,
    roi: Option<&Mask<D>>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult<D>, EngineError>
where
    Kinematics<f64, D>: GapSensitivities<D>,
{
    cfg.validate()?;
    if let Some(mask) = roi {
        if !mask.matches_geometry(fixed) {
            return Err(EngineError::Image(ImageError::GeometryMismatch(
                "mask geometry differs from the fixed image".into(),
            )));
        }
    }

    let pool = match roi {
        Some(mask) => mask_points(mask)?,
        None => all_points(fixed.dims),
    };

    let map = normalize_coords(fixed);
    let spacing = resolve_control_spacing(cfg, fixed, &map);
    let lo = map.to_norm(&fixed.voxel_to_world(&[0.0; D]));
    let hi = {
        let mut v = [0.0; D];
        for a in 0..D {
            v[a] = (fixed.dims[a] - 1) as f64;
        }
        map.to_norm(&fixed.voxel_to_world(&v))
    };
    let mut grid = ControlGrid::<D>::for_domain(lo, hi, spacing)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::<D>::new(grid.num_points());
    let mut grad = vec![[0.0; D]; grid.num_points()];
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut diagnostics = RunDiagnostics::default();

    for iter in 0..cfg.iterations {
        let batch = sample_batch(&pool, cfg.batch_size, &mut rng);
        let mut diag = RunDiagnostics::default();
        let eval =
            batch_loss_and_grad(&grid, fixed, moving, &map, &batch, cfg, &mut grad, &mut diag)?;
        diagnostics.add(&diag);
        adam_step(&mut adam, grid.coeffs_mut(), &grad, cfg.learning_rate);
        history.push(IterationRecord {
            iter,
            sim: eval.sim,
            reg: eval.reg,
            total: eval.total,
        });
    }

    Ok(RegistrationResult {
        grid,
        map,
        history,
        diagnostics,
    })
}

/// Write the loss history as CSV (iteration, sim, reg, total).
pub fn write_history_csv(path: &Path, history: &[IterationRecord]) -> Result<(), std::io::Error> {
    let mut text = String::from("iteration,sim,reg,total\n");
    for r in history {
        let _ = writeln!(text, "{},{},{},{}", r.iter, r.sim, r.reg, r.total);
    }
    std::fs::write(path, text)
}
