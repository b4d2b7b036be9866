//! Quantitative evaluation of estimated fields: snap-to-voxel TRE against
//! paired landmarks, percent-of-unit-length error against FE ground truth,
//! cumulative TRE curves, Jacobian validity audits and grid-warp exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::engine::CoordMap;
use crate::field::{sample_field, ControlGrid, FieldError};
use crate::image::{Image, LandmarkSet};
use crate::tensor::det;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("landmark sets differ in size: {fixed} vs {moving}")]
    LandmarkCountMismatch { fixed: usize, moving: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-landmark TRE report (mm).
#[derive(Debug, Clone)]
pub struct TreReport {
    /// Snap-to-voxel TRE per landmark.
    pub tre: Vec<f64>,
    /// Diagnostic TRE without voxel snapping.
    pub tre_unsnapped: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Map a fixed landmark through phi and return its voxel-space image.
fn transform_landmark<const D: usize>(
    grid: &ControlGrid<D>,
    map: &CoordMap<D>,
    img: &Image<D>,
    x_vox: &[f64; D],
) -> Result<[f64; D], FieldError> {
    let world = img.voxel_to_world(x_vox);
    let norm = map.to_norm(&world);
    let s = sample_field(grid, norm)?;
    let mut phi_norm = norm;
    for a in 0..D {
        phi_norm[a] += s.u[a];
    }
    Ok(img.world_to_voxel(&map.to_world(&phi_norm)))
}

/// Snap-to-voxel TRE: transform each fixed landmark, round every component
/// to the nearest voxel index (half away from zero), and measure the
/// distance to the paired moving landmark in mm.
pub fn tre_snap<const D: usize>(
    fixed_lms: &LandmarkSet<D>,
    moving_lms: &LandmarkSet<D>,
    grid: &ControlGrid<D>,
    map: &CoordMap<D>,
    img: &Image<D>,
) -> Result<TreReport, EvalError> {
    if fixed_lms.points.len() != moving_lms.points.len() {
        return Err(EvalError::LandmarkCountMismatch {
            fixed: fixed_lms.points.len(),
            moving: moving_lms.points.len(),
        });
    }
    if fixed_lms.points.is_empty() {
        return Err(EvalError::Empty("landmark set".into()));
    }
    let mut tre = Vec::with_capacity(fixed_lms.points.len());
    let mut tre_unsnapped = Vec::with_capacity(fixed_lms.points.len());
    for (xf, xm) in fixed_lms.points.iter().zip(&moving_lms.points) {
        let phi_vox = transform_landmark(grid, map, img, xf)?;
        let mut d2_snap = 0.0;
        let mut d2_raw = 0.0;
        for a in 0..D {
            let snapped = phi_vox[a].round();
            let ds = (snapped - xm[a]) * img.spacing[a];
            let dr = (phi_vox[a] - xm[a]) * img.spacing[a];
            d2_snap += ds * ds;
            d2_raw += dr * dr;
        }
        tre.push(d2_snap.sqrt());
        tre_unsnapped.push(d2_raw.sqrt());
    }
    let (mean, std) = mean_std(&tre);
    Ok(TreReport {
        tre,
        tre_unsnapped,
        mean,
        std,
    })
}

/// Linear-interpolation quantile (order statistics interpolated at
/// (n - 1) p).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = pos - lo as f64;
        sorted[lo] + t * (sorted[hi] - sorted[lo])
    }
}

/// Percent-of-unit-length registration error against ground-truth nodal
/// displacements (2D synthetic benchmark).
#[derive(Debug, Clone)]
pub struct PercentErrorReport {
    pub errors: Vec<f64>,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Per-node error |u_pred(x) - u_true(x)| * 100 on the unit-length domain.
///
/// `truth` rows are (position, displacement) in world units.
pub fn percent_error(
    grid: &ControlGrid<2>,
    map: &CoordMap<2>,
    truth: &[([f64; 2], [f64; 2])],
) -> Result<PercentErrorReport, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::Empty("ground-truth table".into()));
    }
    let mut errors = Vec::with_capacity(truth.len());
    for (p, u_true) in truth {
        let norm = map.to_norm(p);
        let s = sample_field(grid, norm)?;
        let mut d2 = 0.0;
        for a in 0..2 {
            let u_world = s.u[a] / map.scale;
            let d = u_world - u_true[a];
            d2 += d * d;
        }
        errors.push(d2.sqrt() * 100.0);
    }
    let (mean, _) = mean_std(&errors);
    let mut sorted = errors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(PercentErrorReport {
        mean,
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        errors,
    })
}

/// Sorted TRE vs empirical cumulative fraction.
pub fn cumulative_tre(report: &TreReport) -> Vec<(f64, f64)> {
    let mut sorted = report.tre.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, (i + 1) as f64 / n))
        .collect()
}

pub fn write_cumulative_csv(path: &Path, curve: &[(f64, f64)]) -> Result<(), EvalError> {
    let mut text = String::from("tre_mm,cumulative_fraction\n");
    for (t, f) in curve {
        let _ = writeln!(text, "{t},{f}");
    }
    fs::write(path, text)?;
    Ok(())
}

/// Jacobian validity audit over a dense lattice covering the image domain.
#[derive(Debug, Clone, Copy)]
pub struct JacobianAudit {
    pub min_j: f64,
    pub fraction_nonpositive: f64,
    pub points: usize,
}

/// Evaluate det(I + grad u) on `res` points per axis spanning the voxel
/// domain; reports the minimum and the fraction of non-positive values.
pub fn jacobian_audit<const D: usize>(
    grid: &ControlGrid<D>,
    map: &CoordMap<D>,
    img: &Image<D>,
    res: usize,
) -> Result<JacobianAudit, EvalError> {
    assert!(res >= 2);
    let total: usize = res.pow(D as u32);
    let mut min_j = f64::INFINITY;
    let mut nonpos = 0usize;
    for flat in 0..total {
        let mut rem = flat;
        let mut vox = [0.0; D];
        for a in 0..D {
            let t = (rem % res) as f64 / (res - 1) as f64;
            vox[a] = t * (img.dims[a] - 1) as f64;
            rem /= res;
        }
        let norm = map.to_norm(&img.voxel_to_world(&vox));
        let s = sample_field(grid, norm)?;
        let f = crate::mechanics::Kinematics::new(s.grad, s.hess).deformation_gradient();
        let j = det(&f);
        min_j = min_j.min(j);
        if j <= 0.0 {
            nonpos += 1;
        }
    }
    Ok(JacobianAudit {
        min_j,
        fraction_nonpositive: nonpos as f64 / total as f64,
        points: total,
    })
}

/// Forward-warp a uniform grid of `rows` horizontal and `cols` vertical
/// lines through phi and write the polylines as CSV
/// (line, point, x, y in world units). Each grid cell edge is sampled at
/// `samples_per_segment` points.
pub fn warp_grid_export(
    grid: &ControlGrid<2>,
    map: &CoordMap<2>,
    img: &Image<2>,
    rows: usize,
    cols: usize,
    samples_per_segment: usize,
    path: &Path,
) -> Result<usize, EvalError> {
    assert!(rows >= 2 && cols >= 2 && samples_per_segment >= 1);
    let lo = img.voxel_to_world(&[0.0; 2]);
    let hi = img.voxel_to_world(&[(img.dims[0] - 1) as f64, (img.dims[1] - 1) as f64]);

    let mut text = String::from("line,point,x,y\n");
    let mut line_id = 0usize;
    let emit_line = |text: &mut String, line_id: usize, pts: &[[f64; 2]]| -> Result<(), EvalError> {
        for (k, p) in pts.iter().enumerate() {
            let norm = map.to_norm(p);
            let s = sample_field(grid, norm)?;
            let mut phi_norm = norm;
            phi_norm[0] += s.u[0];
            phi_norm[1] += s.u[1];
            let w = map.to_world(&phi_norm);
            let _ = writeln!(text, "{line_id},{k},{},{}", w[0], w[1]);
        }
        Ok(())
    };

    // horizontal lines: y fixed per row, x sweeps cols-1 segments
    for r in 0..rows {
        let y = lo[1] + (hi[1] - lo[1]) * r as f64 / (rows - 1) as f64;
        let n_pts = (cols - 1) * samples_per_segment + 1;
        let pts: Vec<[f64; 2]> = (0..n_pts)
            .map(|k| {
                let t = k as f64 / (n_pts - 1) as f64;
                [lo[0] + (hi[0] - lo[0]) * t, y]
            })
            .collect();
        emit_line(&mut text, line_id, &pts)?;
        line_id += 1;
    }
    // vertical lines
    for c in 0..cols {
        let x = lo[0] + (hi[0] - lo[0]) * c as f64 / (cols - 1) as f64;
        let n_pts = (rows - 1) * samples_per_segment + 1;
        let pts: Vec<[f64; 2]> = (0..n_pts)
            .map(|k| {
                let t = k as f64 / (n_pts - 1) as f64;
                [x, lo[1] + (hi[1] - lo[1]) * t]
            })
            .collect();
        emit_line(&mut text, line_id, &pts)?;
        line_id += 1;
    }
    fs::write(path, text)?;
    Ok(line_id)
}
