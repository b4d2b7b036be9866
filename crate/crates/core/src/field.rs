//! Cubic B-spline free-form displacement field.
//!
//! The transformation is phi(x) = x + u(x) with u a tensor-product uniform
//! cubic B-spline over a padded control lattice, so u, grad u and the full
//! Hessian of u are available analytically everywhere inside the supported
//! domain. The field is linear in its coefficients, which makes the chain
//! rule from pointwise loss sensitivities to coefficient gradients a sparse
//! scatter over the 4^d supporting control points.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{rank3_zero, Rank3, SmallMat};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("point {point:?} outside the padded B-spline support")]
    OutOfSupport { point: Vec<f64> },
    #[error("invalid control grid: {0}")]
    InvalidGrid(String),
    #[error("EQGF io: {0}")]
    Io(#[from] std::io::Error),
    #[error("EQGF parse: {0}")]
    Format(String),
}

const EQGF_MAGIC: &[u8; 4] = b"EQGF";
const EQGF_VERSION: u32 = 1;

/// Uniform cubic B-spline basis values and first/second derivatives of the
/// 4 supporting functions at local coordinate t in [0, 1).
///
/// The derivative sets sum to zero; the values form a partition of unity.
#[inline]
pub fn bspline_weights(t: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let omt = 1.0 - t;
    let w = [
        omt * omt * omt / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ];
    let dw = [
        -0.5 * omt * omt,
        (3.0 * t2 - 4.0 * t) / 2.0,
        (-3.0 * t2 + 2.0 * t + 1.0) / 2.0,
        0.5 * t2,
    ];
    let ddw = [omt, 3.0 * t - 2.0, -3.0 * t + 1.0, t];
    (w, dw, ddw)
}

/// Control-coefficient lattice of the displacement field, in normalized
/// coordinates. Control point `g` sits at `origin + g * spacing` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid<const D: usize> {
    pub dims: [usize; D],
    pub spacing: [f64; D],
    pub origin: [f64; D],
    coeffs: Vec<[f64; D]>,
}

/// Displacement, gradient and Hessian of u at a point.
#[derive(Debug, Clone, Copy)]
pub struct FieldSample<const D: usize> {
    pub u: [f64; D],
    pub grad: SmallMat<f64, D>,
    pub hess: Rank3<f64, D>,
}

impl<const D: usize> ControlGrid<D> {
    pub fn new_zero(
        dims: [usize; D],
        spacing: [f64; D],
        origin: [f64; D],
    ) -> Result<Self, FieldError> {
        if dims.iter().any(|&n| n < 4) {
            return Err(FieldError::InvalidGrid(format!(
                "need at least 4 control points per axis, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(FieldError::InvalidGrid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let n: usize = dims.iter().product();
        Ok(Self {
            dims,
            spacing,
            origin,
            coeffs: vec![[0.0; D]; n],
        })
    }

    /// Zero grid covering `[lo, hi]` with roughly `target_spacing`, padded by
    /// two control points beyond the domain on every side so each domain
    /// point keeps full 4^d support.
    pub fn for_domain(
        lo: [f64; D],
        hi: [f64; D],
        target_spacing: f64,
    ) -> Result<Self, FieldError> {
        if !(target_spacing > 0.0) {
            return Err(FieldError::InvalidGrid(format!(
                "control spacing must be positive, got {target_spacing}"
            )));
        }
        let mut dims = [0usize; D];
        let mut spacing = [0.0; D];
        let mut origin = [0.0; D];
        for a in 0..D {
            let extent = hi[a] - lo[a];
            if !(extent > 0.0) {
                return Err(FieldError::InvalidGrid(format!(
                    "domain extent along axis {a} must be positive"
                )));
            }
            let cells = (extent / target_spacing).ceil().max(1.0) as usize;
            spacing[a] = extent / cells as f64;
            dims[a] = cells + 5; // cells+1 on-domain points plus 2 pad each side
            origin[a] = lo[a] - 2.0 * spacing[a];
        }
        Self::new_zero(dims, spacing, origin)
    }

    pub fn num_points(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[[f64; D]] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [[f64; D]] {
        &mut self.coeffs
    }

    /// Flat index with the first axis slowest (row-major).
    #[inline]
    pub fn flat_index(&self, idx: [usize; D]) -> usize {
        let mut flat = 0;
        for a in 0..D {
            flat = flat * self.dims[a] + idx[a];
        }
        flat
    }

    pub fn control_position(&self, idx: [usize; D]) -> [f64; D] {
        let mut p = [0.0; D];
        for a in 0..D {
            p[a] = self.origin[a] + idx[a] as f64 * self.spacing[a];
        }
        p
    }

    /// Set coefficients to c_k = A p_k + b; cubic B-splines reproduce affine
    /// functions exactly, so the sampled field is then u(x) = A x + b.
    pub fn set_affine(&mut self, a: &SmallMat<f64, D>, b: [f64; D]) {
        let dims = self.dims;
        let mut idx = [0usize; D];
        for flat in 0..self.coeffs.len() {
            let mut rem = flat;
            for ax in (0..D).rev() {
                idx[ax] = rem % dims[ax];
                rem /= dims[ax];
            }
            let p = self.control_position(idx);
            let ap = a.matvec(&p);
            let mut c = [0.0; D];
            for i in 0..D {
                c[i] = ap[i] + b[i];
            }
            self.coeffs[flat] = c;
        }
    }

    /// Per-axis support base index and local weights for a sample point.
    #[inline]
    fn support(&self, x: &[f64; D]) -> Result<Support<D>, FieldError> {
        let mut base = [0usize; D];
        let mut w = [[0.0; 4]; D];
        let mut dw = [[0.0; 4]; D];
        let mut ddw = [[0.0; 4]; D];
        for a in 0..D {
            let s = (x[a] - self.origin[a]) / self.spacing[a];
            let cell = s.floor();
            let b = cell as isize;
            if !s.is_finite() || b < 1 || (b + 2) as usize > self.dims[a] - 1 {
                return Err(FieldError::OutOfSupport { point: x.to_vec() });
            }
            let t = s - cell;
            let (wa, dwa, ddwa) = bspline_weights(t);
            let inv_h = 1.0 / self.spacing[a];
            let inv_h2 = inv_h * inv_h;
            for q in 0..4 {
                w[a][q] = wa[q];
                dw[a][q] = dwa[q] * inv_h;
                ddw[a][q] = ddwa[q] * inv_h2;
            }
            base[a] = (b - 1) as usize;
        }
        Ok(Support { base, w, dw, ddw })
    }
}

struct Support<const D: usize> {
    base: [usize; D],
    w: [[f64; 4]; D],
    dw: [[f64; 4]; D],
    ddw: [[f64; 4]; D],
}

/// Evaluate u, grad u and hess u at `x` (normalized coordinates).
pub fn sample_field<const D: usize>(
    grid: &ControlGrid<D>,
    x: [f64; D],
) -> Result<FieldSample<D>, FieldError> {
    let sup = grid.support(&x)?;
    let mut u = [0.0; D];
    let mut grad = SmallMat::<f64, D>::zero();
    let mut hess = rank3_zero::<f64, D>();

    for flat_off in 0..(1usize << (2 * D)) {
        let mut offs = [0usize; D];
        let mut rem = flat_off;
        for a in (0..D).rev() {
            offs[a] = rem & 3;
            rem >>= 2;
        }
        let mut wprod = 1.0;
        for a in 0..D {
            wprod *= sup.w[a][offs[a]];
        }
        let mut dprod = [0.0; D];
        for j in 0..D {
            let mut p = 1.0;
            for a in 0..D {
                p *= if a == j { sup.dw[a][offs[a]] } else { sup.w[a][offs[a]] };
            }
            dprod[j] = p;
        }
        let mut idx = [0usize; D];
        for a in 0..D {
            idx[a] = sup.base[a] + offs[a];
        }
        let c = grid.coeffs[grid.flat_index(idx)];

        for i in 0..D {
            u[i] += c[i] * wprod;
            for j in 0..D {
                grad.e[i][j] += c[i] * dprod[j];
            }
        }
        for j in 0..D {
            for l in j..D {
                let mut p = 1.0;
                for a in 0..D {
                    p *= if a == j && a == l {
                        sup.ddw[a][offs[a]]
                    } else if a == j || a == l {
                        sup.dw[a][offs[a]]
                    } else {
                        sup.w[a][offs[a]]
                    };
                }
                for i in 0..D {
                    hess[i][j][l] += c[i] * p;
                }
            }
        }
    }
    // fill the lower symmetric mates
    for i in 0..D {
        for j in 0..D {
            for l in 0..j {
                hess[i][j][l] = hess[i][l][j];
            }
        }
    }
    Ok(FieldSample { u, grad, hess })
}

/// One coefficient-gradient contribution: flat control-point index and the
/// gradient with respect to that coefficient's d components.
pub type CoeffContribution<const D: usize> = (usize, [f64; D]);

/// Chain-rule scatter of pointwise sensitivities onto the supporting
/// coefficients, appended to `out`:
/// dL/dc_k\[i\] = dl_du\[i\] B_k + sum_j dl_dgrad\[i\]\[j\] dB_k/dx_j
///             + sum_jl dl_dhess\[i\]\[j\]\[l\] d2B_k/dx_j dx_l.
///
/// `dl_dhess` follows the symmetric per-entry convention (see
/// [`crate::mechanics::GapGradient`]); the full double sum here is then
/// identical to contracting unique entries with a (2 - delta_jl) factor.
pub fn param_gradient_into<const D: usize>(
    grid: &ControlGrid<D>,
    x: [f64; D],
    dl_du: &[f64; D],
    dl_dgrad: &SmallMat<f64, D>,
    dl_dhess: &Rank3<f64, D>,
    out: &mut Vec<CoeffContribution<D>>,
) -> Result<(), FieldError> {
    let sup = grid.support(&x)?;
    for flat_off in 0..(1usize << (2 * D)) {
        let mut offs = [0usize; D];
        let mut rem = flat_off;
        for a in (0..D).rev() {
            offs[a] = rem & 3;
            rem >>= 2;
        }
        let mut wprod = 1.0;
        for a in 0..D {
            wprod *= sup.w[a][offs[a]];
        }
        let mut dprod = [0.0; D];
        for j in 0..D {
            let mut p = 1.0;
            for a in 0..D {
                p *= if a == j { sup.dw[a][offs[a]] } else { sup.w[a][offs[a]] };
            }
            dprod[j] = p;
        }
        let mut g = [0.0; D];
        for i in 0..D {
            let mut s = dl_du[i] * wprod;
            for j in 0..D {
                s += dl_dgrad.e[i][j] * dprod[j];
            }
            g[i] = s;
        }
        for j in 0..D {
            for l in j..D {
                let mut p = 1.0;
                for a in 0..D {
                    p *= if a == j && a == l {
                        sup.ddw[a][offs[a]]
                    } else if a == j || a == l {
                        sup.dw[a][offs[a]]
                    } else {
                        sup.w[a][offs[a]]
                    };
                }
                let sym = if j == l { 1.0 } else { 2.0 };
                for i in 0..D {
                    // dl_dhess[i][j][l] == dl_dhess[i][l][j]; fold both mates
                    g[i] += sym * dl_dhess[i][j][l] * p;
                }
            }
        }
        let mut idx = [0usize; D];
        for a in 0..D {
            idx[a] = sup.base[a] + offs[a];
        }
        out.push((grid.flat_index(idx), g));
    }
    Ok(())
}

/// Allocating wrapper around [`param_gradient_into`].
pub fn param_gradient<const D: usize>(
    grid: &ControlGrid<D>,
    x: [f64; D],
    dl_du: &[f64; D],
    dl_dgrad: &SmallMat<f64, D>,
    dl_dhess: &Rank3<f64, D>,
) -> Result<Vec<CoeffContribution<D>>, FieldError> {
    let mut out = Vec::with_capacity(1 << (2 * D));
    param_gradient_into(grid, x, dl_du, dl_dgrad, dl_dhess, &mut out)?;
    Ok(out)
}

// EQGF binary serialization: magic "EQGF", version u32, d u32, dims d*u32,
// spacing d*f64, origin d*f64, then coefficients as little-endian f64,
// row-major over the lattice with components interleaved per control point.

pub fn write_eqgf<const D: usize>(grid: &ControlGrid<D>, path: &Path) -> Result<(), FieldError> {
    let mut buf = Vec::with_capacity(16 + grid.num_points() * D * 8);
    buf.extend_from_slice(EQGF_MAGIC);
    buf.extend_from_slice(&EQGF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(D as u32).to_le_bytes());
    for a in 0..D {
        buf.extend_from_slice(&(grid.dims[a] as u32).to_le_bytes());
    }
    for a in 0..D {
        buf.extend_from_slice(&grid.spacing[a].to_le_bytes());
    }
    for a in 0..D {
        buf.extend_from_slice(&grid.origin[a].to_le_bytes());
    }
    for c in &grid.coeffs {
        for i in 0..D {
            buf.extend_from_slice(&c[i].to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Field file of either supported dimension.
#[derive(Debug, Clone)]
pub enum AnyGrid {
    D2(ControlGrid<2>),
    D3(ControlGrid<3>),
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        if self.pos + n > self.data.len() {
            return Err(FieldError::Format("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FieldError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_grid<const D: usize>(cur: &mut Cursor) -> Result<ControlGrid<D>, FieldError> {
    let mut dims = [0usize; D];
    for d in dims.iter_mut() {
        *d = cur.u32()? as usize;
    }
    let mut spacing = [0.0; D];
    for s in spacing.iter_mut() {
        *s = cur.f64()?;
    }
    let mut origin = [0.0; D];
    for o in origin.iter_mut() {
        *o = cur.f64()?;
    }
    let mut grid = ControlGrid::<D>::new_zero(dims, spacing, origin)
        .map_err(|e| FieldError::Format(e.to_string()))?;
    for c in grid.coeffs_mut() {
        for i in 0..D {
            c[i] = cur.f64()?;
        }
    }
    if cur.pos != cur.data.len() {
        return Err(FieldError::Format(format!(
            "{} trailing bytes",
            cur.data.len() - cur.pos
        )));
    }
    Ok(grid)
}

pub fn read_eqgf(path: &Path) -> Result<AnyGrid, FieldError> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    let magic = cur.take(4)?;
    if magic != EQGF_MAGIC {
        return Err(FieldError::Format(format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != EQGF_VERSION {
        return Err(FieldError::Format(format!("unsupported version {version}")));
    }
    match cur.u32()? {
        2 => Ok(AnyGrid::D2(read_grid::<2>(&mut cur)?)),
        3 => Ok(AnyGrid::D3(read_grid::<3>(&mut cur)?)),
        d => Err(FieldError::Format(format!("unsupported dimension {d}"))),
    }
}
