//! Compressible Neo-Hookean constitutive law and the pointwise
//! equilibrium-gap residual `div P` with its squared-norm penalty.
//!
//! Everything is evaluated in closed form at a single material point from the
//! displacement gradient G and Hessian H; no discretization is involved. For
//! d = 2 the plane-strain embedding applies: F is conceptually 3x3 with
//! F33 = 1, so the first invariant gains a +1 and J is the in-plane
//! determinant.

use thiserror::Error;

use crate::tensor::{det, inv, rank3_zero, vnorm_sq, DualScalar, Rank3, Scalar, SmallMat};

#[derive(Debug, Error, PartialEq)]
pub enum MechanicsError {
    #[error("non-positive Jacobian determinant J = {j:.6e}")]
    NonPositiveJacobian { j: f64 },
    #[error("Poisson ratio {nu} outside [0, 0.5)")]
    InvalidPoisson { nu: f64 },
    #[error("Young's modulus {e} must be positive")]
    InvalidModulus { e: f64 },
}

/// Lamé parameters of the isotropic law, in pressure units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub mu: f64,
    pub lambda: f64,
}

/// Standard conversion from Young's modulus and Poisson ratio.
pub fn lame_from_youngs(e: f64, nu: f64) -> Result<MaterialParams, MechanicsError> {
    if e <= 0.0 {
        return Err(MechanicsError::InvalidModulus { e });
    }
    if !(0.0..0.5).contains(&nu) {
        return Err(MechanicsError::InvalidPoisson { nu });
    }
    Ok(MaterialParams {
        mu: e / (2.0 * (1.0 + nu)),
        lambda: e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)),
    })
}

/// Pointwise kinematic state: displacement gradient G and Hessian H.
///
/// H\[i\]\[j\]\[k\] = d2 u_i / dx_j dx_k must be symmetric in (j, k).
#[derive(Debug, Clone, Copy)]
pub struct Kinematics<T, const D: usize> {
    pub grad: SmallMat<T, D>,
    pub hess: Rank3<T, D>,
}

impl<T: Scalar, const D: usize> Kinematics<T, D> {
    pub fn new(grad: SmallMat<T, D>, hess: Rank3<T, D>) -> Self {
        Self { grad, hess }
    }

    /// F = I + G.
    #[inline]
    pub fn deformation_gradient(&self) -> SmallMat<T, D> {
        let mut f = self.grad;
        for i in 0..D {
            f.e[i][i] = f.e[i][i] + T::from_f64(1.0);
        }
        f
    }
}

#[inline]
fn check_j<T: Scalar, const D: usize>(f: &SmallMat<T, D>) -> Result<T, MechanicsError> {
    let j = det(f);
    if j.value() <= 0.0 {
        return Err(MechanicsError::NonPositiveJacobian { j: j.value() });
    }
    Ok(j)
}

/// Strain energy density; zero exactly on rotations.
///
/// For d = 2 the plane-strain invariant I_C = tr(F^T F) + 1 is used.
pub fn strain_energy<T: Scalar, const D: usize>(
    f: &SmallMat<T, D>,
    mat: &MaterialParams,
) -> Result<T, MechanicsError> {
    let j = check_j(f)?;
    let mut ic = T::from_f64((3 - D) as f64);
    for i in 0..D {
        for k in 0..D {
            ic = ic + f.e[i][k] * f.e[i][k];
        }
    }
    let lnj = j.ln();
    let two = T::from_f64(2.0);
    let psi = T::from_f64(mat.lambda / 4.0) * (j * j - T::from_f64(1.0) - two * lnj)
        + T::from_f64(mat.mu / 2.0) * (ic - T::from_f64(3.0) - two * lnj);
    Ok(psi)
}

/// First Piola-Kirchhoff stress P = (lambda/2)(J^2 - 1) F^-T + mu (F - F^-T).
pub fn pk1_stress<T: Scalar, const D: usize>(
    f: &SmallMat<T, D>,
    mat: &MaterialParams,
) -> Result<SmallMat<T, D>, MechanicsError> {
    let j = check_j(f)?;
    let finv_t = inv(f)
        .map_err(|_| MechanicsError::NonPositiveJacobian { j: j.value() })?
        .transpose();
    let pressure = T::from_f64(mat.lambda / 2.0) * (j * j - T::from_f64(1.0));
    let mut p = SmallMat::<T, D>::zero();
    let mu = T::from_f64(mat.mu);
    for i in 0..D {
        for k in 0..D {
            p.e[i][k] = pressure * finv_t.e[i][k] + mu * (f.e[i][k] - finv_t.e[i][k]);
        }
    }
    Ok(p)
}

/// (div F)_i = sum_j H\[i\]\[j\]\[j\] — the Laplacian of each displacement component.
#[inline]
pub fn div_f<T: Scalar, const D: usize>(kin: &Kinematics<T, D>) -> [T; D] {
    let mut out = [T::from_f64(0.0); D];
    for i in 0..D {
        for j in 0..D {
            out[i] = out[i] + kin.hess[i][j][j];
        }
    }
    out
}

/// Gradient of J by Jacobi's formula: (grad J)_k = J sum_ij (F^-T)_ij H\[i\]\[j\]\[k\].
pub fn grad_j<T: Scalar, const D: usize>(
    f: &SmallMat<T, D>,
    kin: &Kinematics<T, D>,
) -> Result<[T; D], MechanicsError> {
    let j = check_j(f)?;
    let finv_t = inv(f)
        .map_err(|_| MechanicsError::NonPositiveJacobian { j: j.value() })?
        .transpose();
    let mut out = [T::from_f64(0.0); D];
    for k in 0..D {
        let mut s = T::from_f64(0.0);
        for i in 0..D {
            for jj in 0..D {
                s = s + finv_t.e[i][jj] * kin.hess[i][jj][k];
            }
        }
        out[k] = j * s;
    }
    Ok(out)
}

/// (div F^-T)_i = sum_j d(F^-1)_ji / dx_j, via dF^-1/dx_k = -F^-1 (dF/dx_k) F^-1.
pub fn div_finv_t<T: Scalar, const D: usize>(
    f: &SmallMat<T, D>,
    kin: &Kinematics<T, D>,
) -> Result<[T; D], MechanicsError> {
    let j = check_j(f)?;
    let finv = inv(f).map_err(|_| MechanicsError::NonPositiveJacobian { j: j.value() })?;
    // out_i = -sum_j sum_ab Finv[j][a] H[a][b][j] Finv[b][i]
    let mut out = [T::from_f64(0.0); D];
    for i in 0..D {
        let mut s = T::from_f64(0.0);
        for jj in 0..D {
            for a in 0..D {
                for b in 0..D {
                    s = s + finv.e[jj][a] * kin.hess[a][b][jj] * finv.e[b][i];
                }
            }
        }
        out[i] = -s;
    }
    Ok(out)
}

/// Pointwise equilibrium gap
/// div P = (lambda/2)(2 J F^-T grad J + (J^2 - 1) div F^-T) + mu (div F - div F^-T).
///
/// Affine displacements (H = 0) give an exactly zero gap, whatever G is.
pub fn equilibrium_gap<T: Scalar, const D: usize>(
    kin: &Kinematics<T, D>,
    mat: &MaterialParams,
) -> Result<[T; D], MechanicsError> {
    let f = kin.deformation_gradient();
    let j = check_j(&f)?;
    let finv = inv(&f).map_err(|_| MechanicsError::NonPositiveJacobian { j: j.value() })?;
    let finv_t = finv.transpose();

    // mu (div F - div F^-T), reusing finv for the divergence of F^-T
    let dfv = div_f(kin);
    let mut dfinvt = [T::from_f64(0.0); D];
    for i in 0..D {
        let mut s = T::from_f64(0.0);
        for jj in 0..D {
            for a in 0..D {
                for b in 0..D {
                    s = s + finv.e[jj][a] * kin.hess[a][b][jj] * finv.e[b][i];
                }
            }
        }
        dfinvt[i] = -s;
    }

    let mu = T::from_f64(mat.mu);
    let mut gap = [T::from_f64(0.0); D];
    for i in 0..D {
        gap[i] = mu * (dfv[i] - dfinvt[i]);
    }

    if mat.lambda != 0.0 {
        let mut gj = [T::from_f64(0.0); D];
        for k in 0..D {
            let mut s = T::from_f64(0.0);
            for i in 0..D {
                for jj in 0..D {
                    s = s + finv_t.e[i][jj] * kin.hess[i][jj][k];
                }
            }
            gj[k] = j * s;
        }
        let fg = finv_t.matvec(&gj);
        let half_lambda = T::from_f64(mat.lambda / 2.0);
        let two_j = T::from_f64(2.0) * j;
        let j2m1 = j * j - T::from_f64(1.0);
        for i in 0..D {
            gap[i] = gap[i] + half_lambda * (two_j * fg[i] + j2m1 * dfinvt[i]);
        }
    }
    Ok(gap)
}

/// Squared Euclidean norm of the equilibrium gap.
pub fn gap_penalty<T: Scalar, const D: usize>(
    kin: &Kinematics<T, D>,
    mat: &MaterialParams,
) -> Result<T, MechanicsError> {
    let gap = equilibrium_gap(kin, mat)?;
    Ok(vnorm_sq(&gap))
}

/// Value and exact partial derivatives of [`gap_penalty`] at a point.
///
/// `wrt_hess` is the symmetric per-entry gradient: off-diagonal (j, k) slots
/// each carry half the derivative of the symmetric pair, so the full
/// contraction sum_ijk wrt_hess\[i\]\[j\]\[k\] dH\[i\]\[j\]\[k\] against a
/// symmetric perturbation dH is the directional derivative.
#[derive(Debug, Clone, Copy)]
pub struct GapGradient<const D: usize> {
    pub value: f64,
    pub wrt_grad: SmallMat<f64, D>,
    pub wrt_hess: Rank3<f64, D>,
}

/// Number of unique (j <= k) second-derivative slots per component.
const fn tri(d: usize) -> usize {
    d * (d + 1) / 2
}

#[inline]
fn tri_index(d: usize, j: usize, k: usize) -> usize {
    // index of (j, k) with j <= k in row-major upper-triangular order
    debug_assert!(j <= k && k < d);
    j * d + k - j * (j + 1) / 2
}

fn gap_sensitivities_impl<const N: usize, const D: usize>(
    kin: &Kinematics<f64, D>,
    mat: &MaterialParams,
) -> Result<GapGradient<D>, MechanicsError> {
    debug_assert_eq!(N, D * D + D * tri(D));
    let mut grad = SmallMat::<DualScalar<N>, D>::zero();
    for i in 0..D {
        for j in 0..D {
            grad.e[i][j] = DualScalar::seeded(kin.grad.e[i][j], i * D + j);
        }
    }
    let mut hess = rank3_zero::<DualScalar<N>, D>();
    for i in 0..D {
        for j in 0..D {
            for k in j..D {
                let slot = D * D + i * tri(D) + tri_index(D, j, k);
                let v = DualScalar::seeded(kin.hess[i][j][k], slot);
                hess[i][j][k] = v;
                hess[i][k][j] = v;
            }
        }
    }
    let dual_kin = Kinematics { grad, hess };
    let penalty = gap_penalty(&dual_kin, mat)?;

    let mut wrt_grad = SmallMat::<f64, D>::zero();
    for i in 0..D {
        for j in 0..D {
            wrt_grad.e[i][j] = penalty.eps[i * D + j];
        }
    }
    let mut wrt_hess = rank3_zero::<f64, D>();
    for i in 0..D {
        for j in 0..D {
            for k in j..D {
                let pair = penalty.eps[D * D + i * tri(D) + tri_index(D, j, k)];
                if j == k {
                    wrt_hess[i][j][j] = pair;
                } else {
                    wrt_hess[i][j][k] = 0.5 * pair;
                    wrt_hess[i][k][j] = 0.5 * pair;
                }
            }
        }
    }
    Ok(GapGradient {
        value: penalty.re,
        wrt_grad,
        wrt_hess,
    })
}

/// Forward-mode sensitivities of the gap penalty, one dual pass per point.
pub trait GapSensitivities<const D: usize> {
    fn gap_sensitivities(&self, mat: &MaterialParams) -> Result<GapGradient<D>, MechanicsError>;
}

impl GapSensitivities<2> for Kinematics<f64, 2> {
    fn gap_sensitivities(&self, mat: &MaterialParams) -> Result<GapGradient<2>, MechanicsError> {
        gap_sensitivities_impl::<10, 2>(self, mat)
    }
}

impl GapSensitivities<3> for Kinematics<f64, 3> {
    fn gap_sensitivities(&self, mat: &MaterialParams) -> Result<GapGradient<3>, MechanicsError> {
        gap_sensitivities_impl::<27, 3>(self, mat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::vsub;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotation2(theta: f64) -> SmallMat<f64, 2> {
        let (s, c) = theta.sin_cos();
        SmallMat::from_rows([[c, -s], [s, c]])
    }

    #[test]
    fn lame_conversion() {
        let m = lame_from_youngs(1.0, 0.0).unwrap();
        assert_eq!(m.mu, 0.5);
        assert_eq!(m.lambda, 0.0);

        let m = lame_from_youngs(1.0, 0.3).unwrap();
        assert_relative_eq!(m.mu, 0.3846153846, max_relative = 1e-9);
        assert_relative_eq!(m.lambda, 0.5769230769, max_relative = 1e-9);

        let m = lame_from_youngs(2.0, 0.0).unwrap();
        assert_eq!(m.mu, 1.0);
        assert_eq!(m.lambda, 0.0);

        assert!(matches!(
            lame_from_youngs(1.0, 0.5),
            Err(MechanicsError::InvalidPoisson { .. })
        ));
    }

    #[test]
    fn energy_zero_at_identity_and_rotations() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let psi = strain_energy(&SmallMat::<f64, 2>::identity(), &mat).unwrap();
        assert!(psi.abs() < 1e-15);

        let psi = strain_energy(&rotation2(30f64.to_radians()), &mat).unwrap();
        assert!(psi.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = rotation2(rng.random_range(-3.0..3.0));
            let psi = strain_energy(&r, &mat).unwrap();
            assert!(psi.abs() < 1e-12, "rotation energy {psi}");
        }
    }

    #[test]
    fn energy_biaxial_stretch_value() {
        let mat = MaterialParams {
            mu: 0.5,
            lambda: 0.0,
        };
        let f = SmallMat::<f64, 2>::from_rows([[2.0, 0.0], [0.0, 2.0]]);
        // I_C = 9 (plane strain), J = 4
        let expect = 0.25 * (6.0 - 2.0 * 4f64.ln());
        assert_relative_eq!(strain_energy(&f, &mat).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn energy_rejects_nonpositive_jacobian() {
        let mat = lame_from_youngs(1.0, 0.0).unwrap();
        let f = SmallMat::<f64, 2>::from_rows([[-1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            strain_energy(&f, &mat),
            Err(MechanicsError::NonPositiveJacobian { .. })
        ));
    }

    #[test]
    fn energy_nonnegative_random_states() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut n = 0;
        while n < 200 {
            let mut f = SmallMat::<f64, 2>::identity();
            for i in 0..2 {
                for j in 0..2 {
                    f.e[i][j] += rng.random_range(-0.6..0.6);
                }
            }
            if det(&f) <= 0.05 {
                continue;
            }
            assert!(strain_energy(&f, &mat).unwrap() >= -1e-14);
            n += 1;
        }
    }

    #[test]
    fn stress_zero_at_reference_and_rotations() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let p = pk1_stress(&SmallMat::<f64, 2>::identity(), &mat).unwrap();
        assert!(frob_norm(&p) < 1e-15);
        let p = pk1_stress(&rotation2(1.1), &mat).unwrap();
        assert!(frob_norm(&p) < 1e-12);
    }

    fn frob_norm(m: &SmallMat<f64, 2>) -> f64 {
        crate::tensor::frob_norm_sq(m).sqrt()
    }

    #[test]
    fn stress_is_energy_gradient() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        let mut n = 0;
        while n < 100 {
            let mut f = SmallMat::<f64, 2>::identity();
            for i in 0..2 {
                for j in 0..2 {
                    f.e[i][j] += rng.random_range(-0.5..0.5);
                }
            }
            if det(&f) <= 0.2 {
                continue;
            }
            let p = pk1_stress(&f, &mat).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let mut fp = f;
                    fp.e[i][j] += h;
                    let mut fm = f;
                    fm.e[i][j] -= h;
                    let fd = (strain_energy(&fp, &mat).unwrap()
                        - strain_energy(&fm, &mat).unwrap())
                        / (2.0 * h);
                    assert_relative_eq!(p.e[i][j], fd, max_relative = 1e-6, epsilon = 1e-9);
                }
            }
            n += 1;
        }
    }

    #[test]
    fn div_f_cases() {
        let mut kin = Kinematics::<f64, 2>::new(SmallMat::zero(), rank3_zero());
        assert_eq!(div_f(&kin), [0.0, 0.0]);
        kin.hess[0][0][0] = 2.0;
        assert_eq!(div_f(&kin), [2.0, 0.0]);
    }

    // u = (x^2, y^2): H[0][0][0] = 2, H[1][1][1] = 2 -> div F = (2, 2)
    #[test]
    fn div_f_quadratic_field() {
        let mut hess = rank3_zero::<f64, 2>();
        hess[0][0][0] = 2.0;
        hess[1][1][1] = 2.0;
        let kin = Kinematics::new(SmallMat::zero(), hess);
        assert_eq!(div_f(&kin), [2.0, 2.0]);
    }

    /// Analytic field helpers: u(x) with exact G(x), H(x) for FD oracles over position.
    struct AnalyticField {
        amp: f64,
    }

    impl AnalyticField {
        // u = (amp sin x sin y, amp x^2 y)
        fn grad(&self, x: [f64; 2]) -> SmallMat<f64, 2> {
            SmallMat::from_rows([
                [
                    self.amp * x[0].cos() * x[1].sin(),
                    self.amp * x[0].sin() * x[1].cos(),
                ],
                [2.0 * self.amp * x[0] * x[1], self.amp * x[0] * x[0]],
            ])
        }
        fn hess(&self, x: [f64; 2]) -> Rank3<f64, 2> {
            let mut h = rank3_zero();
            let a = self.amp;
            h[0][0][0] = -a * x[0].sin() * x[1].sin();
            h[0][0][1] = a * x[0].cos() * x[1].cos();
            h[0][1][0] = h[0][0][1];
            h[0][1][1] = -a * x[0].sin() * x[1].sin();
            h[1][0][0] = 2.0 * a * x[1];
            h[1][0][1] = 2.0 * a * x[0];
            h[1][1][0] = h[1][0][1];
            h[1][1][1] = 0.0;
            h
        }
        fn kin(&self, x: [f64; 2]) -> Kinematics<f64, 2> {
            Kinematics::new(self.grad(x), self.hess(x))
        }
        fn def_grad(&self, x: [f64; 2]) -> SmallMat<f64, 2> {
            self.kin(x).deformation_gradient()
        }
    }

    #[test]
    fn grad_j_cases_and_fd() {
        // H = 0 -> zero
        let kin = Kinematics::<f64, 2>::new(SmallMat::from_rows([[0.2, 0.1], [0.0, -0.1]]), rank3_zero());
        let f = kin.deformation_gradient();
        assert_eq!(grad_j(&f, &kin).unwrap(), [0.0, 0.0]);

        // F = identity -> trace reduction
        let mut hess = rank3_zero::<f64, 2>();
        hess[0][0][0] = 0.3;
        hess[0][0][1] = 0.7;
        hess[0][1][0] = 0.7;
        hess[1][1][0] = -0.2;
        hess[1][0][1] = -0.2;
        hess[1][1][1] = 0.4;
        let kin = Kinematics::new(SmallMat::zero(), hess);
        let f = kin.deformation_gradient();
        let gj = grad_j(&f, &kin).unwrap();
        for k in 0..2 {
            let expect = hess[0][0][k] + hess[1][1][k];
            assert_relative_eq!(gj[k], expect, max_relative = 1e-14);
        }

        // u = (0.1 x^2, 0) at x = (0.5, 0.5) against FD of J(x)
        let x = [0.5, 0.5];
        let grad = SmallMat::from_rows([[0.2 * x[0], 0.0], [0.0, 0.0]]);
        let mut hess = rank3_zero::<f64, 2>();
        hess[0][0][0] = 0.2;
        let kin = Kinematics::new(grad, hess);
        let f = kin.deformation_gradient();
        let gj = grad_j(&f, &kin).unwrap();
        let jat = |p: [f64; 2]| -> f64 {
            let g = SmallMat::<f64, 2>::from_rows([[0.2 * p[0], 0.0], [0.0, 0.0]]);
            det(&Kinematics::new(g, rank3_zero()).deformation_gradient())
        };
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fd = (jat(xp) - jat(xm)) / (2.0 * h);
            assert_relative_eq!(gj[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn div_finv_t_cases_and_fd() {
        // H = 0 -> zero
        let kin = Kinematics::<f64, 2>::new(SmallMat::from_rows([[0.2, 0.1], [0.0, -0.1]]), rank3_zero());
        let f = kin.deformation_gradient();
        assert_eq!(div_finv_t(&f, &kin).unwrap(), [0.0, 0.0]);

        // F = identity -> first-order expansion: component i = -sum_j H[j][i][j]
        let mut hess = rank3_zero::<f64, 2>();
        hess[0][0][0] = 0.3;
        hess[0][0][1] = 0.7;
        hess[0][1][0] = 0.7;
        hess[1][0][0] = 0.1;
        hess[1][0][1] = -0.2;
        hess[1][1][0] = -0.2;
        hess[1][1][1] = 0.4;
        let kin = Kinematics::new(SmallMat::zero(), hess);
        let f = kin.deformation_gradient();
        let dv = div_finv_t(&f, &kin).unwrap();
        for i in 0..2 {
            let expect = -(hess[0][i][0] + hess[1][i][1]);
            assert_relative_eq!(dv[i], expect, max_relative = 1e-14);
        }

        // analytic polynomial/trig field against FD of the F^-T(x) field
        let field = AnalyticField { amp: 0.08 };
        let x = [0.4, 0.7];
        let kin = field.kin(x);
        let f = field.def_grad(x);
        let dv = div_finv_t(&f, &kin).unwrap();
        let h = 1e-6;
        let finv_t_at = |p: [f64; 2]| inv(&field.def_grad(p)).unwrap().transpose();
        for i in 0..2 {
            let mut fd = 0.0;
            for j in 0..2 {
                let mut xp = x;
                xp[j] += h;
                let mut xm = x;
                xm[j] -= h;
                fd += (finv_t_at(xp).e[i][j] - finv_t_at(xm).e[i][j]) / (2.0 * h);
            }
            assert_relative_eq!(dv[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn gap_zero_for_affine_fields() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut n = 0;
        while n < 20 {
            let mut g = SmallMat::<f64, 2>::zero();
            for i in 0..2 {
                for j in 0..2 {
                    g.e[i][j] = rng.random_range(-0.4..0.4);
                }
            }
            let kin = Kinematics::new(g, rank3_zero());
            if det(&kin.deformation_gradient()) <= 0.05 {
                continue;
            }
            let gap = equilibrium_gap(&kin, &mat).unwrap();
            assert!(gap[0].abs() <= 1e-14 && gap[1].abs() <= 1e-14);
            assert!(gap_penalty(&kin, &mat).unwrap() <= 1e-14);
            n += 1;
        }
    }

    // FD-of-stress oracle: (div P)_i ~= sum_j [P_ij(x + h e_j) - P_ij(x - h e_j)] / 2h
    fn gap_vs_fd_of_stress(mat: &MaterialParams, amp: f64) {
        let field = AnalyticField { amp };
        let h = 1e-5;
        for &x in &[[0.3, 0.4], [0.8, 0.6], [1.1, 0.9], [0.5, 1.2]] {
            let kin = field.kin(x);
            let gap = equilibrium_gap(&kin, mat).unwrap();
            for i in 0..2 {
                let mut fd = 0.0;
                for j in 0..2 {
                    let mut xp = x;
                    xp[j] += h;
                    let mut xm = x;
                    xm[j] -= h;
                    let pp = pk1_stress(&field.def_grad(xp), mat).unwrap();
                    let pm = pk1_stress(&field.def_grad(xm), mat).unwrap();
                    fd += (pp.e[i][j] - pm.e[i][j]) / (2.0 * h);
                }
                assert!(
                    (gap[i] - fd).abs() < 1e-5,
                    "gap[{i}] = {} vs fd {} at {x:?}",
                    gap[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn gap_matches_fd_of_stress_field() {
        gap_vs_fd_of_stress(
            &MaterialParams {
                mu: 0.5,
                lambda: 0.0,
            },
            0.05,
        );
        gap_vs_fd_of_stress(
            &MaterialParams {
                mu: 0.5,
                lambda: 0.3,
            },
            0.05,
        );
    }

    #[test]
    fn penalty_is_norm_of_gap() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let field = AnalyticField { amp: 0.07 };
        let kin = field.kin([0.6, 0.5]);
        let gap = equilibrium_gap(&kin, &mat).unwrap();
        let pen = gap_penalty(&kin, &mat).unwrap();
        assert_relative_eq!(pen, gap[0] * gap[0] + gap[1] * gap[1], max_relative = 1e-14);
    }

    #[test]
    fn penalty_frame_invariant_under_rotation() {
        // u'(x) = R(x + u(x)) - x  =>  G' = R(I+G) - I, H'[i] = sum_a R[i][a] H[a]
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let field = AnalyticField { amp: 0.06 };
        let x = [0.7, 0.4];
        let kin = field.kin(x);
        let base = gap_penalty(&kin, &mat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let r = rotation2(rng.random_range(-3.0..3.0));
            let f = kin.deformation_gradient();
            let grad_rot = r.matmul(&f).sub_mat(&SmallMat::identity());
            let mut hess_rot = rank3_zero::<f64, 2>();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for a in 0..2 {
                            hess_rot[i][j][k] += r.e[i][a] * kin.hess[a][j][k];
                        }
                    }
                }
            }
            let rot_kin = Kinematics::new(grad_rot, hess_rot);
            let pen = gap_penalty(&rot_kin, &mat).unwrap();
            assert_relative_eq!(pen, base, max_relative = 1e-10);
        }
    }

    #[test]
    fn penalty_scales_quadratically_in_material() {
        let field = AnalyticField { amp: 0.06 };
        let kin = field.kin([0.5, 0.8]);
        let m1 = MaterialParams {
            mu: 0.5,
            lambda: 0.25,
        };
        let m2 = MaterialParams {
            mu: 1.0,
            lambda: 0.5,
        };
        let p1 = gap_penalty(&kin, &m1).unwrap();
        let p2 = gap_penalty(&kin, &m2).unwrap();
        assert_relative_eq!(p2, 4.0 * p1, max_relative = 1e-15);
    }

    fn fd_pair_derivative(
        kin: &Kinematics<f64, 2>,
        mat: &MaterialParams,
        i: usize,
        j: usize,
        k: usize,
        h: f64,
    ) -> f64 {
        let mut kp = *kin;
        kp.hess[i][j][k] += h;
        if j != k {
            kp.hess[i][k][j] += h;
        }
        let mut km = *kin;
        km.hess[i][j][k] -= h;
        if j != k {
            km.hess[i][k][j] -= h;
        }
        (gap_penalty(&kp, mat).unwrap() - gap_penalty(&km, mat).unwrap()) / (2.0 * h)
    }

    #[test]
    fn gap_sensitivities_match_fd() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..25 {
            let mut grad = SmallMat::<f64, 2>::zero();
            for i in 0..2 {
                for j in 0..2 {
                    grad.e[i][j] = rng.random_range(-0.3..0.3);
                }
            }
            let mut hess = rank3_zero::<f64, 2>();
            for i in 0..2 {
                for j in 0..2 {
                    for k in j..2 {
                        let v = rng.random_range(-0.5..0.5);
                        hess[i][j][k] = v;
                        hess[i][k][j] = v;
                    }
                }
            }
            let kin = Kinematics::new(grad, hess);
            if det(&kin.deformation_gradient()) <= 0.3 {
                continue;
            }
            let sens = kin.gap_sensitivities(&mat).unwrap();
            assert_relative_eq!(
                sens.value,
                gap_penalty(&kin, &mat).unwrap(),
                max_relative = 1e-14
            );
            for i in 0..2 {
                for j in 0..2 {
                    let mut kp = kin;
                    kp.grad.e[i][j] += h;
                    let mut km = kin;
                    km.grad.e[i][j] -= h;
                    let fd = (gap_penalty(&kp, &mat).unwrap() - gap_penalty(&km, &mat).unwrap())
                        / (2.0 * h);
                    assert_relative_eq!(
                        sens.wrt_grad.e[i][j],
                        fd,
                        max_relative = 1e-5,
                        epsilon = 1e-7
                    );
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    for k in j..2 {
                        let fd = fd_pair_derivative(&kin, &mat, i, j, k, h);
                        let pair = if j == k {
                            sens.wrt_hess[i][j][j]
                        } else {
                            sens.wrt_hess[i][j][k] + sens.wrt_hess[i][k][j]
                        };
                        assert_relative_eq!(pair, fd, max_relative = 1e-5, epsilon = 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn gap_sensitivities_affine_grad_direction_zero() {
        // affine field: penalty stays zero under G perturbations (gap identically
        // zero whenever H = 0), so the G-sensitivities vanish
        let mat = lame_from_youngs(1.0, 0.0).unwrap();
        let grad = SmallMat::<f64, 2>::from_rows([[0.1, 0.05], [-0.02, 0.2]]);
        let kin = Kinematics::new(grad, rank3_zero());
        let sens = kin.gap_sensitivities(&mat).unwrap();
        assert_eq!(sens.value, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!(sens.wrt_grad.e[i][j].abs() < 1e-14);
            }
        }
        // H-direction: penalty is quadratic at H = 0, so first derivatives are
        // also zero there; verify against FD
        for i in 0..2 {
            for j in 0..2 {
                for k in j..2 {
                    let fd = fd_pair_derivative(&kin, &mat, i, j, k, 1e-6);
                    let pair = if j == k {
                        sens.wrt_hess[i][j][j]
                    } else {
                        sens.wrt_hess[i][j][k] + sens.wrt_hess[i][k][j]
                    };
                    assert!((pair - fd).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn gap_sensitivities_3d_match_fd() {
        let mat = lame_from_youngs(1.0, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let h = 1e-6;
        for _ in 0..5 {
            let mut grad = SmallMat::<f64, 3>::zero();
            for i in 0..3 {
                for j in 0..3 {
                    grad.e[i][j] = rng.random_range(-0.2..0.2);
                }
            }
            let mut hess = rank3_zero::<f64, 3>();
            for i in 0..3 {
                for j in 0..3 {
                    for k in j..3 {
                        let v = rng.random_range(-0.4..0.4);
                        hess[i][j][k] = v;
                        hess[i][k][j] = v;
                    }
                }
            }
            let kin = Kinematics::new(grad, hess);
            if det(&kin.deformation_gradient()) <= 0.3 {
                continue;
            }
            let sens = kin.gap_sensitivities(&mat).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut kp = kin;
                    kp.grad.e[i][j] += h;
                    let mut km = kin;
                    km.grad.e[i][j] -= h;
                    let fd = (gap_penalty(&kp, &mat).unwrap() - gap_penalty(&km, &mat).unwrap())
                        / (2.0 * h);
                    assert_relative_eq!(
                        sens.wrt_grad.e[i][j],
                        fd,
                        max_relative = 1e-5,
                        epsilon = 1e-6
                    );
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    for k in j..3 {
                        let mut kp = kin;
                        kp.hess[i][j][k] += h;
                        if j != k {
                            kp.hess[i][k][j] += h;
                        }
                        let mut km = kin;
                        km.hess[i][j][k] -= h;
                        if j != k {
                            km.hess[i][k][j] -= h;
                        }
                        let fd = (gap_penalty(&kp, &mat).unwrap()
                            - gap_penalty(&km, &mat).unwrap())
                            / (2.0 * h);
                        let pair = if j == k {
                            sens.wrt_hess[i][j][j]
                        } else {
                            sens.wrt_hess[i][j][k] + sens.wrt_hess[i][k][j]
                        };
                        assert_relative_eq!(pair, fd, max_relative = 1e-5, epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn gap_3d_affine_zero() {
        let mat = lame_from_youngs(1.0, 0.3).unwrap();
        let grad = SmallMat::<f64, 3>::from_rows([
            [0.1, 0.02, -0.03],
            [0.0, -0.05, 0.04],
            [0.01, 0.0, 0.12],
        ]);
        let kin = Kinematics::new(grad, rank3_zero());
        let gap = equilibrium_gap(&kin, &mat).unwrap();
        assert_eq!(vsub(&gap, &[0.0; 3]), [0.0; 3]);
    }
}
