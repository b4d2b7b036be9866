//! Plane-strain Neo-Hookean elastostatics on the structured mesh: residual
//! and consistent-tangent assembly, and a load-stepped Newton solver with a
//! sparse direct linear solve.
//!
//! The element tangent is the exact derivative of the element residual,
//! obtained by running the residual kernel on forward-mode duals seeded per
//! element dof.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};

use super::mesh::FeMesh;
use super::SynthError;
use crate::mechanics::{pk1_stress, strain_energy, MaterialParams};
use crate::tensor::{det, DualScalar, Scalar, SmallMat};

/// Converged solution of the elastostatic problem.
#[derive(Debug, Clone)]
pub struct FeSolution {
    /// Nodal displacements.
    pub displacements: Vec<[f64; 2]>,
    /// Total Newton iterations (residual evaluations) across load steps.
    pub iterations: usize,
    /// Final free-node residual infinity norm.
    pub final_residual: f64,
    /// Volume-average Jacobian determinant over the mesh.
    pub mean_j: f64,
    /// Minimum Jacobian determinant over all quadrature points.
    pub min_j: f64,
    /// Total strain energy.
    pub energy: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub residual_tol: f64,
    pub max_iterations: usize,
    pub load_steps: usize,
    pub max_backtracks: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            residual_tol: 1e-10,
            max_iterations: 30,
            load_steps: 5,
            max_backtracks: 10,
        }
    }
}

/// Deformation gradient at a tabulated quadrature point from element nodal
/// displacements.
#[inline]
fn def_grad_at<T: Scalar>(shape: &[super::mesh::ShapeVals], d: &[[T; 2]]) -> SmallMat<T, 2> {
    let mut f = SmallMat::<T, 2>::identity();
    for (a, sv) in shape.iter().enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                f.e[i][j] = f.e[i][j] + d[a][i] * T::from_f64(sv.d[j]);
            }
        }
    }
    f
}

/// Element internal-force residual r\[a\]\[i\] = sum_gp w detJ P_ij dN_a/dx_j.
fn element_residual<T: Scalar>(
    mesh: &FeMesh,
    d: &[[T; 2]],
    mat: &MaterialParams,
    out: &mut [[T; 2]],
) -> Result<(), SynthError> {
    for r in out.iter_mut() {
        *r = [T::from_f64(0.0); 2];
    }
    for gp in &mesh.gauss {
        let f = def_grad_at(gp.shape.as_slice(), d);
        if det(&f).value() <= 0.0 {
            return Err(SynthError::NonPositiveJacobian { element: usize::MAX });
        }
        let p = pk1_stress(&f, mat).map_err(|_| SynthError::NonPositiveJacobian {
            element: usize::MAX,
        })?;
        let w = T::from_f64(gp.weight_det);
        for (a, sv) in gp.shape.iter().enumerate() {
            for i in 0..2 {
                let mut s = T::from_f64(0.0);
                for j in 0..2 {
                    s = s + p.e[i][j] * T::from_f64(sv.d[j]);
                }
                out[a][i] = out[a][i] + s * w;
            }
        }
    }
    Ok(())
}

/// Internal state shared by the assembly routines.
pub struct System<'m> {
    pub mesh: &'m FeMesh,
    pub mat: MaterialParams,
    /// Equation number per node, None for prescribed (boundary) nodes.
    pub free_eq: Vec<Option<usize>>,
    pub num_free: usize,
}

impl<'m> System<'m> {
    pub fn new(mesh: &'m FeMesh, mat: MaterialParams) -> Self {
        let mut free_eq = vec![None; mesh.num_nodes()];
        let mut num_free = 0;
        for n in 0..mesh.num_nodes() {
            if !mesh.is_boundary_node(n) {
                free_eq[n] = Some(num_free);
                num_free += 1;
            }
        }
        Self {
            mesh,
            mat,
            free_eq,
            num_free,
        }
    }

    fn gather<T: Scalar>(&self, e: usize, u: &[[f64; 2]], d: &mut Vec<[T; 2]>) {
        d.clear();
        for a in 0..self.mesh.nodes_per_elem() {
            let n = self.mesh.elem_node(e, a);
            d.push([T::from_f64(u[n][0]), T::from_f64(u[n][1])]);
        }
    }

    /// Assembled free-dof residual vector.
    pub fn residual(&self, u: &[[f64; 2]]) -> Result<Vec<f64>, SynthError> {
        let npe = self.mesh.nodes_per_elem();
        let mut r = vec![0.0; 2 * self.num_free];
        let mut d: Vec<[f64; 2]> = Vec::with_capacity(npe);
        let mut re = vec![[0.0; 2]; npe];
        for e in 0..self.mesh.num_elems() {
            self.gather::<f64>(e, u, &mut d);
            element_residual(self.mesh, &d, &self.mat, &mut re)
                .map_err(|_| SynthError::NonPositiveJacobian { element: e })?;
            for a in 0..npe {
                if let Some(eq) = self.free_eq[self.mesh.elem_node(e, a)] {
                    r[2 * eq] += re[a][0];
                    r[2 * eq + 1] += re[a][1];
                }
            }
        }
        Ok(r)
    }

    /// Consistent tangent on the free dofs as sparse triplets.
    pub fn tangent_triplets(&self, u: &[[f64; 2]]) -> Result<Vec<Triplet<usize, usize, f64>>, SynthError> {
        match self.mesh.order {
            1 => self.tangent_impl::<8>(u),
            2 => self.tangent_impl::<18>(u),
            o => panic!("unsupported order {o}"),
        }
    }

    fn tangent_impl<const N: usize>(
        &self,
        u: &[[f64; 2]],
    ) -> Result<Vec<Triplet<usize, usize, f64>>, SynthError> {
        let npe = self.mesh.nodes_per_elem();
        debug_assert_eq!(N, 2 * npe);
        let mut trips = Vec::with_capacity(self.mesh.num_elems() * N * N / 2);
        let mut d: Vec<[DualScalar<N>; 2]> = Vec::with_capacity(npe);
        let mut re = vec![[DualScalar::<N>::constant(0.0); 2]; npe];
        for e in 0..self.mesh.num_elems() {
            d.clear();
            for a in 0..npe {
                let n = self.mesh.elem_node(e, a);
                d.push([
                    DualScalar::seeded(u[n][0], 2 * a),
                    DualScalar::seeded(u[n][1], 2 * a + 1),
                ]);
            }
            element_residual(self.mesh, &d, &self.mat, &mut re)
                .map_err(|_| SynthError::NonPositiveJacobian { element: e })?;
            for a in 0..npe {
                let Some(row_eq) = self.free_eq[self.mesh.elem_node(e, a)] else {
                    continue;
                };
                for i in 0..2 {
                    let row = 2 * row_eq + i;
                    for b in 0..npe {
                        let Some(col_eq) = self.free_eq[self.mesh.elem_node(e, b)] else {
                            continue;
                        };
                        for j in 0..2 {
                            let v = re[a][i].eps[2 * b + j];
                            if v != 0.0 {
                                trips.push(Triplet::new(row, 2 * col_eq + j, v));
                            }
                        }
                    }
                }
            }
        }
        Ok(trips)
    }

    /// Total energy, volume-average J and minimum J over quadrature points.
    pub fn stats(&self, u: &[[f64; 2]]) -> Result<(f64, f64, f64), SynthError> {
        let npe = self.mesh.nodes_per_elem();
        let mut d: Vec<[f64; 2]> = Vec::with_capacity(npe);
        let mut energy = 0.0;
        let mut j_int = 0.0;
        let mut vol = 0.0;
        let mut min_j = f64::INFINITY;
        for e in 0..self.mesh.num_elems() {
            self.gather::<f64>(e, u, &mut d);
            for gp in &self.mesh.gauss {
                let f = def_grad_at(gp.shape.as_slice(), &d);
                let j = det(&f);
                if j <= 0.0 {
                    return Err(SynthError::NonPositiveJacobian { element: e });
                }
                min_j = min_j.min(j);
                let psi = strain_energy(&f, &self.mat)
                    .map_err(|_| SynthError::NonPositiveJacobian { element: e })?;
                energy += psi * gp.weight_det;
                j_int += j * gp.weight_det;
                vol += gp.weight_det;
            }
        }
        Ok((energy, j_int / vol, min_j))
    }
}

fn infinity_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solve the Dirichlet elastostatic problem. `bc` holds samples of a smooth
/// displacement field at every node: boundary nodes are prescribed to the
/// (ramped) values, and each load step seeds the free interior with the same
/// ramped field as initial guess, so the start state stays admissible on
/// fine meshes.
pub fn fe_solve_newton(
    mesh: &FeMesh,
    bc: &[[f64; 2]],
    mat: &MaterialParams,
    opts: &NewtonOptions,
) -> Result<FeSolution, SynthError> {
    assert_eq!(bc.len(), mesh.num_nodes());
    faer::set_global_parallelism(faer::Par::Seq);

    let sys = System::new(mesh, *mat);
    let mut u = vec![[0.0; 2]; mesh.num_nodes()];
    let mut iterations = 0usize;
    let mut final_residual = f64::INFINITY;

    for step in 1..=opts.load_steps {
        let ramp = step as f64 / opts.load_steps as f64;
        let dramp = 1.0 / opts.load_steps as f64;
        for n in 0..mesh.num_nodes() {
            if mesh.is_boundary_node(n) {
                u[n] = [ramp * bc[n][0], ramp * bc[n][1]];
            } else {
                u[n][0] += dramp * bc[n][0];
                u[n][1] += dramp * bc[n][1];
            }
        }

        let mut converged = false;
        for _ in 0..opts.max_iterations {
            let r = sys.residual(&u)?;
            iterations += 1;
            let norm = infinity_norm(&r);
            final_residual = norm;
            if norm < opts.residual_tol {
                converged = true;
                break;
            }

            let trips = sys.tangent_triplets(&u)?;
            let k = SparseColMat::<usize, f64>::try_new_from_triplets(
                2 * sys.num_free,
                2 * sys.num_free,
                &trips,
            )
            .map_err(|e| SynthError::LinearSolve(format!("triplet assembly: {e:?}")))?;
            let lu = k
                .sp_lu()
                .map_err(|e| SynthError::LinearSolve(format!("sparse LU: {e:?}")))?;
            let rhs = faer::Mat::from_fn(2 * sys.num_free, 1, |i, _| -r[i]);
            let delta = lu.solve(&rhs);

            // take the full step; halve while it leaves the admissible set
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_backtracks {
                let mut trial = u.clone();
                for n in 0..mesh.num_nodes() {
                    if let Some(eq) = sys.free_eq[n] {
                        trial[n][0] += alpha * delta[(2 * eq, 0)];
                        trial[n][1] += alpha * delta[(2 * eq + 1, 0)];
                    }
                }
                if sys.residual(&trial).is_ok() {
                    u = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(SynthError::NonConvergence {
                    step,
                    iterations,
                    residual: norm,
                });
            }
        }
        if !converged {
            return Err(SynthError::NonConvergence {
                step,
                iterations,
                residual: final_residual,
            });
        }
    }

    let (energy, mean_j, min_j) = sys.stats(&u)?;
    Ok(FeSolution {
        displacements: u,
        iterations,
        final_residual,
        mean_j,
        min_j,
        energy,
    })
}

/// Solve with defaults, retrying once with the full 10 load increments.
pub fn fe_solve_auto(
    mesh: &FeMesh,
    bc: &[[f64; 2]],
    mat: &MaterialParams,
) -> Result<FeSolution, SynthError> {
    let opts = NewtonOptions::default();
    match fe_solve_newton(mesh, bc, mat, &opts) {
        Ok(sol) => Ok(sol),
        Err(SynthError::NonConvergence { .. }) => fe_solve_newton(
            mesh,
            bc,
            mat,
            &NewtonOptions {
                load_steps: 10,
                ..opts
            },
        ),
        Err(e) => Err(e),
    }
}
