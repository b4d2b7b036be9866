//! Structured quad mesh over the unit square with bilinear (Q4) or
//! biquadratic (Q9) Lagrange elements.
//!
//! Elements are axis-aligned and congruent, so shape-function derivatives in
//! physical coordinates are identical for every element and can be tabulated
//! once per quadrature point.

/// Shape value and physical derivatives of one local basis function at one
/// local point. `dd` packs (xx, xy, yy).
#[derive(Debug, Clone, Copy)]
pub struct ShapeVals {
    pub n: f64,
    pub d: [f64; 2],
    pub dd: [f64; 3],
}

/// Tabulated quadrature point: physical-space shape data and w * detJ.
#[derive(Debug, Clone)]
pub struct GaussPoint {
    pub weight_det: f64,
    pub shape: Vec<ShapeVals>,
}

#[derive(Debug, Clone)]
pub struct FeMesh {
    /// Elements per side.
    pub n: usize,
    /// Element order: 1 (Q4) or 2 (Q9).
    pub order: usize,
    /// Nodes per side of the node lattice.
    pub nodes_per_side: usize,
    /// Node positions, x fastest.
    pub nodes: Vec<[f64; 2]>,
    /// Element edge length.
    pub h: f64,
    /// Tabulated quadrature rule (2x2 for Q4, 3x3 for Q9).
    pub gauss: Vec<GaussPoint>,
}

fn lagrange_1d(order: usize, xi: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    match order {
        1 => (
            vec![0.5 * (1.0 - xi), 0.5 * (1.0 + xi)],
            vec![-0.5, 0.5],
            vec![0.0, 0.0],
        ),
        2 => (
            vec![0.5 * xi * (xi - 1.0), 1.0 - xi * xi, 0.5 * xi * (xi + 1.0)],
            vec![xi - 0.5, -2.0 * xi, xi + 0.5],
            vec![1.0, -2.0, 1.0],
        ),
        _ => panic!("unsupported element order {order}"),
    }
}

/// Shape values at local coordinates (xi, eta) in [-1, 1]^2 for an element
/// of physical size h; local node index a = lj * (order + 1) + li.
pub fn shape_values(order: usize, h: f64, xi: f64, eta: f64) -> Vec<ShapeVals> {
    let (lx, dlx, ddlx) = lagrange_1d(order, xi);
    let (ly, dly, ddly) = lagrange_1d(order, eta);
    let s = 2.0 / h; // d xi / dx for the affine element map
    let mut out = Vec::with_capacity((order + 1) * (order + 1));
    for lj in 0..=order {
        for li in 0..=order {
            out.push(ShapeVals {
                n: lx[li] * ly[lj],
                d: [dlx[li] * ly[lj] * s, lx[li] * dly[lj] * s],
                dd: [
                    ddlx[li] * ly[lj] * s * s,
                    dlx[li] * dly[lj] * s * s,
                    lx[li] * ddly[lj] * s * s,
                ],
            });
        }
    }
    out
}

fn gauss_rule(order: usize) -> Vec<(f64, f64)> {
    // (coordinate, weight) pairs of the 1D rule
    match order {
        1 => {
            let g = 1.0 / 3f64.sqrt();
            vec![(-g, 1.0), (g, 1.0)]
        }
        2 => {
            let g = 0.6f64.sqrt();
            vec![(-g, 5.0 / 9.0), (0.0, 8.0 / 9.0), (g, 5.0 / 9.0)]
        }
        _ => panic!("unsupported element order {order}"),
    }
}

impl FeMesh {
    pub fn unit_square(n: usize, order: usize) -> Self {
        assert!(n >= 1 && (order == 1 || order == 2));
        let nodes_per_side = order * n + 1;
        let dx = 1.0 / (order * n) as f64;
        let mut nodes = Vec::with_capacity(nodes_per_side * nodes_per_side);
        for j in 0..nodes_per_side {
            for i in 0..nodes_per_side {
                nodes.push([i as f64 * dx, j as f64 * dx]);
            }
        }
        let h = 1.0 / n as f64;
        let rule = gauss_rule(order);
        let det_j = (h / 2.0) * (h / 2.0);
        let mut gauss = Vec::new();
        for &(eta, wy) in &rule {
            for &(xi, wx) in &rule {
                gauss.push(GaussPoint {
                    weight_det: wx * wy * det_j,
                    shape: shape_values(order, h, xi, eta),
                });
            }
        }
        Self {
            n,
            order,
            nodes_per_side,
            nodes,
            h,
            gauss,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elems(&self) -> usize {
        self.n * self.n
    }

    pub fn nodes_per_elem(&self) -> usize {
        (self.order + 1) * (self.order + 1)
    }

    /// Global node id of local node a in element e.
    #[inline]
    pub fn elem_node(&self, e: usize, a: usize) -> usize {
        let per = self.order + 1;
        let (ei, ej) = (e % self.n, e / self.n);
        let (li, lj) = (a % per, a / per);
        (ej * self.order + lj) * self.nodes_per_side + ei * self.order + li
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        let nps = self.nodes_per_side;
        let (i, j) = (node % nps, node / nps);
        i == 0 || j == 0 || i == nps - 1 || j == nps - 1
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&n| self.is_boundary_node(n))
            .collect()
    }
}
