//! Binary image synthesis from a converged FE solution: the undeformed and
//! deformed unit-square boundaries are turned into closed polylines (boundary
//! edges subdivided 8x and pushed through the FE displacement), then filled
//! with an even-odd scanline rule on a canvas with margin for deformation.

use super::mesh::{shape_values, FeMesh};
use crate::image::Image;

/// Canvas bounds: [-0.5, 1.5]^2 leaves a 0.5 margin around the unit square.
pub const CANVAS_LO: f64 = -0.5;
pub const CANVAS_HI: f64 = 1.5;
/// Subdivisions per boundary element edge.
pub const EDGE_SUBDIV: usize = 8;

/// Closed polygon of the (displaced) unit-square boundary, walked
/// counterclockwise. Passing zero displacements yields the undeformed square.
pub fn boundary_polygon(mesh: &FeMesh, displacements: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = mesh.n;
    let h = mesh.h;
    let npe = mesh.nodes_per_elem();
    let mut poly = Vec::with_capacity(4 * n * EDGE_SUBDIV);

    // (element, fixed local coord, axis along edge, walk direction)
    // bottom: eta = -1, xi varies +; right: xi = +1, eta +;
    // top: eta = +1, xi -; left: xi = -1, eta -.
    let mut emit = |e: usize, side: usize| {
        for s in 0..EDGE_SUBDIV {
            let t = -1.0 + 2.0 * (s as f64) / EDGE_SUBDIV as f64;
            let (xi, eta) = match side {
                0 => (t, -1.0),
                1 => (1.0, t),
                2 => (-t, 1.0),
                _ => (-1.0, -t),
            };
            let sv = shape_values(mesh.order, h, xi, eta);
            let (ei, ej) = (e % n, e / n);
            let corner = [ei as f64 * h, ej as f64 * h];
            let mut p = [
                corner[0] + (xi + 1.0) / 2.0 * h,
                corner[1] + (eta + 1.0) / 2.0 * h,
            ];
            for a in 0..npe {
                let node = mesh.elem_node(e, a);
                p[0] += sv[a].n * displacements[node][0];
                p[1] += sv[a].n * displacements[node][1];
            }
            poly.push(p);
        }
    };

    for ei in 0..n {
        emit(ei, 0);
    }
    for ej in 0..n {
        emit(ej * n + (n - 1), 1);
    }
    for ei in (0..n).rev() {
        emit((n - 1) * n + ei, 2);
    }
    for ej in (0..n).rev() {
        emit(ej * n, 3);
    }
    poly
}

/// Even-odd scanline fill of a closed polygon onto a `res x res` binary
/// image over the canvas.
pub fn fill_polygon(poly: &[[f64; 2]], res: usize) -> Image<2> {
    let spacing = (CANVAS_HI - CANVAS_LO) / res as f64;
    let origin = CANVAS_LO + spacing / 2.0;
    let mut voxels = vec![0.0; res * res];

    let mut crossings: Vec<f64> = Vec::new();
    for row in 0..res {
        let yc = origin + row as f64 * spacing;
        crossings.clear();
        for k in 0..poly.len() {
            let p = poly[k];
            let q = poly[(k + 1) % poly.len()];
            // half-open rule avoids double counting at shared vertices
            if (p[1] <= yc) != (q[1] <= yc) {
                let t = (yc - p[1]) / (q[1] - p[1]);
                crossings.push(p[0] + t * (q[0] - p[0]));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks_exact(2) {
            let (x0, x1) = (pair[0], pair[1]);
            // pixel centers strictly inside [x0, x1)
            let i0 = ((x0 - origin) / spacing).ceil().max(0.0) as usize;
            let i1f = (x1 - origin) / spacing;
            if i1f < 0.0 {
                continue;
            }
            let i1 = i1f.floor() as usize;
            for i in i0..=i1.min(res - 1) {
                let xc = origin + i as f64 * spacing;
                if xc >= x0 && xc < x1 {
                    voxels[i + res * row] = 1.0;
                }
            }
        }
    }
    Image {
        dims: [res, res],
        spacing: [spacing, spacing],
        origin: [origin, origin],
        voxels,
    }
}

/// Generate the fixed/moving binary pair from a solution.
pub fn rasterize_pair(
    mesh: &FeMesh,
    displacements: &[[f64; 2]],
    resolution: usize,
) -> (Image<2>, Image<2>) {
    let zero = vec![[0.0; 2]; mesh.num_nodes()];
    let fixed = fill_polygon(&boundary_polygon(mesh, &zero), resolution);
    let moving = fill_polygon(&boundary_polygon(mesh, displacements), resolution);
    (fixed, moving)
}
