//! Structured quad/hex meshes, element Gauss rules and boundary regions.
//!
//! Coordinates are stored as `[f64; 3]` for both 2D and 3D meshes; the unused
//! third component of a 2D mesh is always zero.

use crate::error::{Error, Result};

/// Parametric location of the two-point Gauss rule on [-1, 1].
pub const GAUSS_2PT: f64 = 0.577_350_269_189_625_8;

/// A hole removed from the design domain. Membership is decided by element center.
#[derive(Debug, Clone, PartialEq)]
pub enum Hole {
    /// Disc in the x-y plane (2D) or infinite cylinder along `axis` (3D).
    Circle { center: [f64; 3], radius: f64, axis: usize },
    /// Axis-aligned box `[min, max]`.
    Rect { min: [f64; 3], max: [f64; 3] },
}

impl Hole {
    pub fn contains(&self, dim: usize, p: &[f64; 3]) -> bool {
        match self {
            Hole::Circle { center, radius, axis } => {
                let mut d2 = 0.0;
                for a in 0..dim {
                    if dim == 3 && a == *axis {
                        continue;
                    }
                    d2 += (p[a] - center[a]).powi(2);
                }
                d2 < radius * radius
            }
            Hole::Rect { min, max } => (0..dim).all(|a| p[a] > min[a] && p[a] < max[a]),
        }
    }

    fn within(&self, dim: usize, extents: &[f64; 3]) -> bool {
        match self {
            Hole::Circle { center, radius, .. } => {
                *radius > 0.0 && (0..dim).all(|a| center[a] >= 0.0 && center[a] <= extents[a])
            }
            Hole::Rect { min, max } => (0..dim).all(|a| {
                min[a] < max[a] && max[a] >= 0.0 && min[a] <= extents[a]
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    pub extents: [f64; 3],
    pub counts: [usize; 3],
    pub h: [f64; 3],
    pub nodes: Vec<[f64; 3]>,
    /// Element connectivity, 4 (2D) or 8 (3D) node ids per element.
    pub conn: Vec<usize>,
    pub centers: Vec<[f64; 3]>,
    pub hole: Vec<bool>,
    /// Element ids of the design (non-hole) elements, in element order.
    pub design: Vec<usize>,
    /// Inverse of `design`.
    pub design_index: Vec<Option<usize>>,
    pub element_volume: f64,
}

/// One Gauss point of the element rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussPoint {
    pub element: usize,
    pub coords: [f64; 3],
    pub weight: f64,
}

impl Mesh {
    pub fn new(dim: usize, extents: [f64; 3], counts: [usize; 3], holes: &[Hole]) -> Result<Mesh> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidInput(format!("mesh dimension must be 2 or 3, got {dim}")));
        }
        let mut extents = extents;
        let mut counts = counts;
        if dim == 2 {
            extents[2] = 0.0;
            counts[2] = 1;
        }
        for a in 0..dim {
            if !(extents[a] > 0.0) || !extents[a].is_finite() {
                return Err(Error::InvalidInput("zero-measure domain".into()));
            }
            if counts[a] == 0 {
                return Err(Error::InvalidInput("element counts must be at least 1 per axis".into()));
            }
        }
        for hole in holes {
            if !hole.within(dim, &extents) {
                return Err(Error::InvalidInput(format!("hole {hole:?} lies outside the domain")));
            }
        }
        let mut h = [0.0; 3];
        for a in 0..dim {
            h[a] = extents[a] / counts[a] as f64;
        }
        let [nx, ny, nz] = counts;
        let nnx = nx + 1;
        let nny = ny + 1;
        let nnz = if dim == 3 { nz + 1 } else { 1 };

        let mut nodes = Vec::with_capacity(nnx * nny * nnz);
        for k in 0..nnz {
            for j in 0..nny {
                for i in 0..nnx {
                    let z = if dim == 3 { k as f64 * h[2] } else { 0.0 };
                    // pin the last node to the extent so coordinates stay inside the box
                    let x = if i == nx { extents[0] } else { i as f64 * h[0] };
                    let y = if j == ny { extents[1] } else { j as f64 * h[1] };
                    let z = if dim == 3 && k == nz { extents[2] } else { z };
                    nodes.push([x, y, z]);
                }
            }
        }
        let node_id = |i: usize, j: usize, k: usize| i + nnx * (j + nny * k);

        let n_el = nx * ny * if dim == 3 { nz } else { 1 };
        let npe = if dim == 2 { 4 } else { 8 };
        let mut conn = Vec::with_capacity(n_el * npe);
        let mut centers = Vec::with_capacity(n_el);
        let ez = if dim == 3 { nz } else { 1 };
        for k in 0..ez {
            for j in 0..ny {
                for i in 0..nx {
                    let base = [
                        node_id(i, j, k),
                        node_id(i + 1, j, k),
                        node_id(i + 1, j + 1, k),
                        node_id(i, j + 1, k),
                    ];
                    conn.extend_from_slice(&base);
                    if dim == 3 {
                        conn.extend_from_slice(&[
                            node_id(i, j, k + 1),
                            node_id(i + 1, j, k + 1),
                            node_id(i + 1, j + 1, k + 1),
                            node_id(i, j + 1, k + 1),
                        ]);
                    }
                    let z = if dim == 3 { (k as f64 + 0.5) * h[2] } else { 0.0 };
                    centers.push([(i as f64 + 0.5) * h[0], (j as f64 + 0.5) * h[1], z]);
                }
            }
        }

        let hole: Vec<bool> = centers.iter().map(|c| holes.iter().any(|hl| hl.contains(dim, c))).collect();
        let mut design = Vec::new();
        let mut design_index = vec![None; n_el];
        for (e, &is_hole) in hole.iter().enumerate() {
            if !is_hole {
                design_index[e] = Some(design.len());
                design.push(e);
            }
        }
        if design.is_empty() {
            return Err(Error::InvalidInput("holes cover the entire domain".into()));
        }
        let element_volume = (0..dim).map(|a| h[a]).product();
        Ok(Mesh { dim, extents, counts, h, nodes, conn, centers, hole, design, design_index, element_volume })
    }

    pub fn n_elements(&self) -> usize {
        self.centers.len()
    }

    /// Number of design elements N.
    pub fn n_design(&self) -> usize {
        self.design.len()
    }

    pub fn nodes_per_element(&self) -> usize {
        if self.dim == 2 { 4 } else { 8 }
    }

    pub fn element_nodes(&self, e: usize) -> &[usize] {
        let npe = self.nodes_per_element();
        &self.conn[e * npe..(e + 1) * npe]
    }

    pub fn n_dofs(&self) -> usize {
        self.nodes.len() * self.dim
    }

    /// Lower corner of element `e`.
    pub fn element_origin(&self, e: usize) -> [f64; 3] {
        let c = self.centers[e];
        [c[0] - 0.5 * self.h[0], c[1] - 0.5 * self.h[1], if self.dim == 3 { c[2] - 0.5 * self.h[2] } else { 0.0 }]
    }

    /// Element index of the grid cell `(i, j, k)`.
    pub fn element_at(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.counts[0] * (j + self.counts[1] * k)
    }

    /// Grid cell indices of element `e`.
    pub fn element_ijk(&self, e: usize) -> [usize; 3] {
        let nx = self.counts[0];
        let ny = self.counts[1];
        [e % nx, (e / nx) % ny, e / (nx * ny)]
    }

    /// Node closest to `p` (ties broken by lowest id).
    pub fn nearest_node(&self, p: &[f64; 3]) -> usize {
        let mut idx = [0usize; 3];
        for a in 0..self.dim {
            let t = (p[a] / self.h[a]).round();
            idx[a] = t.clamp(0.0, self.counts[a] as f64) as usize;
        }
        idx[0] + (self.counts[0] + 1) * (idx[1] + (self.counts[1] + 1) * idx[2])
    }

    /// Domain measure (volume in 3D, area in 2D) including holes.
    pub fn domain_measure(&self) -> f64 {
        (0..self.dim).map(|a| self.extents[a]).product()
    }

    pub fn design_measure(&self) -> f64 {
        self.element_volume * self.n_design() as f64
    }

    /// Gauss points of every element (2 per axis), element-major.
    pub fn gauss_points(&self) -> Vec<GaussPoint> {
        let all: Vec<usize> = (0..self.n_elements()).collect();
        self.gauss_points_of(&all)
    }

    pub fn points_per_element(&self) -> usize {
        1 << self.dim
    }

    /// Gauss points of the listed elements, in the given order.
    pub fn gauss_points_of(&self, elements: &[usize]) -> Vec<GaussPoint> {
        let ppe = self.points_per_element();
        let weight = self.element_volume / ppe as f64;
        let mut out = Vec::with_capacity(elements.len() * ppe);
        for &e in elements {
            let c = self.centers[e];
            for q in 0..ppe {
                let xi = gauss_xi(self.dim, q);
                let mut coords = [0.0; 3];
                for a in 0..self.dim {
                    coords[a] = c[a] + 0.5 * self.h[a] * xi[a];
                }
                out.push(GaussPoint { element: e, coords, weight });
            }
        }
        out
    }

    /// Boundary quadrature over `region`: two points per facet edge direction
    /// (2 in 2D, 4 in 3D) on the intersection of every boundary facet with the region.
    pub fn boundary_quadrature(&self, region: &Region) -> Result<Vec<([f64; 3], f64)>> {
        let (axis, side) = region.boundary_face(self)?;
        let tangential: Vec<usize> = (0..self.dim).filter(|&a| a != axis).collect();
        let plane = if side == 0 { 0.0 } else { self.extents[axis] };
        let mut out = Vec::new();
        let n0 = self.counts[tangential[0]];
        let n1 = if tangential.len() > 1 { self.counts[tangential[1]] } else { 1 };
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                let mut lo = [0.0; 2];
                let mut hi = [0.0; 2];
                let mut empty = false;
                for (t, &a) in tangential.iter().enumerate() {
                    let idx = if t == 0 { i0 } else { i1 };
                    let f_lo = idx as f64 * self.h[a];
                    let f_hi = f_lo + self.h[a];
                    lo[t] = f_lo.max(region.min[a]);
                    hi[t] = f_hi.min(region.max[a]);
                    if hi[t] - lo[t] <= region.tol {
                        empty = true;
                    }
                }
                if empty {
                    continue;
                }
                // skip facets of hole elements
                let mut ijk = [0usize; 3];
                ijk[axis] = if side == 0 { 0 } else { self.counts[axis] - 1 };
                ijk[tangential[0]] = i0;
                if tangential.len() > 1 {
                    ijk[tangential[1]] = i1;
                }
                if self.hole[self.element_at(ijk[0], ijk[1], ijk[2])] {
                    continue;
                }
                let npts = 1usize << tangential.len();
                let mut w = 1.0;
                for t in 0..tangential.len() {
                    w *= 0.5 * (hi[t] - lo[t]);
                }
                for q in 0..npts {
                    let mut p = [0.0; 3];
                    p[axis] = plane;
                    for (t, &a) in tangential.iter().enumerate() {
                        let s = if (q >> t) & 1 == 0 { -GAUSS_2PT } else { GAUSS_2PT };
                        p[a] = 0.5 * (lo[t] + hi[t]) + 0.5 * (hi[t] - lo[t]) * s;
                    }
                    out.push((p, w));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidInput(format!("boundary region {region:?} intersects no facets")));
        }
        Ok(out)
    }
}

/// Parametric coordinates of local Gauss point `q` (bit `a` of `q` selects the sign on axis `a`).
pub fn gauss_xi(dim: usize, q: usize) -> [f64; 3] {
    let mut xi = [0.0; 3];
    for (a, x) in xi.iter_mut().enumerate().take(dim) {
        *x = if (q >> a) & 1 == 0 { -GAUSS_2PT } else { GAUSS_2PT };
    }
    xi
}

/// Axis-aligned region of the domain (segment, patch or box) with a matching tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub tol: f64,
}

impl Region {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Region {
        Region { min, max, tol: 1e-9 }
    }

    pub fn contains(&self, dim: usize, p: &[f64; 3]) -> bool {
        (0..dim).all(|a| p[a] >= self.min[a] - self.tol && p[a] <= self.max[a] + self.tol)
    }

    /// Euclidean distance from `p` to the region box, with its gradient.
    pub fn distance(&self, dim: usize, p: &[f64; 3]) -> (f64, [f64; 3]) {
        let mut delta = [0.0; 3];
        for a in 0..dim {
            delta[a] = if p[a] < self.min[a] {
                p[a] - self.min[a]
            } else if p[a] > self.max[a] {
                p[a] - self.max[a]
            } else {
                0.0
            };
        }
        let d = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if d == 0.0 {
            return (0.0, [0.0; 3]);
        }
        let mut g = [0.0; 3];
        for a in 0..dim {
            g[a] = delta[a] / d;
        }
        (d, g)
    }

    /// The boundary face `(axis, side)` the region is flat on; errors if it is not on the boundary.
    pub fn boundary_face(&self, mesh: &Mesh) -> Result<(usize, usize)> {
        for a in 0..mesh.dim {
            if (self.max[a] - self.min[a]).abs() <= self.tol {
                if self.min[a].abs() <= self.tol {
                    return Ok((a, 0));
                }
                if (self.min[a] - mesh.extents[a]).abs() <= self.tol {
                    return Ok((a, 1));
                }
            }
        }
        Err(Error::InvalidInput(format!("region {self:?} does not lie on the domain boundary")))
    }

    /// Measure of the region restricted to its boundary face.
    pub fn measure(&self, mesh: &Mesh) -> Result<f64> {
        let (axis, _) = self.boundary_face(mesh)?;
        Ok((0..mesh.dim)
            .filter(|&a| a != axis)
            .map(|a| self.max[a].min(mesh.extents[a]) - self.min[a].max(0.0))
            .product())
    }
}
