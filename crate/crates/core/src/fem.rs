//! P1 finite-element assembly, Dirichlet treatment and point observations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Tolerance on barycentric coordinates when locating observation points.
pub const LOCATE_TOL: f64 = 1e-10;

/// Quadrature point on a simplex: barycentric coordinates and a weight
/// normalised so that the weights of a rule sum to one.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub bary: [f64; 3],
    pub weight: f64,
}

/// Three-point Gauss–Legendre on a segment (exact to degree 5).
pub fn segment_rule() -> [QuadPoint; 3] {
    let s = (3.0f64 / 5.0).sqrt();
    let (a, b) = ((1.0 - s) / 2.0, (1.0 + s) / 2.0);
    [
        QuadPoint { bary: [1.0 - a, a, 0.0], weight: 5.0 / 18.0 },
        QuadPoint { bary: [0.5, 0.5, 0.0], weight: 8.0 / 18.0 },
        QuadPoint { bary: [1.0 - b, b, 0.0], weight: 5.0 / 18.0 },
    ]
}

/// Symmetric three-point rule on a triangle (exact to degree 2).
pub fn triangle_rule() -> [QuadPoint; 3] {
    let (a, b) = (2.0 / 3.0, 1.0 / 6.0);
    [
        QuadPoint { bary: [a, b, b], weight: 1.0 / 3.0 },
        QuadPoint { bary: [b, a, b], weight: 1.0 / 3.0 },
        QuadPoint { bary: [b, b, a], weight: 1.0 / 3.0 },
    ]
}

pub fn quadrature_rule(dim: usize) -> [QuadPoint; 3] {
    if dim == 1 {
        segment_rule()
    } else {
        triangle_rule()
    }
}

/// Measure and constant basis-function gradients of one element.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub measure: f64,
    pub grads: Vec<[f64; 2]>,
}

pub fn element_geometry(mesh: &Mesh, e: usize) -> Result<ElementGeometry> {
    let elem = &mesh.elements()[e];
    let p = |k: usize| mesh.nodes()[elem[k]];
    let measure = mesh.element_measure(e);
    if measure.abs() <= f64::EPSILON {
        return Err(Error::Assembly(format!("element {e} is degenerate")));
    }
    let grads = if mesh.dim() == 1 {
        let h = measure;
        vec![[-1.0 / h, 0.0], [1.0 / h, 0.0]]
    } else {
        let (a, b, c) = (p(0), p(1), p(2));
        let two_area = 2.0 * measure;
        vec![
            [(b[1] - c[1]) / two_area, (c[0] - b[0]) / two_area],
            [(c[1] - a[1]) / two_area, (a[0] - c[0]) / two_area],
            [(a[1] - b[1]) / two_area, (b[0] - a[0]) / two_area],
        ]
    };
    Ok(ElementGeometry { measure, grads })
}

/// Physical coordinates of a barycentric point in element `e`.
pub fn map_to_physical(mesh: &Mesh, e: usize, bary: &[f64; 3]) -> [f64; 2] {
    let elem = &mesh.elements()[e];
    let mut x = [0.0; 2];
    for (k, &node) in elem.iter().enumerate() {
        let p = mesh.nodes()[node];
        x[0] += bary[k] * p[0];
        x[1] += bary[k] * p[1];
    }
    x
}

/// Global matrix `∫ ∇φ_i · ∇φ_j dx`, before any boundary treatment.
pub fn assemble_stiffness(mesh: &Mesh) -> Result<DMatrix<f64>> {
    let n = mesh.node_count();
    let mut a = DMatrix::zeros(n, n);
    for e in 0..mesh.elements().len() {
        let geo = element_geometry(mesh, e)?;
        let elem = &mesh.elements()[e];
        for (li, &gi) in elem.iter().enumerate() {
            for (lj, &gj) in elem.iter().enumerate() {
                let dot = geo.grads[li][0] * geo.grads[lj][0] + geo.grads[li][1] * geo.grads[lj][1];
                a[(gi, gj)] += geo.measure * dot;
            }
        }
    }
    Ok(a)
}

/// Global matrix `∫ φ_i φ_j dx`.
pub fn assemble_mass(mesh: &Mesh) -> Result<DMatrix<f64>> {
    let n = mesh.node_count();
    let d = mesh.dim() as f64;
    // P1 element mass: |e| (1 + δ_ij) / ((d + 1)(d + 2))
    let denom = (d + 1.0) * (d + 2.0);
    let mut m = DMatrix::zeros(n, n);
    for e in 0..mesh.elements().len() {
        let geo = element_geometry(mesh, e)?;
        let elem = &mesh.elements()[e];
        for (li, &gi) in elem.iter().enumerate() {
            for (lj, &gj) in elem.iter().enumerate() {
                let factor = if li == lj { 2.0 } else { 1.0 };
                m[(gi, gj)] += geo.measure * factor / denom;
            }
        }
    }
    Ok(m)
}

/// Load vector `∫ f φ_i dx` by element-local quadrature.
pub fn assemble_load<F>(mesh: &Mesh, f: F) -> Result<DVector<f64>>
where
    F: Fn(&[f64; 2]) -> f64,
{
    let rule = quadrature_rule(mesh.dim());
    let mut b = DVector::zeros(mesh.node_count());
    for e in 0..mesh.elements().len() {
        let geo = element_geometry(mesh, e)?;
        let elem = &mesh.elements()[e];
        for q in &rule {
            let x = map_to_physical(mesh, e, &q.bary);
            let fx = f(&x) * q.weight * geo.measure;
            for (k, &node) in elem.iter().enumerate() {
                b[node] += fx * q.bary[k];
            }
        }
    }
    Ok(b)
}

/// Barycentric coordinates of `x` in element `e` (unclamped).
pub fn barycentric(mesh: &Mesh, e: usize, x: &[f64; 2]) -> [f64; 3] {
    let elem = &mesh.elements()[e];
    let p = |k: usize| mesh.nodes()[elem[k]];
    if mesh.dim() == 1 {
        let (a, b) = (p(0)[0], p(1)[0]);
        let t = (x[0] - a) / (b - a);
        [1.0 - t, t, 0.0]
    } else {
        let (a, b, c) = (p(0), p(1), p(2));
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let l1 = ((x[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (x[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (x[1] - a[1]) - (x[0] - a[0]) * (b[1] - a[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }
}

/// First element containing `x` (ties on shared edges go to the lower
/// element index) and the clamped barycentric weights of `x` in it.
pub fn locate(mesh: &Mesh, x: &[f64; 2]) -> Result<(usize, [f64; 3])> {
    let k = mesh.dim() + 1;
    for e in 0..mesh.elements().len() {
        let mut bary = barycentric(mesh, e, x);
        if bary[..k].iter().all(|&l| l >= -LOCATE_TOL) {
            for l in bary[..k].iter_mut() {
                *l = l.max(0.0);
            }
            let s: f64 = bary[..k].iter().sum();
            for l in bary[..k].iter_mut() {
                *l /= s;
            }
            return Ok((e, bary));
        }
    }
    Err(Error::Location { point: x[..mesh.dim()].to_vec() })
}

/// Interpolation matrix mapping FEM coefficients to values at `points`.
pub fn build_observation_operator(mesh: &Mesh, points: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(points.len(), mesh.node_count());
    for (j, x) in points.iter().enumerate() {
        let (e, bary) = locate(mesh, x)?;
        for (k, &node) in mesh.elements()[e].iter().enumerate() {
            h[(j, node)] += bary[k];
        }
    }
    Ok(h)
}

/// Evaluates the P1 function with coefficients `u` at `x`.
pub fn evaluate(mesh: &Mesh, u: &DVector<f64>, x: &[f64; 2]) -> Result<f64> {
    let (e, bary) = locate(mesh, x)?;
    Ok(mesh.elements()[e].iter().enumerate().map(|(k, &n)| bary[k] * u[n]).sum())
}

/// Prescribed Dirichlet values keyed by node index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirichletSpec {
    pub values: BTreeMap<usize, f64>,
}

impl DirichletSpec {
    /// Zero on every boundary node of `mesh`.
    pub fn homogeneous(mesh: &Mesh) -> Self {
        Self { values: mesh.boundary_nodes().iter().map(|&i| (i, 0.0)).collect() }
    }

    pub fn value(&self, node: usize) -> Option<f64> {
        self.values.get(&node).copied()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.values.values().all(|&v| v == 0.0)
    }
}

/// Assembled linear Poisson system with observation operator.
#[derive(Debug, Clone)]
pub struct FemSystem {
    pub mesh: Mesh,
    /// Stiffness matrix; identity rows and columns at constrained nodes once
    /// Dirichlet conditions are applied.
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    pub load: DVector<f64>,
    pub observation: DMatrix<f64>,
    pub bc_nodes: Vec<usize>,
}

impl FemSystem {
    /// Assembles stiffness, mass, load and observation operator without any
    /// boundary treatment.
    pub fn assemble<F>(mesh: Mesh, f: F, obs_points: &[[f64; 2]]) -> Result<Self>
    where
        F: Fn(&[f64; 2]) -> f64,
    {
        let stiffness = assemble_stiffness(&mesh)?;
        let mass = assemble_mass(&mesh)?;
        let load = assemble_load(&mesh, f)?;
        let observation = build_observation_operator(&mesh, obs_points)?;
        Ok(Self { mesh, stiffness, mass, load, observation, bc_nodes: Vec::new() })
    }

    /// Assembles and applies homogeneous Dirichlet conditions on the whole boundary.
    pub fn homogeneous<F>(mesh: Mesh, f: F, obs_points: &[[f64; 2]]) -> Result<Self>
    where
        F: Fn(&[f64; 2]) -> f64,
    {
        let bc = DirichletSpec::homogeneous(&mesh);
        apply_dirichlet(Self::assemble(mesh, f, obs_points)?, &bc)
    }

    pub fn n_u(&self) -> usize {
        self.stiffness.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.observation.nrows()
    }

    /// Solves the deterministic system `A u = load`.
    pub fn solve(&self) -> Result<DVector<f64>> {
        self.stiffness
            .clone()
            .lu()
            .solve(&self.load)
            .ok_or_else(|| Error::numerical("stiffness matrix is singular"))
    }
}

/// Imposes Dirichlet values by replacing constrained rows and columns of the
/// stiffness with identity rows, moving the known column contributions into
/// the load (lifting) so the matrix stays symmetric.
pub fn apply_dirichlet(mut system: FemSystem, bc: &DirichletSpec) -> Result<FemSystem> {
    if let Some((&bad, _)) = bc.values.iter().find(|(i, _)| !system.mesh.is_boundary(**i)) {
        return Err(Error::invalid(format!("node {bad} is not a boundary node")));
    }
    let n = system.n_u();
    let a = &mut system.stiffness;
    let b = &mut system.load;
    for (&i, &g) in &bc.values {
        if g != 0.0 {
            for j in 0..n {
                if !bc.values.contains_key(&j) {
                    b[j] -= a[(j, i)] * g;
                }
            }
        }
    }
    for (&i, &g) in &bc.values {
        a.row_mut(i).fill(0.0);
        a.column_mut(i).fill(0.0);
        a[(i, i)] = 1.0;
        b[i] = g;
    }
    let mut nodes: Vec<usize> = system.bc_nodes.clone();
    nodes.extend(bc.values.keys().copied());
    nodes.sort_unstable();
    nodes.dedup();
    system.bc_nodes = nodes;
    Ok(system)
}

/// `n_y` equally spaced interior points of `(0, 1)`.
pub fn interval_observation_points(n_y: usize) -> Vec<[f64; 2]> {
    (1..=n_y).map(|j| [j as f64 / (n_y + 1) as f64, 0.0]).collect()
}

/// `n_y` sunflower-spiral points inside the disc of radius 0.9.
pub fn disc_observation_points(n_y: usize) -> Vec<[f64; 2]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n_y)
        .map(|j| {
            let r = 0.9 * ((j as f64 + 0.5) / n_y as f64).sqrt();
            let phi = j as f64 * golden;
            [r * phi.cos(), r * phi.sin()]
        })
        .collect()
}
