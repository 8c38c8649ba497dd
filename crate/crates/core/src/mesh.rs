//! P1 meshes on the unit interval and the unit disc.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance used to decide whether a node lies on the unit circle.
const BOUNDARY_TOL: f64 = 1e-9;

/// A simplicial mesh in one or two dimensions.
///
/// Nodes are stored as `[x, y]`; in 1D the second coordinate is zero.
/// Elements hold `dim + 1` node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    nodes: Vec<[f64; 2]>,
    elements: Vec<Vec<usize>>,
    boundary: BTreeSet<usize>,
}

impl Mesh {
    /// Validates the connectivity and orients 2D triangles counter-clockwise.
    pub fn new(
        dim: usize,
        nodes: Vec<[f64; 2]>,
        mut elements: Vec<Vec<usize>>,
        boundary: BTreeSet<usize>,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("mesh dimension must be 1 or 2, got {dim}")));
        }
        if nodes.is_empty() || elements.is_empty() {
            return Err(Error::invalid("mesh needs at least one node and one element"));
        }
        for (e, elem) in elements.iter_mut().enumerate() {
            if elem.len() != dim + 1 {
                return Err(Error::invalid(format!(
                    "element {e} has {} nodes, expected {}",
                    elem.len(),
                    dim + 1
                )));
            }
            if let Some(&bad) = elem.iter().find(|&&i| i >= nodes.len()) {
                return Err(Error::invalid(format!("element {e} references missing node {bad}")));
            }
            let measure = signed_measure(&nodes, elem, dim);
            if measure.abs() <= f64::EPSILON {
                return Err(Error::Assembly(format!("element {e} is degenerate")));
            }
            if measure < 0.0 {
                elem.swap(0, 1);
            }
        }
        if let Some(&bad) = boundary.iter().find(|&&i| i >= nodes.len()) {
            return Err(Error::invalid(format!("boundary node {bad} does not exist")));
        }
        Ok(Self { dim, nodes, elements, boundary })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }

    pub fn boundary_nodes(&self) -> &BTreeSet<usize> {
        &self.boundary
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary.contains(&node)
    }

    /// Indices of nodes not on the boundary, ascending.
    pub fn free_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|i| !self.boundary.contains(i)).collect()
    }

    /// Signed length (1D) or area (2D) of element `e`.
    pub fn element_measure(&self, e: usize) -> f64 {
        signed_measure(&self.nodes, &self.elements[e], self.dim)
    }

    pub fn total_measure(&self) -> f64 {
        (0..self.elements.len()).map(|e| self.element_measure(e)).sum()
    }

    /// Parses the line-oriented mesh format (`dim`, `node`, `elem`,
    /// `boundary` records; `#` starts a comment).
    pub fn parse(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: &str| Error::Parse {
            what: "mesh".into(),
            msg: format!("line {}: {msg}", line + 1),
        };
        let mut dim = None;
        let mut nodes = Vec::new();
        let mut elements = Vec::new();
        let mut boundary = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let key = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            match key {
                "dim" => {
                    let d: usize = rest
                        .first()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "bad dim record"))?;
                    dim = Some(d);
                }
                "node" => {
                    let d = dim.ok_or_else(|| parse_err(lineno, "node before dim"))?;
                    if rest.len() != d {
                        return Err(parse_err(lineno, "node arity does not match dim"));
                    }
                    let mut p = [0.0; 2];
                    for (k, s) in rest.iter().enumerate() {
                        p[k] = s.parse().map_err(|_| parse_err(lineno, "bad coordinate"))?;
                    }
                    nodes.push(p);
                }
                "elem" => {
                    let idx = rest
                        .iter()
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| parse_err(lineno, "bad element index"))?;
                    elements.push(idx);
                }
                "boundary" => {
                    let i = rest
                        .first()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "bad boundary record"))?;
                    boundary.insert(i);
                }
                other => return Err(parse_err(lineno, &format!("unknown record '{other}'"))),
            }
        }
        let dim = dim.ok_or_else(|| Error::Parse { what: "mesh".into(), msg: "missing dim".into() })?;
        Mesh::new(dim, nodes, elements, boundary)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dim {}", self.dim);
        for p in &self.nodes {
            if self.dim == 1 {
                let _ = writeln!(out, "node {:?}", p[0]);
            } else {
                let _ = writeln!(out, "node {:?} {:?}", p[0], p[1]);
            }
        }
        for e in &self.elements {
            let idx: Vec<String> = e.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "elem {}", idx.join(" "));
        }
        for b in &self.boundary {
            let _ = writeln!(out, "boundary {b}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn signed_measure(nodes: &[[f64; 2]], elem: &[usize], dim: usize) -> f64 {
    if dim == 1 {
        nodes[elem[1]][0] - nodes[elem[0]][0]
    } else {
        let [a, b, c] = [nodes[elem[0]], nodes[elem[1]], nodes[elem[2]]];
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }
}

/// Uniform mesh of `[0, 1]` with nodes `x_i = i / (n_nodes - 1)`.
pub fn build_interval_mesh(n_nodes: usize) -> Result<Mesh> {
    if n_nodes < 2 {
        return Err(Error::invalid(format!("interval mesh needs at least 2 nodes, got {n_nodes}")));
    }
    let h = 1.0 / (n_nodes - 1) as f64;
    let nodes = (0..n_nodes).map(|i| [i as f64 * h, 0.0]).collect();
    let elements = (0..n_nodes - 1).map(|i| vec![i, i + 1]).collect();
    let boundary = BTreeSet::from([0, n_nodes - 1]);
    Mesh::new(1, nodes, elements, boundary)
}

/// Ring-based triangulation of the unit disc.
///
/// Ring `r` (1..=n_rings) sits at radius `r / n_rings` and carries `6 r`
/// equally spaced nodes; neighbouring rings are stitched by walking both in
/// angular order. The mesh has `1 + 3 n (n + 1)` nodes and `6 n²` triangles.
pub fn build_disc_mesh(n_rings: usize) -> Result<Mesh> {
    if n_rings < 1 {
        return Err(Error::invalid("disc mesh needs at least one ring"));
    }
    let mut nodes = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize];
    let mut ring_len = vec![1usize];
    for r in 1..=n_rings {
        let radius = r as f64 / n_rings as f64;
        let count = 6 * r;
        ring_start.push(nodes.len());
        ring_len.push(count);
        for j in 0..count {
            let phi = 2.0 * PI * j as f64 / count as f64;
            nodes.push([radius * phi.cos(), radius * phi.sin()]);
        }
    }

    let mut elements = Vec::with_capacity(6 * n_rings * n_rings);
    // innermost fan
    for j in 0..6 {
        elements.push(vec![0, ring_start[1] + j, ring_start[1] + (j + 1) % 6]);
    }
    for r in 2..=n_rings {
        let (si, ni) = (ring_start[r - 1], ring_len[r - 1]);
        let (so, no) = (ring_start[r], ring_len[r]);
        let (mut i, mut o) = (0usize, 0usize);
        while i < ni || o < no {
            // angle (as a fraction of the full turn) of the next candidate on each ring
            let next_inner = (i + 1) as f64 / ni as f64;
            let next_outer = (o + 1) as f64 / no as f64;
            let (a, b) = (si + i % ni, so + o % no);
            if o < no && (i >= ni || next_outer <= next_inner) {
                elements.push(vec![a, b, so + (o + 1) % no]);
                o += 1;
            } else {
                elements.push(vec![a, b, si + (i + 1) % ni]);
                i += 1;
            }
        }
    }

    let boundary = nodes
        .iter()
        .enumerate()
        .filter(|(_, p)| ((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < BOUNDARY_TOL)
        .map(|(i, _)| i)
        .collect();
    Mesh::new(2, nodes, elements, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_interval() {
        let m = build_interval_mesh(2).unwrap();
        assert_eq!(m.nodes(), &[[0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(m.elements().len(), 1);
        assert_eq!(m.boundary_nodes().len(), 2);
    }

    #[test]
    fn interval_spacing_and_counts() {
        let m = build_interval_mesh(5).unwrap();
        assert_eq!(m.nodes()[1][0], 0.25);
        assert_eq!(m.boundary_nodes(), &BTreeSet::from([0, 4]));
        let m = build_interval_mesh(33).unwrap();
        assert_eq!(m.elements().len(), 32);
        assert_eq!(m.free_nodes().len(), 31);
    }

    #[test]
    fn interval_rejects_single_node() {
        assert!(matches!(build_interval_mesh(1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn one_ring_disc() {
        let m = build_disc_mesh(1).unwrap();
        assert_eq!(m.node_count(), 7);
        assert_eq!(m.elements().len(), 6);
        assert_eq!(m.boundary_nodes().len(), 6);
        assert!(!m.is_boundary(0));
    }

    #[test]
    fn disc_area_and_orientation() {
        for n in 1..=10 {
            let m = build_disc_mesh(n).unwrap();
            assert_eq!(m.node_count(), 1 + 3 * n * (n + 1));
            assert_eq!(m.elements().len(), 6 * n * n);
            assert_eq!(m.boundary_nodes().len(), 6 * n);
            for e in 0..m.elements().len() {
                assert!(m.element_measure(e) > 0.0);
            }
            let rel = (m.total_measure() - PI).abs() / PI;
            assert!(rel <= 10.0 / (n * n) as f64, "n={n} rel={rel}");
        }
    }

    #[test]
    fn disc_triangles_use_each_edge_at_most_twice() {
        let m = build_disc_mesh(4).unwrap();
        let mut counts = std::collections::HashMap::new();
        for e in m.elements() {
            for k in 0..3 {
                let (a, b) = (e[k], e[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(counts.values().all(|&c| c == 1 || c == 2));
        let boundary_edges = counts.values().filter(|&&c| c == 1).count();
        assert_eq!(boundary_edges, 24);
    }

    #[test]
    fn clockwise_triangle_is_reoriented() {
        let nodes = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let m = Mesh::new(2, nodes, vec![vec![0, 1, 2]], BTreeSet::new()).unwrap();
        assert!(m.element_measure(0) > 0.0);
    }

    #[test]
    fn degenerate_element_rejected() {
        let nodes = vec![[0.0, 0.0], [0.0, 0.0]];
        let r = Mesh::new(1, nodes, vec![vec![0, 1]], BTreeSet::new());
        assert!(matches!(r, Err(Error::Assembly(_))));
    }

    #[test]
    fn text_format_round_trip() {
        let m = build_disc_mesh(3).unwrap();
        let back = Mesh::parse(&m.to_text()).unwrap();
        assert_eq!(m, back);
        let text = "# tiny\ndim 1\nnode 0\nnode 0.5 # mid\nnode 1\nelem 0 1\nelem 1 2\nboundary 0\nboundary 2\n";
        let m = Mesh::parse(text).unwrap();
        assert_eq!(m, build_interval_mesh(3).unwrap());
    }

    #[test]
    fn malformed_text_is_reported() {
        assert!(matches!(Mesh::parse("node 1\n"), Err(Error::Parse { .. })));
        assert!(matches!(Mesh::parse("dim 1\nnode 0\nvertex 1\n"), Err(Error::Parse { .. })));
    }
}
