//! Periodic RVE meshes: structured generation for square-lattice geometries,
//! periodic node pairing, and the ASCII mesh exchange format.
//!
//! Meshes live in local coordinates centered at the RVE centroid; the
//! homothetic ratio converts moments to global scale during tensor
//! integration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::material::Phase;

/// Geometry of the basic cell and the RVE built from it.
///
/// `repetitions` basic cells per edge form the RVE; the RVE edge length in
/// local coordinates is `repetitions * cell_edge_length / homothetic_ratio`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGeometry {
    /// Basic cell edge length l (mm, global coordinates).
    pub cell_edge_length: f64,
    /// Wall thickness t (mm); walls are centered on cell boundaries.
    pub wall_thickness: f64,
    /// Number of basic cells per RVE edge.
    pub repetitions: usize,
    /// Homothetic ratio linking local coordinates y to global X.
    pub homothetic_ratio: f64,
}

impl CellGeometry {
    pub fn new(l: f64, t: f64, n: usize, epsilon: f64) -> Result<Self> {
        let g = Self {
            cell_edge_length: l,
            wall_thickness: t,
            repetitions: n,
            homothetic_ratio: epsilon,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_edge_length > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "cell edge length must be positive, got {}",
                self.cell_edge_length
            )));
        }
        // t = l is accepted as the degenerate all-matrix cell.
        if !(self.wall_thickness > 0.0 && self.wall_thickness <= self.cell_edge_length) {
            return Err(Error::InvalidGeometry(format!(
                "wall thickness must satisfy 0 < t <= l, got t = {}, l = {}",
                self.wall_thickness, self.cell_edge_length
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidGeometry("repetitions must be >= 1".into()));
        }
        if !(self.homothetic_ratio > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "homothetic ratio must be positive, got {}",
                self.homothetic_ratio
            )));
        }
        Ok(())
    }

    /// RVE edge length w in local coordinates.
    pub fn rve_edge_local(&self) -> f64 {
        self.repetitions as f64 * self.cell_edge_length / self.homothetic_ratio
    }

    /// Analytic inclusion (void) area fraction (1 - t/l)^2.
    pub fn inclusion_fraction(&self) -> f64 {
        let r = 1.0 - self.wall_thickness / self.cell_edge_length;
        r * r
    }
}

/// One periodic master/slave relation: the slave node coordinates equal the
/// master's plus `translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodicPair {
    pub master: usize,
    pub slave: usize,
    pub translation: [f64; 2],
}

/// The four RVE corners tied to a single master; the diagonally opposite
/// corner is constrained only through this group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerGroup {
    pub master: usize,
    /// The remaining three corners (two edge-translated, one diagonal).
    pub slaves: [usize; 3],
}

/// Structured quadrilateral RVE mesh with phase tags and periodic pairing.
#[derive(Clone, Debug)]
pub struct PeriodicMesh {
    /// Node coordinates in local RVE coordinates.
    pub nodes: Vec<[f64; 2]>,
    /// Counter-clockwise 4-node quadrilaterals.
    pub elements: Vec<[usize; 4]>,
    /// Phase tag per element.
    pub phases: Vec<Phase>,
    /// Single-translation periodic relations (right->left, top->bottom).
    pub periodic_pairs: Vec<PeriodicPair>,
    pub corner_group: Option<CornerGroup>,
}

impl PeriodicMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Signed area of one element (shoelace; positive for ccw ordering).
    pub fn element_area(&self, e: usize) -> f64 {
        let q = self.elements[e];
        let mut a = 0.0;
        for k in 0..4 {
            let p = self.nodes[q[k]];
            let r = self.nodes[q[(k + 1) % 4]];
            a += p[0] * r[1] - r[0] * p[1];
        }
        0.5 * a
    }

    pub fn total_area(&self) -> f64 {
        (0..self.element_count()).map(|e| self.element_area(e)).sum()
    }

    /// Area fraction occupied by `phase`.
    pub fn phase_fraction(&self, phase: Phase) -> f64 {
        let mut part = 0.0;
        let mut total = 0.0;
        for e in 0..self.element_count() {
            let a = self.element_area(e);
            total += a;
            if self.phases[e] == phase {
                part += a;
            }
        }
        part / total
    }

    /// Checks that every pair satisfies slave = master + translation within
    /// `tol` and that no node is both master and slave across the pairs and
    /// the corner group.
    pub fn check_pairing(&self, tol: f64) -> Result<()> {
        let mut is_slave = vec![false; self.node_count()];
        let mut mark_slave = |s: usize| {
            is_slave[s] = true;
        };
        for p in &self.periodic_pairs {
            let m = self.nodes[p.master];
            let s = self.nodes[p.slave];
            for d in 0..2 {
                let dev = (s[d] - m[d] - p.translation[d]).abs();
                if dev > tol {
                    return Err(Error::Pairing(format!(
                        "slave node {} at ({}, {}) is not master {} at ({}, {}) translated by ({}, {}): deviation {dev:.3e} exceeds {tol:.3e}",
                        p.slave, s[0], s[1], p.master, m[0], m[1], p.translation[0], p.translation[1]
                    )));
                }
            }
            mark_slave(p.slave);
        }
        if let Some(g) = &self.corner_group {
            for &s in &g.slaves {
                mark_slave(s);
            }
        }
        for p in &self.periodic_pairs {
            if is_slave[p.master] {
                return Err(Error::Pairing(format!(
                    "node {} appears as both master and slave",
                    p.master
                )));
            }
        }
        if let Some(g) = &self.corner_group {
            if is_slave[g.master] {
                return Err(Error::Pairing(format!(
                    "corner master {} also appears as a slave",
                    g.master
                )));
            }
        }
        Ok(())
    }

    /// Serializes to the native line-oriented exchange format.
    pub fn to_native_string(&self) -> String {
        let mut s = String::new();
        s.push_str("gradhom-mesh v1\n");
        let _ = writeln!(s, "{}", self.node_count());
        for p in &self.nodes {
            let _ = writeln!(s, "{} {}", p[0], p[1]);
        }
        let _ = writeln!(s, "{}", self.element_count());
        for (e, q) in self.elements.iter().enumerate() {
            let phase = match self.phases[e] {
                Phase::Matrix => "matrix",
                Phase::Inclusion => "inclusion",
            };
            let _ = writeln!(s, "{} {} {} {} {}", q[0], q[1], q[2], q[3], phase);
        }
        s
    }

    pub fn write_native(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_native_string())?;
        Ok(())
    }

    /// Legacy-VTK ASCII unstructured grid for visual inspection. Optional
    /// point-data vector fields (component-interleaved, length 2*nodes) are
    /// appended under the given names.
    pub fn to_vtk_string(&self, fields: &[(&str, &[f64])]) -> String {
        let mut s = String::new();
        s.push_str("# vtk DataFile Version 3.0\n");
        s.push_str("gradhom RVE mesh\n");
        s.push_str("ASCII\n");
        s.push_str("DATASET UNSTRUCTURED_GRID\n");
        let _ = writeln!(s, "POINTS {} double", self.node_count());
        for p in &self.nodes {
            let _ = writeln!(s, "{} {} 0", p[0], p[1]);
        }
        let _ = writeln!(s, "CELLS {} {}", self.element_count(), self.element_count() * 5);
        for q in &self.elements {
            let _ = writeln!(s, "4 {} {} {} {}", q[0], q[1], q[2], q[3]);
        }
        let _ = writeln!(s, "CELL_TYPES {}", self.element_count());
        for _ in 0..self.element_count() {
            s.push_str("9\n");
        }
        let _ = writeln!(s, "CELL_DATA {}", self.element_count());
        s.push_str("SCALARS phase int 1\nLOOKUP_TABLE default\n");
        for p in &self.phases {
            s.push_str(match p {
                Phase::Matrix => "0\n",
                Phase::Inclusion => "1\n",
            });
        }
        if !fields.is_empty() {
            let _ = writeln!(s, "POINT_DATA {}", self.node_count());
            for (name, data) in fields {
                let _ = writeln!(s, "VECTORS {name} double");
                for n in 0..self.node_count() {
                    let _ = writeln!(s, "{} {} 0", data[2 * n], data[2 * n + 1]);
                }
            }
        }
        s
    }

    pub fn write_vtk(&self, path: &Path, fields: &[(&str, &[f64])]) -> Result<()> {
        std::fs::write(path, self.to_vtk_string(fields))?;
        Ok(())
    }
}

/// Builds a uniform m x m grid on the centered square of edge `w`, tagging
/// each element from its centroid. Periodic pairs follow the right->left,
/// top->bottom convention with the bottom-right and top-left corners as
/// ordinary pairs and the diagonal corner carried by the corner group.
pub fn build_structured_rve(
    w: f64,
    divisions: usize,
    tag: impl Fn([f64; 2]) -> Phase,
) -> PeriodicMesh {
    assert!(divisions >= 1, "need at least one element per edge");
    let m = divisions;
    let coord = |i: usize| (i as f64 / m as f64 - 0.5) * w;
    let nid = |i: usize, j: usize| j * (m + 1) + i;

    let mut nodes = Vec::with_capacity((m + 1) * (m + 1));
    for j in 0..=m {
        for i in 0..=m {
            nodes.push([coord(i), coord(j)]);
        }
    }

    let mut elements = Vec::with_capacity(m * m);
    let mut phases = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            elements.push([nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)]);
            let centroid = [
                0.5 * (coord(i) + coord(i + 1)),
                0.5 * (coord(j) + coord(j + 1)),
            ];
            phases.push(tag(centroid));
        }
    }

    let mut periodic_pairs = Vec::with_capacity(2 * m);
    // Right edge (including the bottom-right corner) maps onto the left edge.
    for j in 0..m {
        periodic_pairs.push(PeriodicPair {
            master: nid(0, j),
            slave: nid(m, j),
            translation: [w, 0.0],
        });
    }
    // Top edge (including the top-left corner) maps onto the bottom edge.
    for i in 0..m {
        periodic_pairs.push(PeriodicPair {
            master: nid(i, 0),
            slave: nid(i, m),
            translation: [0.0, w],
        });
    }
    let corner_group = Some(CornerGroup {
        master: nid(0, 0),
        slaves: [nid(m, 0), nid(0, m), nid(m, m)],
    });

    PeriodicMesh {
        nodes,
        elements,
        phases,
        periodic_pairs,
        corner_group,
    }
}

/// Number of element layers spanned by each half-wall at the given
/// per-cell resolution. The wall is centered on the cell boundary, so each
/// cell carries `k` matrix layers on each side per direction. Snapping is
/// limited to one element layer; an unresolvable wall is an error.
fn half_wall_layers(geom: &CellGeometry, elements_per_cell_edge: usize) -> Result<usize> {
    let epc = elements_per_cell_edge as f64;
    let exact = epc * geom.wall_thickness / (2.0 * geom.cell_edge_length);
    let mut k = exact.round() as usize;
    k = k.min(elements_per_cell_edge / 2);
    if k == 0 {
        return Err(Error::Resolution {
            thickness: geom.wall_thickness,
            elements_per_cell: elements_per_cell_edge,
            detail: format!(
                "half-wall spans {exact:.3} element layers; at least one full layer is required"
            ),
        });
    }
    let realized_t = 2.0 * k as f64 * geom.cell_edge_length / epc;
    let layer = geom.cell_edge_length / epc;
    if (realized_t - geom.wall_thickness).abs() > layer * (1.0 + 1e-12) {
        return Err(Error::Resolution {
            thickness: geom.wall_thickness,
            elements_per_cell: elements_per_cell_edge,
            detail: format!(
                "snapping to {k} layers per half-wall changes the thickness by more than one element layer (realized {realized_t})"
            ),
        });
    }
    Ok(k)
}

/// Generates the square-lattice RVE: an n x n tiling of cells whose walls of
/// width t are centered on the cell boundaries, each wall strip resolved by
/// an integer number of element layers.
pub fn build_square_lattice_rve(
    geom: &CellGeometry,
    elements_per_cell_edge: usize,
) -> Result<PeriodicMesh> {
    geom.validate()?;
    if elements_per_cell_edge < 10 {
        return Err(Error::Resolution {
            thickness: geom.wall_thickness,
            elements_per_cell: elements_per_cell_edge,
            detail: "at least 10 elements per cell edge are required".into(),
        });
    }
    let k = half_wall_layers(geom, elements_per_cell_edge)?;
    let epc = elements_per_cell_edge;
    let m = geom.repetitions * epc;
    let w = geom.rve_edge_local();

    // Inclusion occupies layers [k, epc-k) of each cell in both directions.
    let mesh = build_structured_rve(w, m, |_| Phase::Matrix);
    let mut mesh = mesh;
    for j in 0..m {
        for i in 0..m {
            let (li, lj) = (i % epc, j % epc);
            let inside = li >= k && li < epc - k && lj >= k && lj < epc - k;
            if inside {
                mesh.phases[j * m + i] = Phase::Inclusion;
            }
        }
    }
    Ok(mesh)
}

/// Reads the native exchange format, reconstructing periodic pairs by
/// coordinate matching with tolerance 1e-8 * w.
pub fn import_mesh(path: &Path) -> Result<PeriodicMesh> {
    let text = std::fs::read_to_string(path)?;
    parse_native(&text)
}

pub fn parse_native(text: &str) -> Result<PeriodicMesh> {
    let mut lines = text.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, &str)> {
        for (idx, raw) in lines.by_ref() {
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            return Ok((idx + 1, s));
        }
        Err(Error::MeshFormat {
            line: 0,
            detail: format!("unexpected end of file, expected {expect}"),
        })
    };

    let (line, header) = next_line("header")?;
    if header != "gradhom-mesh v1" {
        return Err(Error::MeshFormat {
            line,
            detail: format!("expected header 'gradhom-mesh v1', got '{header}'"),
        });
    }
    let (line, count) = next_line("node count")?;
    let n_nodes: usize = count.parse().map_err(|_| Error::MeshFormat {
        line,
        detail: format!("invalid node count '{count}'"),
    })?;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (line, s) = next_line("node coordinates")?;
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::MeshFormat {
                line,
                detail: format!("expected 'x y', got '{s}'"),
            });
        }
        let x: f64 = parts[0].parse().map_err(|_| Error::MeshFormat {
            line,
            detail: format!("invalid coordinate '{}'", parts[0]),
        })?;
        let y: f64 = parts[1].parse().map_err(|_| Error::MeshFormat {
            line,
            detail: format!("invalid coordinate '{}'", parts[1]),
        })?;
        nodes.push([x, y]);
    }
    let (line, count) = next_line("element count")?;
    let n_elems: usize = count.parse().map_err(|_| Error::MeshFormat {
        line,
        detail: format!("invalid element count '{count}'"),
    })?;
    let mut elements = Vec::with_capacity(n_elems);
    let mut phases = Vec::with_capacity(n_elems);
    for _ in 0..n_elems {
        let (line, s) = next_line("element connectivity")?;
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::MeshFormat {
                line,
                detail: format!("expected 'n0 n1 n2 n3 phase' (4-node quadrilaterals only), got '{s}'"),
            });
        }
        let mut q = [0usize; 4];
        for (slot, part) in q.iter_mut().zip(&parts[..4]) {
            let id: usize = part.parse().map_err(|_| Error::MeshFormat {
                line,
                detail: format!("invalid node index '{part}'"),
            })?;
            if id >= nodes.len() {
                return Err(Error::MeshFormat {
                    line,
                    detail: format!("node index {id} out of range ({} nodes)", nodes.len()),
                });
            }
            *slot = id;
        }
        let phase = match parts[4] {
            "matrix" => Phase::Matrix,
            "inclusion" => Phase::Inclusion,
            other => {
                return Err(Error::MeshFormat {
                    line,
                    detail: format!("unknown phase '{other}'"),
                })
            }
        };
        elements.push(q);
        phases.push(phase);
    }

    let mut mesh = PeriodicMesh {
        nodes,
        elements,
        phases,
        periodic_pairs: Vec::new(),
        corner_group: None,
    };
    reconstruct_pairing(&mut mesh)?;
    Ok(mesh)
}

/// Rebuilds periodic pairs and the corner group by matching opposite
/// boundary nodes under translation.
fn reconstruct_pairing(mesh: &mut PeriodicMesh) -> Result<()> {
    let (lo, hi) = mesh.bounding_box();
    let w = [hi[0] - lo[0], hi[1] - lo[1]];
    let scale = w[0].max(w[1]);
    if !(scale > 0.0) {
        return Err(Error::Pairing("degenerate bounding box".into()));
    }
    let tol = 1e-8 * scale;

    let on = |v: f64, edge: f64| (v - edge).abs() <= tol;
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut bottom = Vec::new();
    let mut top = Vec::new();
    for (id, p) in mesh.nodes.iter().enumerate() {
        if on(p[0], lo[0]) {
            left.push(id);
        }
        if on(p[0], hi[0]) {
            right.push(id);
        }
        if on(p[1], lo[1]) {
            bottom.push(id);
        }
        if on(p[1], hi[1]) {
            top.push(id);
        }
    }

    let corner = |xs: &[usize], ys: &[usize]| -> Result<usize> {
        for &a in xs {
            if ys.contains(&a) {
                return Ok(a);
            }
        }
        Err(Error::Pairing("missing corner node".into()))
    };
    let bl = corner(&left, &bottom)?;
    let br = corner(&right, &bottom)?;
    let tl = corner(&left, &top)?;
    let tr = corner(&right, &top)?;

    let match_one = |slave: usize, candidates: &[usize], axis: usize| -> Result<usize> {
        let sp = mesh.nodes[slave];
        let mut best: Option<(usize, f64)> = None;
        for &c in candidates {
            let d = (mesh.nodes[c][axis] - sp[axis]).abs();
            if d <= tol && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        best.map(|(c, _)| c).ok_or_else(|| {
            Error::Pairing(format!(
                "boundary node {} at ({}, {}) has no opposite match within {tol:.3e}",
                slave, sp[0], sp[1]
            ))
        })
    };

    let mut pairs = Vec::new();
    for &s in &right {
        if s == tr {
            continue;
        }
        let m = match_one(s, &left, 1)?;
        pairs.push(PeriodicPair {
            master: m,
            slave: s,
            translation: [w[0], 0.0],
        });
    }
    for &s in &top {
        if s == tr {
            continue;
        }
        let m = match_one(s, &bottom, 0)?;
        pairs.push(PeriodicPair {
            master: m,
            slave: s,
            translation: [0.0, w[1]],
        });
    }
    // Every left/bottom node must be matched by some slave: the counts of
    // opposite boundaries must agree.
    if right.len() != left.len() {
        return Err(Error::Pairing(format!(
            "left boundary has {} nodes but right boundary has {}",
            left.len(),
            right.len()
        )));
    }
    if top.len() != bottom.len() {
        return Err(Error::Pairing(format!(
            "bottom boundary has {} nodes but top boundary has {}",
            bottom.len(),
            top.len()
        )));
    }
    mesh.periodic_pairs = pairs;
    mesh.corner_group = Some(CornerGroup {
        master: bl,
        slaves: [br, tl, tr],
    });
    mesh.check_pairing(tol)?;
    Ok(())
}
