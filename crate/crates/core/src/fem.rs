//! Bilinear-quadrilateral finite element kernel: element stiffness, sparse
//! assembly, periodic master/slave condensation with zero-mean constraints,
//! and a preconditioned conjugate-gradient solver.

use crate::error::{Error, Result};
use crate::material::MicroMaterial;
use crate::mesh::{CornerGroup, PeriodicMesh, PeriodicPair};
use crate::tensors::Tensor4;

/// Tensor-product Gauss rule on the reference square [-1,1]^2.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    /// (xi, eta) points with weights.
    pub points: Vec<([f64; 2], f64)>,
}

impl QuadratureRule {
    /// n x n Gauss rule, n in 1..=4. The default for stiffness assembly is
    /// n = 2, which integrates bilinear-bilinear products exactly.
    pub fn gauss(n: usize) -> Self {
        let (abscissae, weights): (Vec<f64>, Vec<f64>) = match n {
            1 => (vec![0.0], vec![2.0]),
            2 => {
                let a = 1.0 / 3.0_f64.sqrt();
                (vec![-a, a], vec![1.0, 1.0])
            }
            3 => {
                let a = (3.0 / 5.0_f64).sqrt();
                (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
            }
            4 => {
                let a = 0.3399810435848563;
                let b = 0.8611363115940526;
                let wa = 0.6521451548625461;
                let wb = 0.3478548451374538;
                (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
            }
            _ => panic!("unsupported Gauss order {n}"),
        };
        let mut points = Vec::with_capacity(n * n);
        for (j, &eta) in abscissae.iter().enumerate() {
            for (i, &xi) in abscissae.iter().enumerate() {
                points.push(([xi, eta], weights[i] * weights[j]));
            }
        }
        Self { points }
    }

    pub fn weight_sum(&self) -> f64 {
        self.points.iter().map(|(_, w)| w).sum()
    }
}

/// Q4 shape function values at a reference point; node order
/// (-1,-1), (1,-1), (1,1), (-1,1).
pub fn shape_values(xi: [f64; 2]) -> [f64; 4] {
    let (x, y) = (xi[0], xi[1]);
    [
        0.25 * (1.0 - x) * (1.0 - y),
        0.25 * (1.0 + x) * (1.0 - y),
        0.25 * (1.0 + x) * (1.0 + y),
        0.25 * (1.0 - x) * (1.0 + y),
    ]
}

/// Q4 shape function gradients with respect to the reference coordinates.
pub fn shape_gradients_ref(xi: [f64; 2]) -> [[f64; 2]; 4] {
    let (x, y) = (xi[0], xi[1]);
    [
        [-0.25 * (1.0 - y), -0.25 * (1.0 - x)],
        [0.25 * (1.0 - y), -0.25 * (1.0 + x)],
        [0.25 * (1.0 + y), 0.25 * (1.0 + x)],
        [-0.25 * (1.0 + y), 0.25 * (1.0 - x)],
    ]
}

/// Geometry data of one quadrature point of one element.
pub struct QpGeometry {
    /// Shape function gradients with respect to physical coordinates.
    pub grads: [[f64; 2]; 4],
    /// Shape function values.
    pub values: [f64; 4],
    /// Quadrature weight times Jacobian determinant.
    pub jxw: f64,
    /// Physical position of the point.
    pub position: [f64; 2],
}

/// Maps one reference quadrature point into an element. Fails on
/// non-positive Jacobian determinant.
pub fn qp_geometry(coords: &[[f64; 2]; 4], xi: [f64; 2], weight: f64) -> Result<QpGeometry> {
    let dref = shape_gradients_ref(xi);
    let values = shape_values(xi);
    let mut jac = [[0.0; 2]; 2];
    for i in 0..4 {
        for a in 0..2 {
            for b in 0..2 {
                jac[a][b] += coords[i][a] * dref[i][b];
            }
        }
    }
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    if det <= 0.0 {
        return Err(Error::InvertedElement {
            element: usize::MAX,
            det_j: det,
        });
    }
    let inv = [
        [jac[1][1] / det, -jac[0][1] / det],
        [-jac[1][0] / det, jac[0][0] / det],
    ];
    let mut grads = [[0.0; 2]; 4];
    for i in 0..4 {
        for g in 0..2 {
            // dN/dy_g = dN/dxi_b * dxi_b/dy_g
            grads[i][g] = dref[i][0] * inv[0][g] + dref[i][1] * inv[1][g];
        }
    }
    let mut position = [0.0; 2];
    for i in 0..4 {
        for d in 0..2 {
            position[d] += values[i] * coords[i][d];
        }
    }
    Ok(QpGeometry {
        grads,
        values,
        jxw: weight * det,
        position,
    })
}

/// 8x8 element stiffness for a constant rank-4 stiffness over the element:
/// K[(i,a),(j,b)] = sum_qp jxw * dN_i/dy_g C_agbd dN_j/dy_d.
pub fn element_stiffness(
    c: &Tensor4,
    coords: &[[f64; 2]; 4],
    quad: &QuadratureRule,
) -> Result<[[f64; 8]; 8]> {
    let mut k = [[0.0; 8]; 8];
    for &(xi, w) in &quad.points {
        let qp = qp_geometry(coords, xi, w)?;
        for i in 0..4 {
            for a in 0..2 {
                for j in 0..4 {
                    for b in 0..2 {
                        let mut v = 0.0;
                        for g in 0..2 {
                            for d in 0..2 {
                                v += qp.grads[i][g] * c.0[a][g][b][d] * qp.grads[j][d];
                            }
                        }
                        k[2 * i + a][2 * j + b] += qp.jxw * v;
                    }
                }
            }
        }
    }
    Ok(k)
}

/// Compressed sparse row matrix (full symmetric storage).
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from triplets, summing duplicates. The triplet buffer is
    /// consumed (sorted in place).
    pub fn from_triplets(n: usize, triplets: &mut Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut last: Option<(u32, u32)> = None;
        for &(r, c, v) in triplets.iter() {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] as usize == r {
                    d[r] = self.values[k];
                }
            }
        }
        d
    }

    /// u^T K u.
    pub fn quadratic_form(&self, u: &[f64]) -> f64 {
        let mut s = 0.0;
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * u[self.col_idx[k] as usize];
            }
            s += u[r] * acc;
        }
        s
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[r][self.col_idx[k] as usize] = self.values[k];
            }
        }
        m
    }

    /// Largest relative asymmetry max|K_ij - K_ji| / max|K_ij|.
    pub fn asymmetry(&self) -> f64 {
        let dense_scale = self
            .values
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let mut worst = 0.0_f64;
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k] as usize;
                if c < r {
                    continue;
                }
                let vt = self.get(c, r);
                worst = worst.max((self.values[k] - vt).abs());
            }
        }
        worst / dense_scale
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            if self.col_idx[k] as usize == c {
                return self.values[k];
            }
        }
        0.0
    }
}

/// Assembled global system before constraints: stiffness over all node dofs
/// plus the constraint metadata carried from the mesh.
pub struct LinearSystem {
    pub matrix: CsrMatrix,
    /// Integral of the shape function of each node (lumped volume weights).
    pub node_weights: Vec<f64>,
    pub volume: f64,
    pub pairs: Vec<PeriodicPair>,
    pub corner_group: Option<CornerGroup>,
    pub node_count: usize,
}

/// Galerkin assembly with per-phase isotropic stiffness.
pub fn assemble(
    mesh: &PeriodicMesh,
    material: &MicroMaterial,
    quad: &QuadratureRule,
) -> Result<LinearSystem> {
    let elem_c = element_stiffness_field(mesh, material)?;
    assemble_with_stiffness(mesh, &elem_c, quad)
}

/// Per-element stiffness tensors from the phase tags.
pub fn element_stiffness_field(
    mesh: &PeriodicMesh,
    material: &MicroMaterial,
) -> Result<Vec<Tensor4>> {
    let c_matrix = material.stiffness(crate::material::Phase::Matrix)?;
    let c_inclusion = material.stiffness(crate::material::Phase::Inclusion)?;
    Ok(mesh
        .phases
        .iter()
        .map(|p| match p {
            crate::material::Phase::Matrix => c_matrix,
            crate::material::Phase::Inclusion => c_inclusion,
        })
        .collect())
}

/// Galerkin assembly with an explicit stiffness tensor per element.
pub fn assemble_with_stiffness(
    mesh: &PeriodicMesh,
    elem_c: &[Tensor4],
    quad: &QuadratureRule,
) -> Result<LinearSystem> {
    let n_nodes = mesh.node_count();
    let ndof = 2 * n_nodes;
    let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(mesh.element_count() * 64);
    let mut node_weights = vec![0.0; n_nodes];
    let mut volume = 0.0;
    for (e, quad_nodes) in mesh.elements.iter().enumerate() {
        let coords = [
            mesh.nodes[quad_nodes[0]],
            mesh.nodes[quad_nodes[1]],
            mesh.nodes[quad_nodes[2]],
            mesh.nodes[quad_nodes[3]],
        ];
        let ke = element_stiffness(&elem_c[e], &coords, quad).map_err(|err| match err {
            Error::InvertedElement { det_j, .. } => Error::InvertedElement { element: e, det_j },
            other => other,
        })?;
        for i in 0..4 {
            for a in 0..2 {
                let r = (2 * quad_nodes[i] + a) as u32;
                for j in 0..4 {
                    for b in 0..2 {
                        let c = (2 * quad_nodes[j] + b) as u32;
                        triplets.push((r, c, ke[2 * i + a][2 * j + b]));
                    }
                }
            }
        }
        for &(xi, w) in &quad.points {
            let qp = qp_geometry(&coords, xi, w)?;
            volume += qp.jxw;
            for i in 0..4 {
                node_weights[quad_nodes[i]] += qp.jxw * qp.values[i];
            }
        }
    }
    let matrix = CsrMatrix::from_triplets(ndof, &mut triplets);
    Ok(LinearSystem {
        matrix,
        node_weights,
        volume,
        pairs: mesh.periodic_pairs.clone(),
        corner_group: mesh.corner_group,
        node_count: n_nodes,
    })
}

/// Periodically condensed system: slave dofs eliminated onto masters, with
/// the zero-mean functionals retained for removing the translational null
/// space from solutions.
pub struct CondensedSystem {
    pub matrix: CsrMatrix,
    /// Full node id -> master node id.
    pub node_root: Vec<usize>,
    /// Full node id -> reduced node index (through the root).
    pub reduced_index: Vec<usize>,
    pub reduced_count: usize,
    /// Lumped volume weight per full node.
    pub node_weights: Vec<f64>,
    pub volume: f64,
    pub node_count: usize,
}

/// Resolves the master/slave graph (path compression with translation
/// bookkeeping; inconsistent cycles are an error) and eliminates slave dofs.
pub fn condense_periodic_zero_mean(sys: &LinearSystem) -> Result<CondensedSystem> {
    let n = sys.node_count;
    let mut parent: Vec<usize> = (0..n).collect();
    let mut shift: Vec<[f64; 2]> = vec![[0.0; 2]; n];

    // Walks to the root, accumulating the translation from `node` to it.
    fn find(parent: &[usize], shift: &[[f64; 2]], mut node: usize) -> Result<(usize, [f64; 2])> {
        let mut acc = [0.0; 2];
        let mut steps = 0;
        while parent[node] != node {
            acc[0] += shift[node][0];
            acc[1] += shift[node][1];
            node = parent[node];
            steps += 1;
            if steps > parent.len() {
                return Err(Error::Constraint(format!(
                    "cycle detected while resolving node {node}"
                )));
            }
        }
        Ok((node, acc))
    }

    let mut scale = 0.0_f64;
    for p in &sys.pairs {
        scale = scale.max(p.translation[0].abs()).max(p.translation[1].abs());
    }
    let tol = 1e-9 * scale.max(1.0);

    let mut link = |parent: &mut Vec<usize>,
                    shift: &mut Vec<[f64; 2]>,
                    master: usize,
                    slave: usize,
                    translation: [f64; 2]|
     -> Result<()> {
        let (rm, tm) = find(parent, shift, master)?;
        let (rs, ts) = find(parent, shift, slave)?;
        // slave = master + translation; roots carry accumulated offsets.
        let net = [translation[0] + tm[0] - ts[0], translation[1] + tm[1] - ts[1]];
        if rm == rs {
            if net[0].abs() > tol || net[1].abs() > tol {
                return Err(Error::Constraint(format!(
                    "nodes {master} and {slave} are already linked with a conflicting translation ({:.3e}, {:.3e})",
                    net[0], net[1]
                )));
            }
            return Ok(());
        }
        parent[rs] = rm;
        shift[rs] = [-net[0], -net[1]];
        Ok(())
    };

    for p in &sys.pairs {
        link(&mut parent, &mut shift, p.master, p.slave, p.translation)?;
    }
    if let Some(g) = &sys.corner_group {
        for &s in &g.slaves {
            // Translation within the corner group is implied by coordinates;
            // only the partition matters here, so adopt whatever offset the
            // graph already carries (zero check skipped by linking with the
            // accumulated offset).
            let (rm, tm) = find(&parent, &shift, g.master)?;
            let (rs, ts) = find(&parent, &shift, s)?;
            if rm != rs {
                parent[rs] = rm;
                shift[rs] = [tm[0] - ts[0], tm[1] - ts[1]];
            }
        }
    }

    let mut node_root = vec![0usize; n];
    for i in 0..n {
        node_root[i] = find(&parent, &shift, i)?.0;
    }
    let mut reduced_index = vec![usize::MAX; n];
    let mut reduced_count = 0;
    for i in 0..n {
        if node_root[i] == i {
            reduced_index[i] = reduced_count;
            reduced_count += 1;
        }
    }
    for i in 0..n {
        reduced_index[i] = reduced_index[node_root[i]];
    }

    let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(sys.matrix.nnz());
    for r in 0..sys.matrix.n {
        let (rn, rc) = (r / 2, r % 2);
        let rr = (2 * reduced_index[rn] + rc) as u32;
        for k in sys.matrix.row_ptr[r]..sys.matrix.row_ptr[r + 1] {
            let c = sys.matrix.col_idx[k] as usize;
            let (cn, cc) = (c / 2, c % 2);
            let cr = (2 * reduced_index[cn] + cc) as u32;
            triplets.push((rr, cr, sys.matrix.values[k]));
        }
    }
    let matrix = CsrMatrix::from_triplets(2 * reduced_count, &mut triplets);

    Ok(CondensedSystem {
        matrix,
        node_root,
        reduced_index,
        reduced_count,
        node_weights: sys.node_weights.clone(),
        volume: sys.volume,
        node_count: n,
    })
}

impl CondensedSystem {
    /// Accumulates a full-numbering right-hand side onto the reduced dofs.
    pub fn reduce_rhs(&self, full: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; 2 * self.reduced_count];
        for node in 0..self.node_count {
            let red = self.reduced_index[node];
            for c in 0..2 {
                r[2 * red + c] += full[2 * node + c];
            }
        }
        r
    }

    /// Expands a reduced vector to all nodes (slave = master).
    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; 2 * self.node_count];
        for node in 0..self.node_count {
            let red = self.reduced_index[node];
            for c in 0..2 {
                full[2 * node + c] = reduced[2 * red + c];
            }
        }
        full
    }

    /// Volume mean of each displacement component of a full-numbering field.
    pub fn component_means(&self, full: &[f64]) -> [f64; 2] {
        let mut m = [0.0; 2];
        for node in 0..self.node_count {
            for c in 0..2 {
                m[c] += self.node_weights[node] * full[2 * node + c];
            }
        }
        [m[0] / self.volume, m[1] / self.volume]
    }

    /// Subtracts the volume mean componentwise.
    pub fn remove_mean(&self, full: &mut [f64]) {
        let m = self.component_means(full);
        for node in 0..self.node_count {
            for c in 0..2 {
                full[2 * node + c] -= m[c];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preconditioner {
    Diagonal,
    None,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Defaults to 10 * ndof when absent.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-10,
            max_iter: None,
            preconditioner: Preconditioner::Diagonal,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients. `project`, when given, is applied to
/// preconditioned directions to keep iterates out of a known null space.
fn pcg(
    matrix: &CsrMatrix,
    b: &[f64],
    settings: &SolverSettings,
    project: Option<&dyn Fn(&mut [f64])>,
    context: &str,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = matrix.n;
    let b_norm = norm(b);
    let target = (settings.rel_tol * b_norm).max(settings.abs_tol);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                residual_norm: 0.0,
            },
        ));
    }
    let inv_diag: Option<Vec<f64>> = match settings.preconditioner {
        Preconditioner::Diagonal => Some(
            matrix
                .diagonal()
                .iter()
                .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
                .collect(),
        ),
        Preconditioner::None => None,
    };
    let apply_prec = |r: &[f64], z: &mut [f64]| match &inv_diag {
        Some(d) => {
            for i in 0..n {
                z[i] = d[i] * r[i];
            }
        }
        None => z.copy_from_slice(r),
    };

    let max_iter = settings.max_iter.unwrap_or(10 * n);
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    apply_prec(&r, &mut z);
    if let Some(p) = project {
        p(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut res = norm(&r);
    for it in 0..max_iter {
        if res <= target {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    residual_norm: res,
                },
            ));
        }
        matrix.matvec_into(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return Err(Error::IndefiniteSystem {
                curvature: pq,
                context: context.to_string(),
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = norm(&r);
        apply_prec(&r, &mut z);
        if let Some(pr) = project {
            pr(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= target {
        return Ok((
            x,
            SolveStats {
                iterations: max_iter,
                residual_norm: res,
            },
        ));
    }
    Err(Error::SolverFailure {
        iterations: max_iter,
        residual: res,
        target,
        context: context.to_string(),
    })
}

/// Solves the condensed periodic system for a right-hand side given in full
/// node numbering. Returns the expanded, zero-mean field over all nodes.
pub fn solve_periodic(
    sys: &CondensedSystem,
    rhs_full: &[f64],
    settings: &SolverSettings,
    context: &str,
) -> Result<(Vec<f64>, SolveStats)> {
    let mut b = sys.reduce_rhs(rhs_full);
    let nred = sys.reduced_count;
    // The reduced operator annihilates constants per component; keep the
    // right-hand side and search directions in its range.
    let project = |v: &mut [f64]| {
        let mut mean = [0.0; 2];
        for node in 0..nred {
            mean[0] += v[2 * node];
            mean[1] += v[2 * node + 1];
        }
        mean[0] /= nred as f64;
        mean[1] /= nred as f64;
        for node in 0..nred {
            v[2 * node] -= mean[0];
            v[2 * node + 1] -= mean[1];
        }
    };
    project(&mut b);
    let (x, stats) = pcg(&sys.matrix, &b, settings, Some(&project), context)?;
    let mut full = sys.expand(&x);
    sys.remove_mean(&mut full);
    Ok((full, stats))
}

/// Dirichlet-condensed system: the free-free stiffness block and the
/// right-hand side induced by the prescribed values.
pub struct DirichletSystem {
    pub matrix: CsrMatrix,
    pub free_dofs: Vec<usize>,
    pub rhs: Vec<f64>,
    /// Full-size vector holding prescribed values (zero on free dofs).
    pub prescribed: Vec<f64>,
    pub ndof: usize,
}

/// Eliminates prescribed dofs from a symmetric system.
pub fn condense_dirichlet(matrix: &CsrMatrix, prescribed: &[(usize, f64)]) -> DirichletSystem {
    let ndof = matrix.n;
    let mut fixed = vec![false; ndof];
    let mut values = vec![0.0; ndof];
    for &(dof, v) in prescribed {
        fixed[dof] = true;
        values[dof] = v;
    }
    let mut free_slot = vec![usize::MAX; ndof];
    let mut free_dofs = Vec::new();
    for d in 0..ndof {
        if !fixed[d] {
            free_slot[d] = free_dofs.len();
            free_dofs.push(d);
        }
    }
    let nfree = free_dofs.len();
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
    let mut rhs = vec![0.0; nfree];
    for r in 0..ndof {
        if fixed[r] {
            continue;
        }
        let fr = free_slot[r];
        for k in matrix.row_ptr[r]..matrix.row_ptr[r + 1] {
            let c = matrix.col_idx[k] as usize;
            let v = matrix.values[k];
            if fixed[c] {
                rhs[fr] -= v * values[c];
            } else {
                triplets.push((fr as u32, free_slot[c] as u32, v));
            }
        }
    }
    DirichletSystem {
        matrix: CsrMatrix::from_triplets(nfree, &mut triplets),
        free_dofs,
        rhs,
        prescribed: values,
        ndof,
    }
}

/// Solves the Dirichlet-condensed system and scatters back to full size.
pub fn solve_dirichlet(
    sys: &DirichletSystem,
    extra_rhs: Option<&[f64]>,
    settings: &SolverSettings,
    context: &str,
) -> Result<(Vec<f64>, SolveStats)> {
    let mut b = sys.rhs.clone();
    if let Some(extra) = extra_rhs {
        for (slot, &dof) in sys.free_dofs.iter().enumerate() {
            b[slot] += extra[dof];
        }
    }
    let (x, stats) = pcg(&sys.matrix, &b, settings, None, context)?;
    let mut full = sys.prescribed.clone();
    for (slot, &dof) in sys.free_dofs.iter().enumerate() {
        full[dof] = x[slot];
    }
    Ok((full, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::isotropic_stiffness;
    use crate::mesh::build_structured_rve;
    use crate::material::Phase;

    const UNIT_SQUARE: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

    #[test]
    fn quadrature_weights_sum_to_reference_area() {
        for n in 1..=4 {
            let q = QuadratureRule::gauss(n);
            assert!((q.weight_sum() - 4.0).abs() < 1e-14, "order {n}");
        }
    }

    #[test]
    fn quadrature_integrates_bilinear_products_exactly() {
        // integral of (xi*eta)^2 over [-1,1]^2 = 4/9
        let q = QuadratureRule::gauss(2);
        let val: f64 = q
            .points
            .iter()
            .map(|&(p, w)| w * (p[0] * p[1]).powi(2))
            .sum();
        assert!((val - 4.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn element_stiffness_annihilates_rigid_modes() {
        let c = isotropic_stiffness(100.0, 0.3).unwrap();
        let k = element_stiffness(&c, &UNIT_SQUARE, &QuadratureRule::gauss(2)).unwrap();
        let tx = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let ty = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        // In-plane rotation: u = (-y, x) at each node.
        let mut rot = [0.0; 8];
        for (i, p) in UNIT_SQUARE.iter().enumerate() {
            rot[2 * i] = -p[1];
            rot[2 * i + 1] = p[0];
        }
        for mode in [tx, ty, rot] {
            for r in 0..8 {
                let v: f64 = (0..8).map(|cc| k[r][cc] * mode[cc]).sum();
                assert!(v.abs() < 1e-10, "row {r}: {v}");
            }
        }
    }

    #[test]
    fn element_stiffness_is_linear_in_modulus() {
        let c1 = isotropic_stiffness(100.0, 0.3).unwrap();
        let c2 = isotropic_stiffness(1e-30, 0.3).unwrap();
        let k1 = element_stiffness(&c1, &UNIT_SQUARE, &QuadratureRule::gauss(2)).unwrap();
        let k2 = element_stiffness(&c2, &UNIT_SQUARE, &QuadratureRule::gauss(2)).unwrap();
        for r in 0..8 {
            for cc in 0..8 {
                assert!((k2[r][cc] - 1e-32 * k1[r][cc]).abs() <= 1e-16 * k1[r][cc].abs());
            }
        }
    }

    #[test]
    fn element_stiffness_matches_high_order_quadrature() {
        // Independent 4x4 Gauss integration of the same integrand.
        let c = isotropic_stiffness(1.0, 0.0).unwrap();
        let k = element_stiffness(&c, &UNIT_SQUARE, &QuadratureRule::gauss(2)).unwrap();
        let oracle = element_stiffness(&c, &UNIT_SQUARE, &QuadratureRule::gauss(4)).unwrap();
        for r in 0..8 {
            assert!((k[r][r] - oracle[r][r]).abs() < 1e-13, "diag {r}");
        }
    }

    #[test]
    fn inverted_element_is_detected() {
        let c = isotropic_stiffness(1.0, 0.0).unwrap();
        // Clockwise node order flips the Jacobian sign.
        let coords = [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        match element_stiffness(&c, &coords, &QuadratureRule::gauss(2)) {
            Err(Error::InvertedElement { det_j, .. }) => assert!(det_j < 0.0),
            other => panic!("expected inverted element, got {other:?}"),
        }
    }

    fn homogeneous_mesh(m: usize) -> (crate::mesh::PeriodicMesh, MicroMaterial) {
        let mesh = build_structured_rve(1.0, m, |_| Phase::Matrix);
        let mat = MicroMaterial::homogeneous(100.0, 0.3).unwrap();
        (mesh, mat)
    }

    #[test]
    fn single_element_assembly_equals_element_matrix() {
        let (mesh, mat) = homogeneous_mesh(1);
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let coords = [
            mesh.nodes[mesh.elements[0][0]],
            mesh.nodes[mesh.elements[0][1]],
            mesh.nodes[mesh.elements[0][2]],
            mesh.nodes[mesh.elements[0][3]],
        ];
        let c = mat.stiffness(Phase::Matrix).unwrap();
        let ke = element_stiffness(&c, &coords, &QuadratureRule::gauss(2)).unwrap();
        let dense = sys.matrix.to_dense();
        for i in 0..8 {
            for j in 0..8 {
                assert!((dense[i][j] - ke[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn assembled_matrix_annihilates_translations() {
        let (mesh, mat) = homogeneous_mesh(2);
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let n = sys.matrix.n;
        for comp in 0..2 {
            let mut e = vec![0.0; n];
            for node in 0..mesh.node_count() {
                e[2 * node + comp] = 1.0;
            }
            let ke = sys.matrix.matvec(&e);
            let scale = sys.matrix.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            for v in ke {
                assert!(v.abs() < 1e-12 * scale);
            }
        }
    }

    #[test]
    fn nnz_matches_stencil_arithmetic() {
        // Structured grid: interior nodes couple to 9 nodes, edge nodes to 6,
        // corner nodes to 4; each coupling is a 2x2 block.
        for m in [2usize, 3, 5] {
            let (mesh, mat) = homogeneous_mesh(m);
            let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
            let interior = (m - 1) * (m - 1);
            let edge = 4 * (m - 1);
            let predicted = 4 * (9 * interior + 6 * edge + 4 * 4);
            assert_eq!(sys.matrix.nnz(), predicted, "m = {m}");
        }
    }

    #[test]
    fn assembly_order_does_not_change_values() {
        let geom = crate::mesh::CellGeometry::new(1.0, 0.2, 1, 1.0).unwrap();
        let mesh = crate::mesh::build_square_lattice_rve(&geom, 10).unwrap();
        let mat = MicroMaterial::new(100.0, 0.3, 1.0, 0.1).unwrap();
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();

        let mut reversed = mesh.clone();
        reversed.elements.reverse();
        reversed.phases.reverse();
        let sys_r = assemble(&reversed, &mat, &QuadratureRule::gauss(2)).unwrap();

        assert_eq!(sys.matrix.nnz(), sys_r.matrix.nnz());
        let scale = sys.matrix.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (a, b) in sys.matrix.values.iter().zip(&sys_r.matrix.values) {
            assert!((a - b).abs() <= 1e-14 * scale);
        }
    }

    #[test]
    fn stiffness_invariant_under_mesh_translation() {
        let (mesh, mat) = homogeneous_mesh(3);
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let mut moved = mesh.clone();
        for p in &mut moved.nodes {
            p[0] += 0.5;
            p[1] -= 0.25;
        }
        let sys_m = assemble(&moved, &mat, &QuadratureRule::gauss(2)).unwrap();
        let scale = sys.matrix.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (a, b) in sys.matrix.values.iter().zip(&sys_m.matrix.values) {
            assert!((a - b).abs() <= 1e-14 * scale);
        }
    }

    #[test]
    fn energy_identity_holds() {
        let geom = crate::mesh::CellGeometry::new(1.0, 0.2, 1, 1.0).unwrap();
        let mesh = crate::mesh::build_square_lattice_rve(&geom, 10).unwrap();
        let mat = MicroMaterial::new(100.0, 0.3, 1.0, 0.1).unwrap();
        let quad = QuadratureRule::gauss(2);
        let sys = assemble(&mesh, &mat, &quad).unwrap();
        let elem_c = element_stiffness_field(&mesh, &mat).unwrap();

        // Smooth deterministic nodal field.
        let mut u = vec![0.0; 2 * mesh.node_count()];
        for (i, p) in mesh.nodes.iter().enumerate() {
            u[2 * i] = (3.1 * p[0]).sin() * (1.7 * p[1]).cos();
            u[2 * i + 1] = (2.3 * p[0] + 0.4).cos() * (1.1 * p[1]).sin();
        }
        let quad_energy = {
            let mut e = 0.0;
            for (el, q) in mesh.elements.iter().enumerate() {
                let coords = [
                    mesh.nodes[q[0]],
                    mesh.nodes[q[1]],
                    mesh.nodes[q[2]],
                    mesh.nodes[q[3]],
                ];
                for &(xi, w) in &quad.points {
                    let qp = qp_geometry(&coords, xi, w).unwrap();
                    let mut grad = [[0.0; 2]; 2];
                    for (k, &node) in q.iter().enumerate() {
                        for a in 0..2 {
                            for b in 0..2 {
                                grad[a][b] += u[2 * node + a] * qp.grads[k][b];
                            }
                        }
                    }
                    let c = &elem_c[el];
                    let mut w_density = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            for k in 0..2 {
                                for l in 0..2 {
                                    w_density += c.0[i][j][k][l] * grad[i][j] * grad[k][l];
                                }
                            }
                        }
                    }
                    e += qp.jxw * w_density;
                }
            }
            e
        };
        let matrix_energy = sys.matrix.quadratic_form(&u);
        assert!(
            (quad_energy - matrix_energy).abs() <= 1e-10 * quad_energy.abs(),
            "{quad_energy} vs {matrix_energy}"
        );
    }

    #[test]
    fn condensed_homogeneous_zero_rhs_gives_zero() {
        let (mesh, mat) = homogeneous_mesh(4);
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let red = condense_periodic_zero_mean(&sys).unwrap();
        let rhs = vec![0.0; 2 * mesh.node_count()];
        let (u, stats) = solve_periodic(&red, &rhs, &SolverSettings::default(), "test").unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn condensed_operator_positive_definite_on_constraint_subspace() {
        use nalgebra::{DMatrix, SymmetricEigen};
        let (mesh, mat) = homogeneous_mesh(4);
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let red = condense_periodic_zero_mean(&sys).unwrap();
        let n = red.matrix.n;
        let dense = red.matrix.to_dense();
        let mut k = DMatrix::<f64>::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                k[(r, c)] = dense[r][c];
            }
        }
        // Project out the two constrained directions (volume-weighted
        // constants per component on the reduced nodes).
        let mut w = DMatrix::<f64>::zeros(n, 2);
        for node in 0..red.node_count {
            let idx = red.reduced_index[node];
            for c in 0..2 {
                w[(2 * idx + c, c)] += red.node_weights[node];
            }
        }
        let wtw = (w.transpose() * &w).try_inverse().unwrap();
        let p = DMatrix::<f64>::identity(n, n) - &w * wtw * w.transpose();
        let pkp = &p * k * &p;
        let eig = SymmetricEigen::new(pkp);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let scale = vals.last().copied().unwrap();
        // Exactly the two projected-out directions may be (near) zero.
        assert!(vals[0].abs() < 1e-10 * scale);
        assert!(vals[1].abs() < 1e-10 * scale);
        assert!(vals[2] > 1e-8 * scale, "third eigenvalue {} not positive", vals[2]);
    }

    #[test]
    fn constant_field_violates_mean_constraint_by_volume_times_c() {
        let (mesh, mat) = homogeneous_mesh(3);
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let red = condense_periodic_zero_mean(&sys).unwrap();
        let c = 0.7;
        let full = vec![c; 2 * mesh.node_count()];
        let means = red.component_means(&full);
        // The constraint functional evaluates to V*c; means are c exactly.
        assert!((means[0] - c).abs() < 1e-12);
        assert!((means[1] - c).abs() < 1e-12);
        let raw: f64 = red
            .node_weights
            .iter()
            .zip(full.chunks(2))
            .map(|(w, u)| w * u[0])
            .sum();
        assert!((raw - red.volume * c).abs() < 1e-12 * red.volume);
    }

    #[test]
    fn manufactured_solution_is_recovered() {
        let geom = crate::mesh::CellGeometry::new(1.0, 0.2, 1, 1.0).unwrap();
        let mesh = crate::mesh::build_square_lattice_rve(&geom, 12).unwrap();
        let mat = MicroMaterial::new(100.0, 0.3, 1.0, 0.2).unwrap();
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let red = condense_periodic_zero_mean(&sys).unwrap();

        // Periodic, zero-mean target built on the reduced dofs.
        let mut target = vec![0.0; red.matrix.n];
        for node in 0..mesh.node_count() {
            if red.node_root[node] != node {
                continue;
            }
            let idx = red.reduced_index[node];
            let p = mesh.nodes[node];
            let (sx, cx) = (2.0 * std::f64::consts::PI * p[0]).sin_cos();
            let (sy, cy) = (2.0 * std::f64::consts::PI * p[1]).sin_cos();
            target[2 * idx] = 0.01 * sx * cy;
            target[2 * idx + 1] = -0.02 * cx * sy;
        }
        let b_red = red.matrix.matvec(&target);
        // Present the rhs in full numbering on master nodes.
        let mut rhs_full = vec![0.0; 2 * mesh.node_count()];
        for node in 0..mesh.node_count() {
            if red.node_root[node] == node {
                let idx = red.reduced_index[node];
                rhs_full[2 * node] = b_red[2 * idx];
                rhs_full[2 * node + 1] = b_red[2 * idx + 1];
            }
        }
        let settings = SolverSettings {
            rel_tol: 1e-12,
            abs_tol: 1e-14,
            ..Default::default()
        };
        let (u, _) = solve_periodic(&red, &rhs_full, &settings, "manufactured").unwrap();
        let mut expect = red.expand(&target);
        red.remove_mean(&mut expect);
        let err: f64 = u
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = expect.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-5 * scale, "relative error {}", err / scale);
    }

    #[test]
    fn solution_mean_is_removed() {
        let geom = crate::mesh::CellGeometry::new(1.0, 0.2, 1, 1.0).unwrap();
        let mesh = crate::mesh::build_square_lattice_rve(&geom, 10).unwrap();
        let mat = MicroMaterial::new(100.0, 0.3, 1.0, 0.2).unwrap();
        let quad = QuadratureRule::gauss(2);
        let sys = assemble(&mesh, &mat, &quad).unwrap();
        let red = condense_periodic_zero_mean(&sys).unwrap();
        // Any nonzero consistent rhs: use the phi_11 load.
        let elem_c = element_stiffness_field(&mesh, &mat).unwrap();
        let mut rhs = vec![0.0; 2 * mesh.node_count()];
        for (e, q) in mesh.elements.iter().enumerate() {
            let coords = [
                mesh.nodes[q[0]],
                mesh.nodes[q[1]],
                mesh.nodes[q[2]],
                mesh.nodes[q[3]],
            ];
            for &(xi, w) in &quad.points {
                let qp = qp_geometry(&coords, xi, w).unwrap();
                for (k, &node) in q.iter().enumerate() {
                    for a in 0..2 {
                        let mut v = 0.0;
                        for g in 0..2 {
                            v += elem_c[e].0[a][g][0][0] * qp.grads[k][g];
                        }
                        rhs[2 * node + a] -= qp.jxw * v;
                    }
                }
            }
        }
        let (u, _) = solve_periodic(&red, &rhs, &SolverSettings::default(), "mean test").unwrap();
        let means = red.component_means(&u);
        let w = 1.0;
        assert!(means[0].abs() <= 1e-12 * w && means[1].abs() <= 1e-12 * w);
    }

    #[test]
    fn dirichlet_solve_recovers_linear_field() {
        // Pure Dirichlet patch test: prescribe an affine displacement on the
        // whole boundary; the interior must reproduce it exactly.
        let (mesh, mat) = homogeneous_mesh(4);
        let sys = assemble(&mesh, &mat, &QuadratureRule::gauss(2)).unwrap();
        let affine = |p: [f64; 2]| [0.3 * p[0] - 0.1 * p[1], 0.05 * p[0] + 0.2 * p[1]];
        let (lo, hi) = mesh.bounding_box();
        let mut prescribed = Vec::new();
        for (i, p) in mesh.nodes.iter().enumerate() {
            let on_boundary = p[0] <= lo[0] + 1e-12
                || p[0] >= hi[0] - 1e-12
                || p[1] <= lo[1] + 1e-12
                || p[1] >= hi[1] - 1e-12;
            if on_boundary {
                let u = affine(*p);
                prescribed.push((2 * i, u[0]));
                prescribed.push((2 * i + 1, u[1]));
            }
        }
        let d = condense_dirichlet(&sys.matrix, &prescribed);
        let settings = SolverSettings {
            rel_tol: 1e-13,
            abs_tol: 1e-15,
            ..Default::default()
        };
        let (u, _) = solve_dirichlet(&d, None, &settings, "patch").unwrap();
        for (i, p) in mesh.nodes.iter().enumerate() {
            let exact = affine(*p);
            assert!((u[2 * i] - exact[0]).abs() < 1e-9);
            assert!((u[2 * i + 1] - exact[1]).abs() < 1e-9);
        }
    }
}
